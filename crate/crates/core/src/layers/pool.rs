//! 2x2 stride-2 max pooling and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat input offset of the selected maximum for every output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: [usize; 4],
    pub output_shape: [usize; 4],
    pub argmax: Vec<usize>,
}

/// Ties go to the smallest flat index inside the window.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "2x2 max pooling needs even height and width".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let out_shape = [n, c, oh, ow];
    let mut y = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for cand in [top + 1, top + w, top + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    y.data_mut()[o] = data[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((
        y,
        PoolIndices {
            input_shape: x.shape(),
            output_shape: out_shape,
            argmax,
        },
    ))
}

/// Routes each upstream gradient to the position that won the forward max.
pub fn maxpool_backward(dy: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    if dy.shape() != idx.output_shape || idx.argmax.len() != dy.len() {
        return Err(Error::shape("maxpool_backward", &idx.output_shape, &dy.shape()));
    }
    let mut dx = Tensor::zeros(idx.input_shape);
    let len = dx.len();
    let out = dx.data_mut();
    for (&i, &d) in idx.argmax.iter().zip(dy.data()) {
        if i >= len {
            return Err(Error::StaleCache(format!("pool index {i} outside input of {len} elements")));
        }
        out[i] += d;
    }
    Ok(dx)
}

/// `(n, c, h, w) -> (n, c, 1, 1)` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let inv = 1.0 / (h * w) as f64;
    Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| x.plane(b, ch).iter().sum::<f64>() * inv)
}

pub fn global_avg_pool_backward(dy: &Tensor, input_shape: [usize; 4]) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    if dy.shape() != [n, c, 1, 1] {
        return Err(Error::shape("global_avg_pool_backward", &[n, c, 1, 1], &dy.shape()));
    }
    let inv = 1.0 / (h * w) as f64;
    Ok(Tensor::from_fn(input_shape, |b, ch, _, _| dy.at(b, ch, 0, 0) * inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute_pool(x: &Tensor) -> Vec<f64> {
        let mut out = Vec::new();
        for b in 0..x.n() {
            for c in 0..x.c() {
                for oy in 0..x.h() / 2 {
                    for ox in 0..x.w() / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.at(b, c, 2 * oy + dy, 2 * ox + dx));
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_window() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn constant_input_picks_top_left() {
        let x = Tensor::full([1, 2, 4, 4], 1.5);
        let (y, idx) = maxpool_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        let want: Vec<usize> = (0..2)
            .flat_map(|c| (0..2).flat_map(move |oy| (0..2).map(move |ox| c * 16 + 2 * oy * 4 + 2 * ox)))
            .collect();
        assert_eq!(idx.argmax, want);
    }

    #[test]
    fn ramp() {
        let x = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x + 1) as f64);
        let (y, _) = maxpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
        assert_eq!(y.data(), brute_pool(&x).as_slice());
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool_forward(&Tensor::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn routes_one_per_window_and_preserves_sum() {
        let mut rng = Rng::new(6);
        let mut vals: Vec<f64> = (0..64).map(|i| i as f64).collect();
        rng.shuffle(&mut vals);
        let x = Tensor::from_vec([1, 1, 8, 8], vals).unwrap();
        let (y, idx) = maxpool_forward(&x).unwrap();
        let dx = maxpool_backward(&Tensor::full(y.shape(), 1.0), &idx).unwrap();
        assert_eq!(dx.sum(), y.len() as f64);
        for oy in 0..4 {
            for ox in 0..4 {
                let ones = (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .filter(|&(a, b)| dx.at(0, 0, 2 * oy + a, 2 * ox + b) == 1.0)
                    .count();
                assert_eq!(ones, 1);
            }
        }
    }

    #[test]
    fn corrupted_indices_rejected() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        let (y, mut idx) = maxpool_forward(&x).unwrap();
        idx.argmax[0] = 99;
        assert!(maxpool_backward(&y, &idx).is_err());
    }

    #[test]
    fn global_average() {
        let x = Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c * 10 + y * 2 + x) as f64);
        let g = global_avg_pool_forward(&x);
        assert_eq!(g.data(), &[1.5, 11.5]);
        let dx = global_avg_pool_backward(&Tensor::full([1, 2, 1, 1], 4.0), x.shape()).unwrap();
        assert!(dx.data().iter().all(|&v| v == 1.0));
    }
}
