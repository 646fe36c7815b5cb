//! Dense `(batch, channel, height, width)` tensors of `f64`.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Four-dimensional row-major array. All dimensions are at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        check_dims(shape).expect("tensor dimensions must be >= 1");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        check_dims(shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("data length {} does not equal {}", data.len(), len),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [n, c, h, w] = shape;
        let mut i = 0;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        t.data[i] = f(b, ch, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of `(b, ch, y, x)`, or `None` when out of range.
    pub fn offset(&self, b: usize, ch: usize, y: usize, x: usize) -> Option<usize> {
        let [n, c, h, w] = self.shape;
        if b < n && ch < c && y < h && x < w {
            Some(((b * c + ch) * h + y) * w + x)
        } else {
            None
        }
    }

    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> Option<f64> {
        self.offset(b, ch, y, x).map(|i| self.data[i])
    }

    /// Bounds-checked read. Panics on out-of-range coordinates.
    pub fn at(&self, b: usize, ch: usize, y: usize, x: usize) -> f64 {
        self[[b, ch, y, x]]
    }

    /// Contiguous `c*h*w` slab of one batch element.
    pub fn sample(&self, b: usize) -> &[f64] {
        let stride = self.sample_len();
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let stride = self.sample_len();
        &mut self.data[b * stride..(b + 1) * stride]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Contiguous `h*w` plane of one channel of one batch element.
    pub fn plane(&self, b: usize, ch: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + ch) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, b: usize, ch: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + ch) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch elements `start..start+count` as a new tensor.
    pub fn select_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.n() {
            return Err(Error::InvalidShape {
                shape: self.shape.to_vec(),
                reason: format!("batch range {start}..{} out of bounds", start + count),
            });
        }
        let stride = self.sample_len();
        Self::from_vec(
            [count, self.shape[1], self.shape[2], self.shape[3]],
            self.data[start * stride..(start + count) * stride].to_vec(),
        )
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyDataset)?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            n += t.n();
            data.extend_from_slice(&t.data);
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Self> {
        if a.n() != b.n() || a.h() != b.h() || a.w() != b.w() {
            return Err(Error::shape("concat_channels", &a.shape, &b.shape));
        }
        let [n, ca, h, w] = a.shape;
        let cb = b.c();
        let mut out = Self::zeros([n, ca + cb, h, w]);
        let sa = a.sample_len();
        for i in 0..n {
            let dst = out.sample_mut(i);
            dst[..sa].copy_from_slice(a.sample(i));
            dst[sa..].copy_from_slice(b.sample(i));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor::concat_channels`]: first `first_channels` channels, then the rest.
    pub fn split_channels(&self, first_channels: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.shape;
        if first_channels == 0 || first_channels >= c {
            return Err(Error::InvalidShape {
                shape: self.shape.to_vec(),
                reason: format!("cannot split {c} channels at {first_channels}"),
            });
        }
        let mut a = Self::zeros([n, first_channels, h, w]);
        let mut b = Self::zeros([n, c - first_channels, h, w]);
        let sa = a.sample_len();
        for i in 0..n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..sa]);
            b.sample_mut(i).copy_from_slice(&src[sa..]);
        }
        Ok((a, b))
    }

    /// Window `[y0, y0+h) x [x0, x0+w)` of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.h() || x0 + w > self.w() {
            return Err(Error::InvalidShape {
                shape: self.shape.to_vec(),
                reason: format!("crop {h}x{w} at ({y0},{x0}) out of bounds"),
            });
        }
        let [n, c, _, sw] = self.shape;
        let mut out = Self::zeros([n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for y in 0..h {
                    let s = (y0 + y) * sw + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

impl Index<[usize; 4]> for Tensor {
    type Output = f64;

    fn index(&self, [b, c, y, x]: [usize; 4]) -> &f64 {
        match self.offset(b, c, y, x) {
            Some(i) => &self.data[i],
            None => panic!("index ({b},{c},{y},{x}) out of bounds for shape {:?}", self.shape),
        }
    }
}

impl IndexMut<[usize; 4]> for Tensor {
    fn index_mut(&mut self, [b, c, y, x]: [usize; 4]) -> &mut f64 {
        match self.offset(b, c, y, x) {
            Some(i) => &mut self.data[i],
            None => panic!("index ({b},{c},{y},{x}) out of bounds for shape {:?}", self.shape),
        }
    }
}

fn check_dims(shape: [usize; 4]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "all dimensions must be >= 1".into(),
        });
    }
    Ok(())
}

/// Surrounds every plane with `pad` rows and columns of zeros.
pub fn zero_pad(t: &Tensor, pad: usize) -> Tensor {
    zero_pad_asym(t, pad, pad, pad, pad)
}

/// Zero padding with independent margins on each side.
pub fn zero_pad_asym(t: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    if top == 0 && bottom == 0 && left == 0 && right == 0 {
        return t.clone();
    }
    let [n, c, h, w] = t.shape();
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                let d = (y + top) * pw + left;
                dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

/// Removes `pad` rows and columns from every border; inverse of [`zero_pad`].
pub fn center_crop(t: &Tensor, pad: usize) -> Result<Tensor> {
    if 2 * pad >= t.h() || 2 * pad >= t.w() {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("cannot strip {pad} from each border"),
        });
    }
    t.crop(pad, pad, t.h() - 2 * pad, t.w() - 2 * pad)
}

/// I.i.d. normal draws `N(mean, std^2)` in row-major order.
pub fn gaussian_fill(shape: [usize; 4], mean: f64, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::InvalidConfig(format!("gaussian std must be >= 0, got {std}")));
    }
    check_dims(shape)?;
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.normal(mean, std)).collect();
    Tensor::from_vec(shape, data)
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("inner_product", &a.shape(), &b.shape()));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn pad_zero_is_identity() {
        let t = Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| (c * 9 + y * 3 + x) as f64);
        assert_eq!(zero_pad(&t, 0), t);
    }

    #[test]
    fn pad_single_pixel() {
        let t = Tensor::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        let p = zero_pad(&t, 1);
        assert_eq!(p.shape(), [1, 1, 3, 3]);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_matches_loop_oracle() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = zero_pad(&t, 1);
        assert_eq!(p.shape(), [1, 1, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                let inside = (1..3).contains(&y) && (1..3).contains(&x);
                let expected = if inside { t.at(0, 0, y - 1, x - 1) } else { 0.0 };
                assert_eq!(p.at(0, 0, y, x), expected);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn out_of_range_access_panics() {
        let t = Tensor::zeros([1, 1, 2, 2]);
        let _ = t.at(0, 0, 2, 0);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::from_vec([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn gaussian_degenerate_std() {
        let mut rng = Rng::new(1);
        let t = gaussian_fill([2, 3, 4, 5], 0.25, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gaussian_statistics() {
        let mut rng = Rng::new(2024);
        let t = gaussian_fill([1, 1, 1, 100_000], 0.0, 0.01, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_fill([2, 2, 3, 3], 0.0, 1.0, &mut Rng::new(11)).unwrap();
        let b = gaussian_fill([2, 2, 3, 3], 0.0, 1.0, &mut Rng::new(11)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gaussian_rejects_negative_std() {
        assert!(gaussian_fill([1, 1, 1, 1], 0.0, -1.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn inner_product_cases() {
        let ones = Tensor::full([1, 1, 2, 2], 1.0);
        assert_eq!(inner_product(&ones, &ones).unwrap(), 4.0);
        let a = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(inner_product(&a, &b).unwrap(), 0.0);
        assert!(inner_product(&a, &ones).is_err());

        let mut rng = Rng::new(5);
        let a = gaussian_fill([1, 2, 2, 2], 0.0, 1.0, &mut rng).unwrap();
        let b = gaussian_fill([1, 2, 2, 2], 0.0, 1.0, &mut rng).unwrap();
        let mut oracle = 0.0;
        for i in 0..8 {
            oracle += a.data()[i] * b.data()[i];
        }
        assert!((inner_product(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_fn([2, 2, 3, 3], |b, c, y, x| (b * 100 + c * 10 + y * 3 + x) as f64);
        let b = Tensor::from_fn([2, 3, 3, 3], |b, c, y, x| -((b * 100 + c * 10 + y * 3 + x) as f64));
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.at(1, 2, 0, 0), b.at(1, 0, 0, 0));
        let (a2, b2) = cat.split_channels(2).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    proptest! {
        #[test]
        fn pad_then_strip_is_identity(n in 1usize..3, c in 1usize..3, h in 1usize..6, w in 1usize..6, pad in 0usize..4, seed in any::<u64>()) {
            let t = gaussian_fill([n, c, h, w], 0.0, 1.0, &mut Rng::new(seed)).unwrap();
            let p = zero_pad(&t, pad);
            prop_assert_eq!(p.shape(), [n, c, h + 2 * pad, w + 2 * pad]);
            let border_sum: f64 = p.data().iter().map(|v| v.abs()).sum::<f64>()
                - t.data().iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!(border_sum.abs() < 1e-9);
            let back = if pad == 0 { p.clone() } else { center_crop(&p, pad).unwrap() };
            prop_assert_eq!(back, t);
        }

        #[test]
        fn flatten_reshape_identity(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let t = gaussian_fill([n, c, h, w], 0.0, 1.0, &mut Rng::new(seed)).unwrap();
            let flat = t.clone().reshape([1, 1, 1, n * c * h * w]).unwrap();
            prop_assert_eq!(flat.reshape([n, c, h, w]).unwrap(), t);
        }
    }
}
