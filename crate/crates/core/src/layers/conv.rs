//! Strided, zero-padded 2-D convolution (cross-correlation convention).
//!
//! Forward is the matrix form `y = W * im2col(x) + b`; backward applies the
//! exact transpose, `dx = col2im(W^T * dy)`, and accumulates
//! `dW += dy * im2col(x)^T`, `db += sum(dy)`.

use rayon::prelude::*;

use super::im2col::{col2im, im2col, Window};
use super::Param;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::{gaussian_fill, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// Kernels, shape `[out_ch, in_ch, kh, kw]`.
    pub weight: Param,
    /// Shape `[out_ch]`.
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight_std: f64,
        bias: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv needs positive channels/kernel/stride, got in={in_ch} out={out_ch} k={kernel} s={stride}"
            )));
        }
        let w = gaussian_fill([out_ch, in_ch, kernel, kernel], 0.0, weight_std, rng)?;
        Ok(Self {
            weight: Param::new(vec![out_ch, in_ch, kernel, kernel], w.into_vec()),
            bias: Param::filled(vec![out_ch], bias),
            stride,
            pad,
        })
    }

    /// Builds from explicit kernels `[out_ch, in_ch, kh, kw]` and biases.
    pub fn from_parts(kernels: &Tensor, bias: Vec<f64>, stride: usize, pad: usize) -> Result<Self> {
        let [o, i, kh, kw] = kernels.shape();
        if bias.len() != o {
            return Err(Error::shape("conv bias", &[o], &[bias.len()]));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv stride must be >= 1".into()));
        }
        Ok(Self {
            weight: Param::new(vec![o, i, kh, kw], kernels.data().to_vec()),
            bias: Param::new(vec![o], bias),
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    fn window(&self, x_shape: [usize; 4]) -> Window {
        let (kh, kw) = self.kernel();
        Window {
            channels: self.in_channels(),
            height: x_shape[2],
            width: x_shape[3],
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
        }
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.window([1, self.in_channels(), h, w]).output_size()
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    input: Tensor,
    out_shape: [usize; 4],
    weight_shape: Vec<usize>,
}

pub fn conv_forward(x: &Tensor, p: &ConvParams) -> Result<(Tensor, ConvCache)> {
    if x.c() != p.in_channels() {
        return Err(Error::shape("conv_forward input channels", &[p.in_channels()], &[x.c()]));
    }
    let win = p.window(x.shape());
    let (oh, ow) = win.output_size().ok_or_else(|| Error::InvalidShape {
        shape: x.shape().to_vec(),
        reason: format!("conv kernel {:?} does not fit (pad {})", p.kernel(), p.pad),
    })?;
    let out_ch = p.out_channels();
    let out_shape = [x.n(), out_ch, oh, ow];
    let mut y = Tensor::zeros(out_shape);
    let k = win.rows();
    let plane = oh * ow;
    let ys = y.sample_len();
    y.data_mut()
        .par_chunks_mut(ys)
        .enumerate()
        .for_each(|(b, out)| {
            let mut cols = vec![0.0; k * plane];
            im2col(x.sample(b), &win, &mut cols);
            for (o, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = p.bias.value[o]);
            }
            gemm(out_ch, k, plane, &p.weight.value, false, &cols, false, 1.0, out);
        });
    Ok((
        y,
        ConvCache {
            input: x.clone(),
            out_shape,
            weight_shape: p.weight.shape.clone(),
        },
    ))
}

pub fn conv_backward(dy: &Tensor, cache: &ConvCache, p: &mut ConvParams) -> Result<Tensor> {
    if dy.shape() != cache.out_shape {
        return Err(Error::shape("conv_backward upstream gradient", &cache.out_shape, &dy.shape()));
    }
    if p.weight.shape != cache.weight_shape {
        return Err(Error::StaleCache("conv parameters changed shape since forward".into()));
    }
    let x = &cache.input;
    let win = p.window(x.shape());
    let [n, out_ch, oh, ow] = cache.out_shape;
    let plane = oh * ow;
    let k = win.rows();
    let xs = x.sample_len();
    let weight = &p.weight.value;

    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![0.0; k * plane];
            im2col(x.sample(b), &win, &mut cols);
            let d = dy.sample(b);
            let mut gw = vec![0.0; out_ch * k];
            gemm(out_ch, plane, k, d, false, &cols, true, 0.0, &mut gw);
            let gb: Vec<f64> = d.chunks(plane).map(|c| c.iter().sum()).collect();
            let mut dcols = cols;
            gemm(k, out_ch, plane, weight, true, d, false, 0.0, &mut dcols);
            let mut dx = vec![0.0; xs];
            col2im(&dcols, &win, &mut dx);
            (gw, gb, dx)
        })
        .collect();

    let mut dx = Tensor::zeros(x.shape());
    for (b, (gw, gb, dxb)) in per_sample.into_iter().enumerate() {
        for (g, v) in p.weight.grad.iter_mut().zip(&gw) {
            *g += v;
        }
        for (g, v) in p.bias.grad.iter_mut().zip(&gb) {
            *g += v;
        }
        dx.sample_mut(b).copy_from_slice(&dxb);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inner_product;

    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let (kh, kw) = p.kernel();
        let (oh, ow) = p.output_size(x.h(), x.w()).unwrap();
        let oc = p.out_channels();
        Tensor::from_fn([x.n(), oc, oh, ow], |b, o, oy, ox| {
            let mut acc = p.bias.value[o];
            for i in 0..p.in_channels() {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                            let wv = p.weight.value[((o * p.in_channels() + i) * kh + ky) * kw + kx];
                            acc += wv * x.at(b, i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn([2, 1, 3, 4], |b, _, y, x| (b * 12 + y * 4 + x) as f64);
        let k = Tensor::full([1, 1, 1, 1], 1.0);
        let p = ConvParams::from_parts(&k, vec![0.0], 1, 0).unwrap();
        let (y, _) = conv_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn two_by_two_sum() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full([1, 1, 2, 2], 1.0);
        let p = ConvParams::from_parts(&k, vec![0.0], 1, 0).unwrap();
        let (y, _) = conv_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::from_fn([1, 2, 5, 5], |_, c, y, x| (c + y * x) as f64);
        let k = Tensor::zeros([3, 2, 3, 3]);
        let p = ConvParams::from_parts(&k, vec![0.1; 3], 1, 1).unwrap();
        let (y, _) = conv_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = Rng::new(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 0, 2), (2, 1, 3), (1, 2, 5)] {
            let x = gaussian_fill([2, 3, 7, 6], 0.0, 1.0, &mut rng).unwrap();
            let p = ConvParams::new(3, 4, k, stride, pad, 0.5, 0.2, &mut rng).unwrap();
            let (y, _) = conv_forward(&x, &p).unwrap();
            let want = naive_conv(&x, &p);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let p = ConvParams::new(2, 1, 3, 1, 0, 0.1, 0.0, &mut Rng::new(0)).unwrap();
        assert!(conv_forward(&Tensor::zeros([1, 1, 5, 5]), &p).is_err());
        assert!(conv_forward(&Tensor::zeros([1, 2, 2, 2]), &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let x = gaussian_fill([2, 2, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let mut p = ConvParams::new(2, 3, 3, 1, 1, 0.3, 0.1, &mut rng).unwrap();
        let (y, cache) = conv_forward(&x, &p).unwrap();
        let dx = conv_backward(&Tensor::zeros(y.shape()), &cache, &mut p).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert!(p.weight.grad.iter().chain(&p.bias.grad).all(|&g| g == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let x = Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| (y * 3 + x) as f64);
        let mut p = ConvParams::from_parts(&Tensor::full([1, 1, 1, 1], 1.0), vec![0.0], 1, 0).unwrap();
        let (_, cache) = conv_forward(&x, &p).unwrap();
        let dy = Tensor::from_fn([1, 1, 3, 3], |_, _, y, x| (x as f64) - (y as f64) * 0.5);
        let dx = conv_backward(&dy, &cache, &mut p).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn linear_in_input_without_bias() {
        let mut rng = Rng::new(12);
        let x = gaussian_fill([1, 2, 6, 6], 0.0, 1.0, &mut rng).unwrap();
        let mut p = ConvParams::new(2, 3, 3, 1, 1, 0.4, 0.0, &mut rng).unwrap();
        p.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let alpha = -2.5;
        let (y1, _) = conv_forward(&x.scale(alpha), &p).unwrap();
        let (y0, _) = conv_forward(&x, &p).unwrap();
        for (a, b) in y1.data().iter().zip(y0.scale(alpha).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_transpose_of_forward() {
        let mut rng = Rng::new(21);
        let x = gaussian_fill([2, 2, 6, 5], 0.0, 1.0, &mut rng).unwrap();
        let mut p = ConvParams::new(2, 3, 3, 2, 1, 0.4, 0.0, &mut rng).unwrap();
        let (y, cache) = conv_forward(&x, &p).unwrap();
        let r = gaussian_fill(y.shape(), 0.0, 1.0, &mut rng).unwrap();
        let dx = conv_backward(&r, &cache, &mut p).unwrap();
        let lhs = inner_product(&y, &r).unwrap();
        let rhs = inner_product(&x, &dx).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(2);
        let x = gaussian_fill([1, 1, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let mut p = ConvParams::new(1, 2, 3, 1, 1, 0.1, 0.0, &mut rng).unwrap();
        let (_, cache) = conv_forward(&x, &p).unwrap();
        assert!(conv_backward(&Tensor::zeros([1, 2, 3, 3]), &cache, &mut p).is_err());
    }
}
