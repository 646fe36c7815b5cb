//! Transposed convolution: the adjoint of a strided convolution, used as a
//! learned upsampler.
//!
//! With kernels `W` of shape `[in_ch, out_ch, kh, kw]` viewed as an
//! `in_ch x (out_ch*kh*kw)` matrix, forward is `y = col2im(W^T x) + b`.
//! The backward pass is the strided convolution of `dy` with the same,
//! unflipped kernels: `dx = W * im2col(dy)`.

use rayon::prelude::*;

use super::im2col::{col2im, im2col, Window};
use super::Param;
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::tensor::{gaussian_fill, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TransposedConvParams {
    /// Kernels, shape `[in_ch, out_ch, kh, kw]`.
    pub weight: Param,
    /// Shape `[out_ch]`.
    pub bias: Param,
    /// Upsampling factor `s_T`.
    pub stride: usize,
    pub pad: usize,
}

impl TransposedConvParams {
    #[allow(clippy::too_many_arguments)]
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
                "transposed conv needs positive channels/kernel/stride, got in={in_ch} out={out_ch} k={kernel} s={stride}"
            )));
        }
        let w = gaussian_fill([in_ch, out_ch, kernel, kernel], 0.0, weight_std, rng)?;
        Ok(Self {
            weight: Param::new(vec![in_ch, out_ch, kernel, kernel], w.into_vec()),
            bias: Param::filled(vec![out_ch], bias),
            stride,
            pad,
        })
    }

    /// Builds from explicit kernels `[in_ch, out_ch, kh, kw]` and biases.
    pub fn from_parts(kernels: &Tensor, bias: Vec<f64>, stride: usize, pad: usize) -> Result<Self> {
        let [i, o, kh, kw] = kernels.shape();
        if bias.len() != o {
            return Err(Error::shape("tconv bias", &[o], &[bias.len()]));
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("transposed conv stride must be >= 1".into()));
        }
        Ok(Self {
            weight: Param::new(vec![i, o, kh, kw], kernels.data().to_vec()),
            bias: Param::new(vec![o], bias),
            stride,
            pad,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }

    /// `s_T * (n - 1) + k - 2 * pad` per axis, or `None` if non-positive.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let oh = (self.stride * (h - 1) + kh).checked_sub(2 * self.pad)?;
        let ow = (self.stride * (w - 1) + kw).checked_sub(2 * self.pad)?;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }

    /// Window over the *output* image that maps back onto the input grid.
    fn window(&self, oh: usize, ow: usize) -> Window {
        let (kh, kw) = self.kernel();
        Window {
            channels: self.out_channels(),
            height: oh,
            width: ow,
            kh,
            kw,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TConvCache {
    input: Tensor,
    out_shape: [usize; 4],
    weight_shape: Vec<usize>,
}

pub fn tconv_forward(x: &Tensor, p: &TransposedConvParams) -> Result<(Tensor, TConvCache)> {
    if x.c() != p.in_channels() {
        return Err(Error::shape("tconv_forward input channels", &[p.in_channels()], &[x.c()]));
    }
    let (oh, ow) = p.output_size(x.h(), x.w()).ok_or_else(|| Error::InvalidShape {
        shape: x.shape().to_vec(),
        reason: "transposed conv output would be empty".into(),
    })?;
    let win = p.window(oh, ow);
    let plane_in = x.h() * x.w();
    let k = win.rows();
    let in_ch = p.in_channels();
    let out_ch = p.out_channels();
    let out_shape = [x.n(), out_ch, oh, ow];
    let mut y = Tensor::zeros(out_shape);
    let ys = y.sample_len();
    y.data_mut()
        .par_chunks_mut(ys)
        .enumerate()
        .for_each(|(b, out)| {
            let mut cols = vec![0.0; k * plane_in];
            gemm(k, in_ch, plane_in, &p.weight.value, true, x.sample(b), false, 0.0, &mut cols);
            col2im(&cols, &win, out);
            for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
                let bias = p.bias.value[o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        });
    Ok((
        y,
        TConvCache {
            input: x.clone(),
            out_shape,
            weight_shape: p.weight.shape.clone(),
        },
    ))
}

pub fn tconv_backward(dy: &Tensor, cache: &TConvCache, p: &mut TransposedConvParams) -> Result<Tensor> {
    if dy.shape() != cache.out_shape {
        return Err(Error::shape("tconv_backward upstream gradient", &cache.out_shape, &dy.shape()));
    }
    if p.weight.shape != cache.weight_shape {
        return Err(Error::StaleCache("transposed conv parameters changed shape since forward".into()));
    }
    let x = &cache.input;
    let [n, out_ch, oh, ow] = cache.out_shape;
    let win = p.window(oh, ow);
    let k = win.rows();
    let in_ch = p.in_channels();
    let plane_in = x.h() * x.w();
    let weight = &p.weight.value;

    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|b| {
            let d = dy.sample(b);
            let mut cols = vec![0.0; k * plane_in];
            im2col(d, &win, &mut cols);
            let mut dx = vec![0.0; in_ch * plane_in];
            gemm(in_ch, k, plane_in, weight, false, &cols, false, 0.0, &mut dx);
            let mut gw = vec![0.0; in_ch * k];
            gemm(in_ch, plane_in, k, x.sample(b), false, &cols, true, 0.0, &mut gw);
            let gb: Vec<f64> = d.chunks(oh * ow).map(|c| c.iter().sum()).collect();
            (gw, gb, dx)
        })
        .collect();

    debug_assert_eq!(out_ch, p.bias.len());
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
    use crate::layers::conv::{conv_forward, ConvParams};
    use crate::tensor::inner_product;

    #[test]
    fn single_pixel_spreads_kernel() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let k = Tensor::from_vec([1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let p = TransposedConvParams::from_parts(&k, vec![0.0], 2, 0).unwrap();
        let (y, _) = tconv_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), k.data());
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = Rng::new(4);
        let mut p = TransposedConvParams::new(3, 2, 2, 2, 0, 0.1, 0.0, &mut rng).unwrap();
        p.bias.value = vec![0.7, -0.3];
        let (y, _) = tconv_forward(&Tensor::zeros([2, 3, 4, 5]), &p).unwrap();
        assert_eq!(y.shape(), [2, 2, 8, 10]);
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().all(|&v| v == 0.7));
            assert!(y.plane(b, 1).iter().all(|&v| v == -0.3));
        }
    }

    #[test]
    fn doubles_spatial_size() {
        let p = TransposedConvParams::new(4, 2, 2, 2, 0, 0.1, 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(p.output_size(11, 11), Some((22, 22)));
        assert_eq!(p.output_size(44, 44), Some((88, 88)));
    }

    #[test]
    fn adjoint_of_matching_conv() {
        let mut rng = Rng::new(99);
        for &(k, s, pad, h) in &[(2, 2, 0, 6), (3, 1, 1, 5), (3, 2, 1, 7), (4, 2, 1, 8)] {
            let conv = ConvParams::new(2, 3, k, s, pad, 0.5, 0.0, &mut rng).unwrap();
            let kernels = Tensor::from_vec([3, 2, k, k], conv.weight.value.clone()).unwrap();
            let tconv = TransposedConvParams::from_parts(&kernels, vec![0.0; 2], s, pad).unwrap();
            let x = gaussian_fill([2, 2, h, h], 0.0, 1.0, &mut rng).unwrap();
            let (cx, _) = conv_forward(&x, &conv).unwrap();
            let y = gaussian_fill(cx.shape(), 0.0, 1.0, &mut rng).unwrap();
            let (ty, _) = tconv_forward(&y, &tconv).unwrap();
            assert_eq!(ty.shape(), x.shape(), "k={k} s={s} p={pad} h={h}");
            let lhs = inner_product(&cx, &y).unwrap();
            let rhs = inner_product(&x, &ty).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_equals_conv_forward_with_same_kernels() {
        let mut rng = Rng::new(7);
        let mut tp = TransposedConvParams::new(3, 2, 2, 2, 0, 0.5, 0.1, &mut rng).unwrap();
        let x = gaussian_fill([2, 3, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let (y, cache) = tconv_forward(&x, &tp).unwrap();
        let dy = gaussian_fill(y.shape(), 0.0, 1.0, &mut rng).unwrap();
        let kernels = Tensor::from_vec([3, 2, 2, 2], tp.weight.value.clone()).unwrap();
        let conv = ConvParams::from_parts(&kernels, vec![0.0; 3], 2, 0).unwrap();
        let (via_conv, _) = conv_forward(&dy, &conv).unwrap();
        let dx = tconv_backward(&dy, &cache, &mut tp).unwrap();
        assert_eq!(dx, via_conv);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let mut p = TransposedConvParams::new(2, 2, 2, 2, 0, 0.5, 0.1, &mut rng).unwrap();
        let x = gaussian_fill([1, 2, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let (y, cache) = tconv_forward(&x, &p).unwrap();
        let dx = tconv_backward(&Tensor::zeros(y.shape()), &cache, &mut p).unwrap();
        assert_eq!(dx.max_abs(), 0.0);
        assert!(p.weight.grad.iter().chain(&p.bias.grad).all(|&g| g == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let p = TransposedConvParams::new(2, 1, 2, 2, 0, 0.1, 0.0, &mut Rng::new(0)).unwrap();
        assert!(tconv_forward(&Tensor::zeros([1, 3, 2, 2]), &p).is_err());
    }
}
