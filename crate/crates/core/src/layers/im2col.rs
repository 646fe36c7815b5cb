//! Patch unfolding used by both convolution and its transpose.

/// Geometry of a strided, zero-padded correlation window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Output grid size, or `None` when the kernel does not fit.
    pub fn output_size(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if self.stride == 0 || self.kh == 0 || self.kw == 0 || ph < self.kh || pw < self.kw {
            return None;
        }
        Some(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds one `channels x height x width` image into a
/// `(channels*kh*kw) x (oh*ow)` matrix; out-of-image taps read zero.
pub fn im2col(img: &[f64], win: &Window, cols: &mut [f64]) {
    let (oh, ow) = win.output_size().expect("im2col: kernel larger than padded input");
    let (h, w) = (win.height, win.width);
    debug_assert_eq!(img.len(), win.channels * h * w);
    debug_assert_eq!(cols.len(), win.rows() * oh * ow);
    let pad = win.pad as isize;
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-sums a column matrix back onto the image.
pub fn col2im(cols: &[f64], win: &Window, img: &mut [f64]) {
    let (oh, ow) = win.output_size().expect("col2im: kernel larger than padded input");
    let (h, w) = (win.height, win.width);
    debug_assert_eq!(img.len(), win.channels * h * w);
    debug_assert_eq!(cols.len(), win.rows() * oh * ow);
    img.iter_mut().for_each(|v| *v = 0.0);
    let pad = win.pad as isize;
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = Rng::new(17);
        for &(c, h, w, k, s, p) in &[(2, 5, 6, 3, 1, 1), (1, 6, 6, 2, 2, 0), (3, 7, 5, 3, 2, 1)] {
            let win = Window { channels: c, height: h, width: w, kh: k, kw: k, stride: s, pad: p };
            let (oh, ow) = win.output_size().unwrap();
            let x: Vec<f64> = (0..c * h * w).map(|_| rng.gaussian()).collect();
            let y: Vec<f64> = (0..win.rows() * oh * ow).map(|_| rng.gaussian()).collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &win, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &win, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn output_size_rejects_oversized_kernel() {
        let win = Window { channels: 1, height: 2, width: 2, kh: 3, kw: 3, stride: 1, pad: 0 };
        assert_eq!(win.output_size(), None);
    }
}
