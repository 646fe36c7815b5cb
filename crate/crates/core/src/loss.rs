//! Recognition and segmentation cross-entropy, their fused softmax
//! gradients, and the weighted joint loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::softmax;
use crate::tensor::Tensor;

/// Lower clamp on class probabilities inside `ln` so confident mistakes stay
/// finite. The segmentation loss works from logits and needs no clamp.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub recognition: f64,
    pub segmentation: f64,
    pub total: f64,
    pub lambda_rec: f64,
    pub lambda_seg: f64,
}

impl LossValue {
    pub fn new(recognition: f64, segmentation: f64, lambda_rec: f64, lambda_seg: f64) -> Self {
        Self {
            recognition,
            segmentation,
            total: joint_loss(recognition, segmentation, lambda_rec, lambda_seg),
            lambda_rec,
            lambda_seg,
        }
    }
}

pub fn joint_loss(l_rec: f64, l_seg: f64, lambda_rec: f64, lambda_seg: f64) -> f64 {
    lambda_rec * l_rec + lambda_seg * l_seg
}

/// Batch-mean cross-entropy of class probabilities `(batch, C, 1, 1)`.
///
/// Returns the loss and its gradient with respect to the pre-softmax logits,
/// `(p - onehot(y)) / batch`.
pub fn recognition_loss(probs: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = probs.shape();
    if h != 1 || w != 1 {
        return Err(Error::shape("recognition_loss probabilities", &[n, c, 1, 1], &probs.shape()));
    }
    if labels.len() != n {
        return Err(Error::shape("recognition_loss labels", &[n], &[labels.len()]));
    }
    let mut loss = 0.0;
    let mut grad = probs.scale(1.0 / n as f64);
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        loss -= probs.at(b, y, 0, 0).max(LOG_FLOOR).ln();
        grad[[b, y, 0, 0]] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}

/// Per-pixel softmax cross-entropy over `V` segmentation classes, averaged
/// over the `h*w` pixels of each chip and then over the batch.
///
/// `masks` holds `batch*h*w` class indices in row-major order. The returned
/// gradient is with respect to the logits: `(p - onehot(s)) / (h*w*batch)`.
pub fn segmentation_loss(logits: &Tensor, masks: &[u8]) -> Result<(f64, Tensor)> {
    let [n, v, h, w] = logits.shape();
    let hw = h * w;
    if masks.len() != n * hw {
        return Err(Error::shape("segmentation_loss masks", &[n, h, w], &[masks.len()]));
    }
    let scale = 1.0 / (hw * n) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut pix = vec![0.0; v];
    for b in 0..n {
        let src = logits.sample(b);
        let mut sample_loss = 0.0;
        for i in 0..hw {
            let s = masks[b * hw + i] as usize;
            if s >= v {
                return Err(Error::LabelOutOfRange { label: s, classes: v });
            }
            for (k, p) in pix.iter_mut().enumerate() {
                *p = src[k * hw + i];
            }
            let p = softmax(&pix)?;
            // -ln p_s straight from the logits: exact, finite and never clamped.
            let max = pix.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + pix.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            sample_loss += lse - pix[s];
            let g = grad.sample_mut(b);
            for k in 0..v {
                let target = if k == s { 1.0 } else { 0.0 };
                g[k * hw + i] = (p[k] - target) * scale;
            }
        }
        loss += sample_loss / hw as f64;
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gaussian_fill;

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = Tensor::from_vec([2, 3, 1, 1], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (l, g) = recognition_loss(&p, &[1, 0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    // The decimal literal is a check independent of `ln`.
    #[allow(clippy::approx_constant)]
    fn uniform_ten_class_loss_is_ln10() {
        let p = Tensor::full([4, 10, 1, 1], 0.1);
        let (l, _) = recognition_loss(&p, &[0, 3, 9, 5]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn recognition_gradient_sums_to_zero_per_sample() {
        let mut rng = Rng::new(3);
        let logits = gaussian_fill([3, 5, 1, 1], 0.0, 2.0, &mut rng).unwrap();
        let mut probs = Tensor::zeros(logits.shape());
        for b in 0..3 {
            probs.sample_mut(b).copy_from_slice(&softmax(logits.sample(b)).unwrap());
        }
        let (_, g) = recognition_loss(&probs, &[4, 0, 2]).unwrap();
        for b in 0..3 {
            assert!(g.sample(b).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::full([1, 3, 1, 1], 1.0 / 3.0);
        assert!(matches!(recognition_loss(&p, &[3]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn confident_perfect_segmentation() {
        let mut logits = Tensor::zeros([1, 2, 2, 2]);
        let mask = [0u8, 1, 1, 0];
        for (i, &s) in mask.iter().enumerate() {
            logits.sample_mut(0)[s as usize * 4 + i] = 800.0;
        }
        let (l, _) = segmentation_loss(&logits, &mask).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_segmentation_is_ln2_for_any_size() {
        for &(h, w) in &[(2, 2), (7, 3), (32, 32)] {
            let logits = Tensor::full([2, 2, h, w], 0.4);
            let masks: Vec<u8> = (0..2 * h * w).map(|i| (i % 3 == 0) as u8).collect();
            let (l, _) = segmentation_loss(&logits, &masks).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn four_pixel_hand_computation() {
        // Pixel logits (class0, class1) and true class.
        let px = [(0.0, 1.0, 1u8), (2.0, -1.0, 0), (0.5, 0.5, 1), (-3.0, 0.0, 0)];
        let mut logits = Tensor::zeros([1, 2, 2, 2]);
        let mut mask = [0u8; 4];
        for (i, &(a, b, s)) in px.iter().enumerate() {
            logits.sample_mut(0)[i] = a;
            logits.sample_mut(0)[4 + i] = b;
            mask[i] = s;
        }
        let mut want = 0.0;
        for &(a, b, s) in &px {
            let z = f64::exp(a) + f64::exp(b);
            let p = if s == 0 { f64::exp(a) / z } else { f64::exp(b) / z };
            want -= p.ln();
        }
        want /= 4.0;
        let (l, _) = segmentation_loss(&logits, &mask).unwrap();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn mask_out_of_range() {
        let logits = Tensor::zeros([1, 2, 1, 2]);
        assert!(segmentation_loss(&logits, &[0, 2]).is_err());
        assert!(segmentation_loss(&logits, &[0]).is_err());
    }

    #[test]
    fn segmentation_gradient_scales_inversely_with_pixels() {
        let small = Tensor::from_fn([1, 2, 2, 2], |_, c, y, x| (c as f64 - 0.5) * (y + 2 * x) as f64);
        let big = Tensor::from_fn([1, 2, 4, 4], |_, c, y, x| small.at(0, c, y / 2, x / 2));
        let m_small = [0u8, 1, 1, 0];
        let m_big: Vec<u8> = (0..16).map(|i| m_small[(i / 4 / 2) * 2 + (i % 4) / 2]).collect();
        let (_, gs) = segmentation_loss(&small, &m_small).unwrap();
        let (_, gb) = segmentation_loss(&big, &m_big).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = gb.at(0, c, y, x) * 4.0;
                    assert!((a - gs.at(0, c, y / 2, x / 2)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn joint_loss_weights() {
        assert_eq!(joint_loss(2.0, 0.5, 1.0, 1.0), 2.5);
        assert_eq!(joint_loss(2.0, 0.5, 1.0, 0.0), 2.0);
        assert!((joint_loss(9.0, 0.3, 0.0, 2.0) - 0.6).abs() < 1e-15);
        let lv = LossValue::new(1.5, 0.25, 1.0, 2.0);
        assert_eq!(lv.total, 1.5 + 0.5);
    }
}
