//! Epoch loop and batched inference.

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::loss::{recognition_loss, segmentation_loss, LossValue};
use crate::network::MtlNetwork;
use crate::optim::{apply_sgd, SgdState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_rec: f64,
    pub loss_seg: f64,
    /// Fraction of training samples whose argmax class was correct during the pass.
    pub train_acc: f64,
}

/// Stacks images into `(B,1,h,w)` with labels and concatenated masks.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>, Vec<u8>)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let x = Tensor::stack(&images)?;
    let labels = samples.iter().map(|s| s.label).collect();
    let masks = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
    Ok((x, labels, masks))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax over the class planes of one sample.
pub fn seg_argmax(logits: &Tensor, b: usize) -> Vec<u8> {
    let [_, v, h, w] = logits.shape();
    let plane = h * w;
    let s = logits.sample(b);
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..v {
                if s[k * plane + i] > s[best * plane + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// One pass over `samples` in a freshly shuffled order, one SGD step per
/// mini-batch. The learning rate comes from `state`, whose epoch counter is
/// advanced at the end.
pub fn train_epoch(
    net: &mut MtlNetwork,
    samples: &[Sample],
    state: &mut SgdState,
    rng: &mut Rng,
) -> Result<EpochSummary> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = net.config.batch_size.max(1);
    let (lam_r, lam_s) = (net.config.lambda_rec, net.config.lambda_seg);
    let lr = state.lr();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);

    let (mut sum_r, mut sum_s, mut correct) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(batch) {
        let items: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
        let (x, labels, masks) = make_batch(&items)?;
        let out = net.forward(&x, Mode::Train)?;
        let (l_r, g_r) = recognition_loss(&out.class_probs, &labels)?;
        let (l_s, g_s) = segmentation_loss(&out.seg_logits, &masks)?;
        if !(l_r.is_finite() && l_s.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        net.backward(&out.cache, Some(&g_r.scale(lam_r)), Some(&g_s.scale(lam_s)))?;
        apply_sgd(net, lr)?;

        let n = chunk.len() as f64;
        sum_r += l_r * n;
        sum_s += l_s * n;
        correct += (0..chunk.len())
            .filter(|&b| argmax(out.class_probs.sample(b)) == labels[b])
            .count();
    }
    let total = samples.len() as f64;
    let loss = LossValue::new(sum_r / total, sum_s / total, lam_r, lam_s);
    let summary = EpochSummary {
        epoch: state.epoch,
        lr,
        loss: loss.total,
        loss_rec: loss.recognition,
        loss_seg: loss.segmentation,
        train_acc: correct as f64 / total,
    };
    state.epoch += 1;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<u8>>,
}

/// Eval-mode inference in order, `batch` samples at a time.
pub fn predict(net: &mut MtlNetwork, samples: &[Sample], batch: usize) -> Result<Predictions> {
    let mut p = Predictions {
        labels: Vec::with_capacity(samples.len()),
        probs: Vec::with_capacity(samples.len()),
        masks: Vec::with_capacity(samples.len()),
    };
    for chunk in samples.chunks(batch.max(1)) {
        let items: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = make_batch(&items)?;
        let out = net.forward(&x, Mode::Eval)?;
        for b in 0..chunk.len() {
            let probs = out.class_probs.sample(b).to_vec();
            p.labels.push(argmax(&probs));
            p.probs.push(probs);
            p.masks.push(seg_argmax(&out.seg_logits, b));
        }
    }
    Ok(p)
}
