//! Central finite-difference verification of every hand-written backward pass.
//!
//! Each layer check draws a random instance, projects the layer output onto
//! a random direction `r` to get the scalar `L = <f(x), r>`, and compares
//! the analytic gradient (backward fed with `r`) against
//! `(L(x + h e_i) - L(x - h e_i)) / 2h` for every input and parameter entry.

use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    bn_backward, bn_forward, conv_backward, conv_forward, maxpool_backward, maxpool_forward,
    relu_backward, relu_forward, softmax, tconv_backward, tconv_forward, BnParams, ConvParams, Mode,
    Param, TransposedConvParams,
};
use crate::loss::{recognition_loss, segmentation_loss};
use crate::network::{MtlNetwork, NetworkConfig};
use crate::rng::Rng;
use crate::tensor::{gaussian_fill, inner_product, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Magnitude below which a gradient entry is compared absolutely; keeps the
/// ratio meaningful when both values are at the finite-difference noise level.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Deliberate defects, used to confirm the checker catches broken gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of the convolution input gradient.
    ConvBackwardSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    TransposedConv,
    BatchNorm,
    Relu,
    MaxPool,
    SoftmaxCrossEntropy,
    SegmentationLoss,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv,
        LayerKind::TransposedConv,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::SoftmaxCrossEntropy,
        LayerKind::SegmentationLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::TransposedConv => "tconv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::SoftmaxCrossEntropy => "softmax_ce",
            LayerKind::SegmentationLoss => "seg_loss",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Default, Clone)]
struct Tally {
    entries: usize,
    max_rel: f64,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        self.entries += 1;
        let e = relative_error(analytic, numeric);
        // NaN must fail loudly.
        if e.is_nan() || e > self.max_rel {
            self.max_rel = if e.is_nan() { f64::INFINITY } else { e };
        }
    }

    fn merge(&mut self, other: &Tally) {
        self.entries += other.entries;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, at: f64) -> Result<f64> {
    let plus = f(at + FD_STEP)?;
    let minus = f(at - FD_STEP)?;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Checks every entry of `values` against `analytic` using `eval`, which
/// receives the perturbed buffer.
fn check_buffer(
    values: &[f64],
    analytic: &[f64],
    tally: &mut Tally,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<()> {
    let mut buf = values.to_vec();
    for i in 0..buf.len() {
        let orig = buf[i];
        let numeric = central_difference(
            |v| {
                buf[i] = v;
                eval(&buf)
            },
            orig,
        )?;
        buf[i] = orig;
        tally.add(analytic[i], numeric);
    }
    Ok(())
}

fn random_tensor(shape: [usize; 4], rng: &mut Rng) -> Result<Tensor> {
    gaussian_fill(shape, 0.0, 1.0, rng)
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::from_vec(t.shape(), data.to_vec()).expect("same shape")
}

fn check_conv(rng: &mut Rng, fault: Fault) -> Result<Tally> {
    let n = 1 + rng.below(2);
    let cin = 1 + rng.below(3);
    let cout = 1 + rng.below(3);
    let k = 1 + rng.below(3);
    let stride = 1 + rng.below(2);
    let pad = rng.below(2);
    let size = k + 2 + rng.below(4);
    let x = random_tensor([n, cin, size, size], rng)?;
    let mut p = ConvParams::new(cin, cout, k, stride, pad, 0.5, 0.0, rng)?;
    p.bias.value.iter_mut().for_each(|b| *b = rng.gaussian());

    let (y, cache) = conv_forward(&x, &p)?;
    let r = random_tensor(y.shape(), rng)?;
    let mut dx = conv_backward(&r, &cache, &mut p)?;
    if fault == Fault::ConvBackwardSign {
        dx = dx.scale(-1.0);
    }
    let mut tally = Tally::default();
    let loss = |x: &Tensor, p: &ConvParams| -> Result<f64> { inner_product(&conv_forward(x, p)?.0, &r) };
    check_buffer(x.data(), dx.data(), &mut tally, |d| loss(&with_data(&x, d), &p))?;
    let mut q = p.clone();
    check_buffer(&p.weight.value, &p.weight.grad, &mut tally, |d| {
        q.weight.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    let mut q = p.clone();
    check_buffer(&p.bias.value, &p.bias.grad, &mut tally, |d| {
        q.bias.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    Ok(tally)
}

fn check_tconv(rng: &mut Rng) -> Result<Tally> {
    let n = 1 + rng.below(2);
    let cin = 1 + rng.below(3);
    let cout = 1 + rng.below(3);
    let stride = 1 + rng.below(2);
    let k = stride + rng.below(2);
    let size = 2 + rng.below(3);
    let x = random_tensor([n, cin, size, size], rng)?;
    let mut p = TransposedConvParams::new(cin, cout, k, stride, 0, 0.5, 0.0, rng)?;
    p.bias.value.iter_mut().for_each(|b| *b = rng.gaussian());
    let (y, cache) = tconv_forward(&x, &p)?;
    let r = random_tensor(y.shape(), rng)?;
    let dx = tconv_backward(&r, &cache, &mut p)?;
    let mut tally = Tally::default();
    let loss = |x: &Tensor, p: &TransposedConvParams| -> Result<f64> {
        inner_product(&tconv_forward(x, p)?.0, &r)
    };
    check_buffer(x.data(), dx.data(), &mut tally, |d| loss(&with_data(&x, d), &p))?;
    let mut q = p.clone();
    check_buffer(&p.weight.value, &p.weight.grad, &mut tally, |d| {
        q.weight.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    let mut q = p.clone();
    check_buffer(&p.bias.value, &p.bias.grad, &mut tally, |d| {
        q.bias.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    Ok(tally)
}

fn check_bn(rng: &mut Rng) -> Result<Tally> {
    let n = 1 + rng.below(3);
    let c = 1 + rng.below(3);
    let h = 1 + rng.below(3);
    let w = 2 + rng.below(3);
    let x = random_tensor([n, c, h, w], rng)?;
    let mut p = BnParams::new(c);
    p.gamma.value.iter_mut().for_each(|g| *g = 0.5 + rng.uniform());
    p.beta.value.iter_mut().for_each(|b| *b = rng.gaussian());
    let (y, cache) = bn_forward(&x, &mut p, Mode::Train)?;
    let r = random_tensor(y.shape(), rng)?;
    let dx = bn_backward(&r, &cache, &mut p)?;
    let mut tally = Tally::default();
    let loss = |x: &Tensor, p: &BnParams| -> Result<f64> {
        let mut q = p.clone();
        inner_product(&bn_forward(x, &mut q, Mode::Train)?.0, &r)
    };
    check_buffer(x.data(), dx.data(), &mut tally, |d| loss(&with_data(&x, d), &p))?;
    let mut q = p.clone();
    check_buffer(&p.gamma.value, &p.gamma.grad, &mut tally, |d| {
        q.gamma.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    let mut q = p.clone();
    check_buffer(&p.beta.value, &p.beta.grad, &mut tally, |d| {
        q.beta.value.copy_from_slice(d);
        loss(&x, &q)
    })?;
    Ok(tally)
}

fn check_relu(rng: &mut Rng) -> Result<Tally> {
    let shape = [1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4)];
    // Stay away from the kink, where the derivative is undefined.
    let mut x = random_tensor(shape, rng)?;
    for v in x.data_mut() {
        while v.abs() <= 1e-3 {
            *v = rng.gaussian();
        }
    }
    let (y, cache) = relu_forward(&x);
    let r = random_tensor(y.shape(), rng)?;
    let dx = relu_backward(&r, &cache)?;
    let mut tally = Tally::default();
    check_buffer(x.data(), dx.data(), &mut tally, |d| {
        inner_product(&relu_forward(&with_data(&x, d)).0, &r)
    })?;
    Ok(tally)
}

fn check_maxpool(rng: &mut Rng) -> Result<Tally> {
    let shape = [1 + rng.below(2), 1 + rng.below(3), 2 * (1 + rng.below(3)), 2 * (1 + rng.below(3))];
    let len: usize = shape.iter().product();
    // Distinct values spaced far beyond the finite-difference step.
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    rng.shuffle(&mut vals);
    let x = Tensor::from_vec(shape, vals)?;
    let (y, idx) = maxpool_forward(&x)?;
    let r = random_tensor(y.shape(), rng)?;
    let dx = maxpool_backward(&r, &idx)?;
    let mut tally = Tally::default();
    check_buffer(x.data(), dx.data(), &mut tally, |d| {
        inner_product(&maxpool_forward(&with_data(&x, d))?.0, &r)
    })?;
    Ok(tally)
}

fn probs_from_logits(logits: &Tensor) -> Result<Tensor> {
    let mut probs = Tensor::zeros(logits.shape());
    for b in 0..logits.n() {
        probs.sample_mut(b).copy_from_slice(&softmax(logits.sample(b))?);
    }
    Ok(probs)
}

fn check_softmax_ce(rng: &mut Rng) -> Result<Tally> {
    let n = 1 + rng.below(4);
    let c = 2 + rng.below(9);
    let logits = gaussian_fill([n, c, 1, 1], 0.0, 2.0, rng)?;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let (_, grad) = recognition_loss(&probs_from_logits(&logits)?, &labels)?;
    let mut tally = Tally::default();
    check_buffer(logits.data(), grad.data(), &mut tally, |d| {
        Ok(recognition_loss(&probs_from_logits(&with_data(&logits, d))?, &labels)?.0)
    })?;
    Ok(tally)
}

fn check_seg_loss(rng: &mut Rng) -> Result<Tally> {
    let n = 1 + rng.below(2);
    let v = 2 + rng.below(3);
    let h = 1 + rng.below(4);
    let w = 1 + rng.below(4);
    let logits = gaussian_fill([n, v, h, w], 0.0, 2.0, rng)?;
    let masks: Vec<u8> = (0..n * h * w).map(|_| rng.below(v) as u8).collect();
    let (_, grad) = segmentation_loss(&logits, &masks)?;
    let mut tally = Tally::default();
    check_buffer(logits.data(), grad.data(), &mut tally, |d| {
        Ok(segmentation_loss(&with_data(&logits, d), &masks)?.0)
    })?;
    Ok(tally)
}

/// Runs `instances` random draws of one layer type.
pub fn check_layer(kind: LayerKind, instances: usize, seed: u64, fault: Fault) -> Result<CheckResult> {
    let mut total = Tally::default();
    for i in 0..instances {
        let mut rng = Rng::derive(seed, i as u64 * 16 + kind as u64);
        let t = match kind {
            LayerKind::Conv => check_conv(&mut rng, fault)?,
            LayerKind::TransposedConv => check_tconv(&mut rng)?,
            LayerKind::BatchNorm => check_bn(&mut rng)?,
            LayerKind::Relu => check_relu(&mut rng)?,
            LayerKind::MaxPool => check_maxpool(&mut rng)?,
            LayerKind::SoftmaxCrossEntropy => check_softmax_ce(&mut rng)?,
            LayerKind::SegmentationLoss => check_seg_loss(&mut rng)?,
        };
        total.merge(&t);
    }
    Ok(CheckResult {
        name: kind.name().to_string(),
        instances,
        entries: total.entries,
        max_rel_error: total.max_rel,
        passed: total.max_rel < REL_TOLERANCE,
    })
}

/// Miniature topology used for the whole-network check.
pub fn miniature_config() -> NetworkConfig {
    NetworkConfig {
        input_size: [16, 16],
        num_classes: 3,
        num_seg_classes: 2,
        encoder_channels: [4, 8, 8],
        recognition_channels: 8,
        ..NetworkConfig::default()
    }
}

/// Joint-loss gradient of every network parameter against finite differences.
///
/// Kernels are drawn with a larger spread than the training init so that the
/// signal survives the depth and the check is not dominated by round-off.
pub fn check_network(config: &NetworkConfig, batch: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = Rng::new(seed);
    let mut net = MtlNetwork::build(config, &mut rng)?;
    for (_, p) in net.params_mut() {
        for v in p.value.iter_mut() {
            *v = 0.3 * rng.gaussian();
        }
    }
    let [h, w] = config.input_size;
    let x = gaussian_fill([batch, 1, h, w], 0.0, 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(config.num_classes)).collect();
    let masks: Vec<u8> = (0..batch * h * w)
        .map(|_| rng.below(config.num_seg_classes) as u8)
        .collect();
    let (lr, ls) = (config.lambda_rec, config.lambda_seg);

    let loss_of = |net: &mut MtlNetwork| -> Result<f64> {
        let out = net.forward(&x, Mode::Train)?;
        let (l_rec, _) = recognition_loss(&out.class_probs, &labels)?;
        let (l_seg, _) = segmentation_loss(&out.seg_logits, &masks)?;
        Ok(lr * l_rec + ls * l_seg)
    };

    let out = net.forward(&x, Mode::Train)?;
    let (_, g_rec) = recognition_loss(&out.class_probs, &labels)?;
    let (_, g_seg) = segmentation_loss(&out.seg_logits, &masks)?;
    net.backward(&out.cache, Some(&g_rec.scale(lr)), Some(&g_seg.scale(ls)))?;

    let analytic: Vec<Vec<f64>> = net.params().into_iter().map(|(_, p)| p.grad.clone()).collect();
    let mut tally = Tally::default();
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = param_at(&mut net, pi).value[i];
            let mut eval = |v: f64| -> Result<f64> {
                param_at(&mut net, pi).value[i] = v;
                loss_of(&mut net)
            };
            let plus = eval(orig + FD_STEP)?;
            let minus = eval(orig - FD_STEP)?;
            param_at(&mut net, pi).value[i] = orig;
            tally.add(a, (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(CheckResult {
        name: "network".into(),
        instances: 1,
        entries: tally.entries,
        max_rel_error: tally.max_rel,
        passed: tally.max_rel < REL_TOLERANCE,
    })
}

fn param_at(net: &mut MtlNetwork, index: usize) -> &mut Param {
    net.params_mut().swap_remove(index).1
}

/// Full suite: every layer type plus the miniature whole network.
pub fn run_suite(instances: usize, seed: u64, fault: Fault, include_network: bool) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for kind in LayerKind::ALL {
        results.push(check_layer(kind, instances, seed, fault)?);
    }
    if include_network {
        results.push(check_network(&miniature_config(), 2, seed)?);
    }
    Ok(results)
}
