//! Per-channel batch normalization over `(batch, height, width)`.
//!
//! Running statistics are an exponential moving average of the batch
//! statistics, `r <- momentum * r + (1 - momentum) * batch`. The first
//! train-mode call seeds them with the batch statistics directly.

use super::{Mode, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
    pub momentum: f64,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            running_mean: None,
            running_var: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    mode: Mode,
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

pub fn bn_forward(x: &Tensor, p: &mut BnParams, mode: Mode) -> Result<(Tensor, BnCache)> {
    let ch = p.channels();
    if x.c() != ch {
        return Err(Error::shape("bn_forward channels", &[ch], &[x.c()]));
    }
    let n = x.n();
    let m = (n * x.h() * x.w()) as f64;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for c in 0..ch {
                let s: f64 = (0..n).map(|b| x.plane(b, c).iter().sum::<f64>()).sum();
                let mu = s / m;
                let ss: f64 = (0..n)
                    .map(|b| x.plane(b, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                    .sum();
                mean[c] = mu;
                var[c] = ss / m;
            }
            match (&mut p.running_mean, &mut p.running_var) {
                (Some(rm), Some(rv)) => {
                    for c in 0..ch {
                        rm[c] = p.momentum * rm[c] + (1.0 - p.momentum) * mean[c];
                        rv[c] = p.momentum * rv[c] + (1.0 - p.momentum) * var[c];
                    }
                }
                _ => {
                    p.running_mean = Some(mean.clone());
                    p.running_var = Some(var.clone());
                }
            }
            (mean, var)
        }
        Mode::Eval => match (&p.running_mean, &p.running_var) {
            (Some(rm), Some(rv)) => (rm.clone(), rv.clone()),
            _ => return Err(Error::UninitializedStatistics),
        },
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for c in 0..ch {
            let (mu, is) = (mean[c], inv_std[c]);
            let (g, bt) = (p.gamma.value[c], p.beta.value[c]);
            let src = x.plane(b, c);
            for (xh, v) in x_hat.plane_mut(b, c).iter_mut().zip(src) {
                *xh = (v - mu) * is;
            }
            for (yv, xh) in y.plane_mut(b, c).iter_mut().zip(x_hat.plane(b, c)) {
                *yv = g * xh + bt;
            }
        }
    }
    Ok((y, BnCache { mode, x_hat, inv_std }))
}

/// Exact gradient through the batch mean and variance in train mode:
/// `dx = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))`.
pub fn bn_backward(dy: &Tensor, cache: &BnCache, p: &mut BnParams) -> Result<Tensor> {
    if dy.shape() != cache.x_hat.shape() {
        return Err(Error::shape("bn_backward upstream gradient", &cache.x_hat.shape(), &dy.shape()));
    }
    let ch = p.channels();
    if cache.inv_std.len() != ch {
        return Err(Error::StaleCache("batch norm channel count changed since forward".into()));
    }
    let n = dy.n();
    let m = (n * dy.h() * dy.w()) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    for c in 0..ch {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..n {
            for (d, xh) in dy.plane(b, c).iter().zip(cache.x_hat.plane(b, c)) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        p.gamma.grad[c] += sum_dy_xhat;
        p.beta.grad[c] += sum_dy;
        let g = p.gamma.value[c];
        let is = cache.inv_std[c];
        match cache.mode {
            Mode::Train => {
                let scale = g * is / m;
                for b in 0..n {
                    let d = dy.plane(b, c);
                    let xh = cache.x_hat.plane(b, c);
                    for ((o, dv), xv) in dx.plane_mut(b, c).iter_mut().zip(d).zip(xh) {
                        *o = scale * (m * dv - sum_dy - xv * sum_dy_xhat);
                    }
                }
            }
            Mode::Eval => {
                for b in 0..n {
                    for (o, dv) in dx.plane_mut(b, c).iter_mut().zip(dy.plane(b, c)) {
                        *o = g * is * dv;
                    }
                }
            }
        }
    }
    Ok(dx)
}
