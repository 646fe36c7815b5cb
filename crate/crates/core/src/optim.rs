//! Plain SGD with step-decayed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MtlNetwork;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub initial_lr: f64,
    pub decay: f64,
    pub period: usize,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl SgdState {
    pub fn new(initial_lr: f64, decay: f64, period: usize) -> Self {
        Self {
            initial_lr,
            decay,
            period: period.max(1),
            epoch: 0,
        }
    }

    /// `lr0 * decay^floor(epoch / period)`, by repeated multiplication so
    /// that 0.001 decays to exactly 1e-4 and 1e-5.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        (0..epoch / self.period).fold(self.initial_lr, |lr, _| lr * self.decay)
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.epoch)
    }
}

/// `w <- w - lr * g` for one flat parameter array.
pub fn sgd_step(values: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if values.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[values.len()], &[grads.len()]));
    }
    for (w, g) in values.iter_mut().zip(grads) {
        *w -= lr * g;
    }
    Ok(())
}

/// Applies one SGD update to every learnable tensor of the network,
/// including batch-norm scale and shift.
pub fn apply_sgd(net: &mut MtlNetwork, lr: f64) -> Result<()> {
    for (_, p) in net.params_mut() {
        sgd_step(&mut p.value, &p.grad, lr)?;
    }
    net.bump_version();
    Ok(())
}
