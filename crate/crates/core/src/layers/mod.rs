//! Layer primitives with hand-derived backward passes.
//!
//! Every layer is a pair of functions: `*_forward` returns the output plus a
//! cache, `*_backward` consumes the cache and the upstream gradient, returns
//! the gradient with respect to the input, and *accumulates* parameter
//! gradients into the layer's [`Param`] buffers. Nothing here divides by the
//! batch size; the loss gradients already carry that factor.

pub mod batchnorm;
pub mod conv;
pub mod im2col;
pub mod pool;
pub mod relu;
pub mod softmax;
pub mod tconv;

use serde::{Deserialize, Serialize};

pub use batchnorm::{bn_backward, bn_forward, BnCache, BnParams};
pub use conv::{conv_backward, conv_forward, ConvCache, ConvParams};
pub use pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool_backward, maxpool_forward,
    PoolIndices,
};
pub use relu::{relu_backward, relu_forward, ReluCache};
pub use softmax::softmax;
pub use tconv::{tconv_backward, tconv_forward, TConvCache, TransposedConvParams};

/// Whether batch normalization uses batch statistics (and updates its
/// running averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable array and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
