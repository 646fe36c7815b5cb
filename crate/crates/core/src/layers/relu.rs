use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    (x.map(|v| if v > 0.0 { v } else { 0.0 }), ReluCache { input: x.clone() })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(dy: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    if dy.shape() != cache.input.shape() {
        return Err(Error::shape("relu_backward", &cache.input.shape(), &dy.shape()));
    }
    let data = dy
        .data()
        .iter()
        .zip(cache.input.data())
        .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(dy.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_definition() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-3.0, 5.0, 0.0]).unwrap();
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 5.0, 0.0]);
        let dx = relu_backward(&Tensor::full([1, 1, 1, 3], 2.0), &cache).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn all_negative_input() {
        let x = Tensor::full([2, 2, 2, 2], -0.5);
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(relu_backward(&Tensor::full(x.shape(), 1.0), &cache).unwrap().max_abs(), 0.0);
    }
}
