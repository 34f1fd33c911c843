//! Central finite differences, the independent oracle the gradient engine is
//! checked against.

use super::Tensor;
use crate::error::Result;
use alloc::vec::Vec;

/// Component-wise central-difference estimate of `∂f/∂x`.
pub fn finite_difference_oracle<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_parts(x.shape().to_vec(), plus))?;
        let fm = f(&Tensor::from_parts(x.shape().to_vec(), minus))?;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}
