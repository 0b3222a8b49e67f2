//! Minimal reverse-mode differentiation engine.
//!
//! Provides exactly the operations the segmentation network and its losses
//! need: dense tensors, a recording tape with a reverse sweep, 2D
//! convolution, instance normalisation, pooling/upsampling/concatenation,
//! elementwise math, reductions, and a plain SGD parameter update. The
//! element type is chosen at compile time through [`Scalar`]: training runs
//! use `f32`, gradient verification runs the same code in `f64`.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Element type for tensors and tapes: `f32` or `f64`.
///
/// Reductions accumulate in f64 independent of the element type, so
/// switching precision changes storage and arithmetic width but not the
/// code path.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// In-place SGD update with decoupled-style L2 weight decay folded into the
/// gradient: `p <- p - lr * (g + weight_decay * p)`.
pub fn sgd_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    lr: S,
    weight_decay: S,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "sgd_step: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p = *p - lr * (g + weight_decay * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_applies_learning_rate_and_decay() {
        // Plain gradient step.
        let mut p = [1.0f64];
        sgd_step(&mut p, &[0.5], 0.1, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        // Pure weight decay: p - lr*wd*p = 2 - 0.1*0.5*2 = 1.9.
        let mut p = [2.0f64];
        sgd_step(&mut p, &[0.0], 0.1, 0.5).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_zero_gradient_zero_decay_is_bit_identical() {
        let orig: Vec<f32> = vec![0.123_456_7, -4.5e-3, 9.25, -0.0];
        let mut p = orig.clone();
        let g = vec![0.0f32; p.len()];
        sgd_step(&mut p, &g, 0.01, 0.0).unwrap();
        for (a, b) in p.iter().zip(&orig) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn sgd_step_rejects_length_mismatch() {
        let mut p = [1.0f32, 2.0];
        let err = sgd_step(&mut p, &[0.0], 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
