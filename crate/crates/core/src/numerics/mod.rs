//! Dense tensors, reverse-mode autodiff and finite-difference verification.

mod gradcheck;
pub mod kernels;
mod rng;
mod scalar;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use rng::{path_stream_id, RngStream};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("index {index} out of range for {op} (bound {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

/// Plain (untracked) matrix product.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

/// `logsumexp(logits) - logits[target]`, stabilized by max subtraction.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T, NumericsError> {
    if logits.len() < 2 {
        return Err(NumericsError::Shape(format!("cross-entropy needs V >= 2, got {}", logits.len())));
    }
    if target >= logits.len() {
        return Err(NumericsError::Index { op: "softmax_cross_entropy", index: target, bound: logits.len() });
    }
    Ok(kernels::log_sum_exp(logits) - logits[target])
}

/// Inverted dropout on a plain tensor; identity when `training` is false.
pub fn dropout<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Tensor<T>, NumericsError> {
    tape::check_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = tape::dropout_mask::<T>(x.numel(), p, rng);
    let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests;
