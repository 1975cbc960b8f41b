//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation executed during a forward pass. Each
//! recorded node keeps its value, its parents and enough information to
//! apply its backward rule. [`Tape::backward`] walks the record in reverse
//! execution order and accumulates gradients on every node that requires
//! one.
//!
//! The tape is rebuilt for every forward pass: parameters live outside the
//! tape as plain [`Tensor`]s and are registered with [`Tape::param`] each
//! time. Gradients on leaves accumulate across repeated `backward` calls
//! until [`Tape::zero_grad`] is called; gradients on intermediate nodes are
//! recomputed from scratch on every call.
//!
//! Broadcasting is limited to a single-element tensor combined with a tensor
//! of any shape. Everything else (bias rows, channel biases) goes through
//! explicit operations such as [`Tape::add_bias`].

mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Huber loss `x²/2` inside `[-delta, delta]`, `delta(|x| - delta/2)` outside.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]. At the kink the quadratic branch is used.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests;
