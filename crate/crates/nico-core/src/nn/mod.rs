//! Minimal differentiable numeric layer.
//!
//! Exactly the operations the policy network and trainer need: dense linear
//! maps, ReLU feed-forward blocks, RMS/Layer normalization, (masked)
//! softmax, multi-head self-attention, the AdamW update, and a
//! finite-difference gradient checker.  Every backward pass is hand-written
//! for the fixed policy graph; the gradient checker is the contract that
//! keeps them honest.
//!
//! All math runs in double precision.

pub mod attention;
pub mod checkpoint;
pub mod ffn;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod softmax;

pub use attention::{MhaCache, MultiHeadAttention};
pub use ffn::{FeedForward, FfnCache};
pub use gradcheck::{gradient_check, GradCheckBlock, GradCheckReport};
pub use linear::Linear;
pub use norm::{norm_backward, norm_forward, NormCache, NormKind};
pub use optim::{AdamW, OptimizerConfig, StepOutcome};
pub use softmax::{
    masked_log_softmax, masked_log_softmax_backward, softmax_rows, softmax_rows_backward,
};

use ndarray::Array2;
use rand::Rng;

/// A trainable tensor with its gradient accumulator and Adam moments.
///
/// Vectors (biases, the cycle-mix gate) are stored as 1×k matrices so every
/// parameter moves through the optimizer and checkpoint code identically.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub moment1: Array2<f64>,
    pub moment2: Array2<f64>,
}

impl Parameter {
    /// Uniform(−1/√fan_in, +1/√fan_in) initialization, fan_in = rows.
    pub fn uniform(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (rows as f64).sqrt();
        let value =
            Array2::from_shape_fn((rows, cols), |_| bound * (2.0 * rng.random::<f64>() - 1.0));
        Self::from_value(name, value)
    }

    pub fn constant(name: impl Into<String>, rows: usize, cols: usize, fill: f64) -> Self {
        Self::from_value(name, Array2::from_elem((rows, cols), fill))
    }

    pub fn from_value(name: impl Into<String>, value: Array2<f64>) -> Self {
        let shape = value.raw_dim();
        Self {
            name: name.into(),
            value,
            grad: Array2::zeros(shape),
            moment1: Array2::zeros(shape),
            moment2: Array2::zeros(shape),
        }
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters: layers, blocks, the whole policy.
///
/// The returned order must be stable across calls; the optimizer, the
/// gradient checker, and the checkpoint layout all rely on it.
pub trait ParamModule {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Relative error used by tests and the gradient checker: symmetric, and
/// effectively absolute below 1e-6 magnitudes.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
