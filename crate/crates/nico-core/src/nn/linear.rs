//! Dense linear map with optional bias.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

use super::{Parameter, ParamModule};

/// y = xW (+ b).  W is in_dim×out_dim; b, when present, is 1×out_dim and
/// initialized to zero.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

impl Linear {
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Parameter::uniform(format!("{name}.w"), in_dim, out_dim, rng),
            b: bias.then(|| Parameter::constant(format!("{name}.b"), 1, out_dim, 0.0)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.w.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: self.w.value.shape().to_vec(),
            });
        }
        let mut y = x.dot(&self.w.value);
        if let Some(b) = &self.b {
            y += &b.value;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.nrows(), dy.nrows());
        debug_assert_eq!(dy.ncols(), self.w.cols());
        self.w.grad += &x.t().dot(dy);
        if let Some(b) = &mut self.b {
            b.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.w.value.t())
    }
}

impl ParamModule for Linear {
    fn params(&self) -> Vec<&Parameter> {
        match &self.b {
            Some(b) => vec![&self.w, b],
            None => vec![&self.w],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match &mut self.b {
            Some(b) => vec![&mut self.w, b],
            None => vec![&mut self.w],
        }
    }
}
