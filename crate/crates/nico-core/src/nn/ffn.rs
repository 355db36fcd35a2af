//! Per-token two-layer feed-forward block: W₂·ReLU(W₁·h), no biases.

use ndarray::Array2;
use rand::Rng;

use super::{Parameter, ParamModule};

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Parameter,
    pub w2: Parameter,
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Array2<f64>,
    /// Pre-activation x·W₁; the ReLU gate is recovered from its sign.
    pre: Array2<f64>,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: Parameter::uniform(format!("{name}.w1"), dim, hidden, rng),
            w2: Parameter::uniform(format!("{name}.w2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let pre = x.dot(&self.w1.value);
        let hidden = pre.mapv(|v| v.max(0.0));
        let y = hidden.dot(&self.w2.value);
        (y, FfnCache { x: x.clone(), pre })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &FfnCache, dy: &Array2<f64>) -> Array2<f64> {
        let hidden = cache.pre.mapv(|v| v.max(0.0));
        self.w2.grad += &hidden.t().dot(dy);
        let mut dpre = dy.dot(&self.w2.value.t());
        dpre.zip_mut_with(&cache.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        self.w1.grad += &cache.x.t().dot(&dpre);
        dpre.dot(&self.w1.value.t())
    }
}

impl ParamModule for FeedForward {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.w2]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w1, &mut self.w2]
    }
}
