//! Multi-head self-attention without positional encodings.

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};

use super::{softmax_rows, softmax_rows_backward, Parameter, ParamModule};

/// Standard scaled-dot-product self-attention over all tokens, per-head
/// width D/heads, with an output projection back to D.  No biases.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    heads: usize,
}

/// Forward activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct MhaCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, each n×n.
    attn: Vec<Array2<f64>>,
    /// Concatenated per-head outputs before the output projection.
    concat: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Parameter::uniform(format!("{name}.wq"), dim, dim, rng),
            wk: Parameter::uniform(format!("{name}.wk"), dim, dim, rng),
            wv: Parameter::uniform(format!("{name}.wv"), dim, dim, rng),
            wo: Parameter::uniform(format!("{name}.wo"), dim, dim, rng),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MhaCache) {
        let (n, d) = x.dim();
        debug_assert_eq!(d, self.wq.rows());
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = x.dot(&self.wq.value);
        let k = x.dot(&self.wk.value);
        let v = x.dot(&self.wv.value);

        let mut concat = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()) * scale;
            let probs = softmax_rows(&scores);
            let oh = probs.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            attn.push(probs);
        }
        let y = concat.dot(&self.wo.value);
        let cache = MhaCache { x: x.clone(), q, k, v, attn, concat };
        (y, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &MhaCache, dy: &Array2<f64>) -> Array2<f64> {
        let (n, d) = cache.x.dim();
        debug_assert_eq!(dy.dim(), (n, d));
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        self.wo.grad += &cache.concat.t().dot(dy);
        let dconcat = dy.dot(&self.wo.value.t());

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let probs = &cache.attn[h];
            let vh = cache.v.slice(cols);
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let doh = dconcat.slice(cols);

            let dprobs = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&probs.t().dot(&doh));
            let dscores = softmax_rows_backward(probs, &dprobs) * scale;
            dq.slice_mut(cols).assign(&dscores.dot(&kh));
            dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
        }

        self.wq.grad += &cache.x.t().dot(&dq);
        self.wk.grad += &cache.x.t().dot(&dk);
        self.wv.grad += &cache.x.t().dot(&dv);

        dq.dot(&self.wq.value.t()) + dk.dot(&self.wk.value.t()) + dv.dot(&self.wv.value.t())
    }
}

impl ParamModule for MultiHeadAttention {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::gradient_check;
    use crate::nn::rel_err;
    use crate::rng::rng_from;

    #[test]
    fn rejects_indivisible_width() {
        let mut rng = rng_from(&[20]);
        assert!(matches!(
            MultiHeadAttention::new("a", 10, 4, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(MultiHeadAttention::new("a", 12, 4, &mut rng).is_ok());
    }

    #[test]
    fn single_token_is_its_own_value() {
        let mut rng = rng_from(&[21]);
        let mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let x = Array2::from_shape_fn((1, 8), |_| rng.random::<f64>() - 0.5);
        let (y, cache) = mha.forward(&x);
        for probs in &cache.attn {
            assert!((probs[[0, 0]] - 1.0).abs() < 1e-12);
        }
        let expected = x.dot(&mha.wv.value).dot(&mha.wo.value);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = rng_from(&[22]);
        let mha = MultiHeadAttention::new("a", 16, 4, &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 16), |_| rng.random::<f64>() - 0.5);
        let (y, _) = mha.forward(&x);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Array2::from_shape_fn((6, 16), |(r, c)| x[[perm[r], c]]);
        let (yp, _) = mha.forward(&xp);
        for r in 0..6 {
            for c in 0..16 {
                assert!((yp[[r, c]] - y[[perm[r], c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = rng_from(&[23, seed]);
            let mut mha = MultiHeadAttention::new("a", 16, 4, &mut rng).unwrap();
            let x = Array2::from_shape_fn((6, 16), |_| rng.random::<f64>() - 0.5);
            let w = Array2::from_shape_fn((6, 16), |_| rng.random::<f64>() - 0.5);
            let report = gradient_check(
                &mut mha,
                |m, with_grad| {
                    let (y, cache) = m.forward(&x);
                    let loss = (&y * &w).sum();
                    if with_grad {
                        m.backward(&cache, &w);
                    }
                    loss
                },
                1e-4,
                1e-4,
            );
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = rng_from(&[24]);
        let mut mha = MultiHeadAttention::new("a", 8, 2, &mut rng).unwrap();
        let mut x = Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() - 0.5);
        let w = Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() - 0.5);
        let (_, cache) = mha.forward(&x);
        let dx = mha.backward(&cache, &w);
        let h = 1e-4;
        for r in 0..4 {
            for c in 0..8 {
                let orig = x[[r, c]];
                x[[r, c]] = orig + h;
                let up = (&mha.forward(&x).0 * &w).sum();
                x[[r, c]] = orig - h;
                let down = (&mha.forward(&x).0 * &w).sum();
                x[[r, c]] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(dx[[r, c]], fd) < 1e-4);
            }
        }
    }
}
