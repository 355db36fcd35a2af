//! Row-wise normalization without learned gain.
//!
//! RMS normalization is the default; plain layer normalization exists as an
//! ablation variant.  Neither carries learnable scale or shift.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Rms,
    Layer,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    kind: NormKind,
    x: Array2<f64>,
    /// Per row: the RMS denominator, or σ for layer norm.
    denom: Vec<f64>,
    /// Per row mean; zeros for RMS.
    mean: Vec<f64>,
}

/// Normalize each row of `x` independently.
pub fn norm_forward(kind: NormKind, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let (n, d) = x.dim();
    let mut y = x.clone();
    let mut denom = Vec::with_capacity(n);
    let mut mean = vec![0.0; n];
    match kind {
        NormKind::Rms => {
            for (r, mut row) in y.rows_mut().into_iter().enumerate() {
                let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / d as f64;
                let rms = (ms + NORM_EPS).sqrt();
                row.mapv_inplace(|v| v / rms);
                denom.push(rms);
            }
        }
        NormKind::Layer => {
            for (r, mut row) in y.rows_mut().into_iter().enumerate() {
                let mu = x.row(r).sum() / d as f64;
                let var = x.row(r).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                let sigma = (var + NORM_EPS).sqrt();
                row.mapv_inplace(|v| (v - mu) / sigma);
                denom.push(sigma);
                mean[r] = mu;
            }
        }
    }
    let cache = NormCache { kind, x: x.clone(), denom, mean };
    (y, cache)
}

pub fn norm_backward(cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let (n, d) = cache.x.dim();
    debug_assert_eq!(dy.dim(), (n, d));
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let x = cache.x.row(r);
        let g = dy.row(r);
        match cache.kind {
            NormKind::Rms => {
                // y = x / rms;  dx = g/rms − x · ⟨g, x⟩ / (d · rms³)
                let rms = cache.denom[r];
                let dot: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                let scale = dot / (d as f64 * rms * rms * rms);
                for c in 0..d {
                    dx[[r, c]] = g[c] / rms - x[c] * scale;
                }
            }
            NormKind::Layer => {
                // dx = (g − mean(g) − y · mean(g ⊙ y)) / σ
                let sigma = cache.denom[r];
                let mu = cache.mean[r];
                let g_mean = g.sum() / d as f64;
                let gy_mean: f64 = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gv, xv)| gv * (xv - mu) / sigma)
                    .sum::<f64>()
                    / d as f64;
                for c in 0..d {
                    let y = (x[c] - mu) / sigma;
                    dx[[r, c]] = (g[c] - g_mean - y * gy_mean) / sigma;
                }
            }
        }
    }
    dx
}
