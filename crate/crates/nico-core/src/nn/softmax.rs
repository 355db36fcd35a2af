//! Row softmax and the globally masked log-softmax.
//!
//! Masking is additive: masked cells get −1e30 before the max-shifted
//! exponentiation (which underflows them to exactly zero mass), and their
//! final log-probabilities are pinned to −∞ so downstream code can rely on
//! masked probability being exactly 0.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Additive pre-softmax penalty for masked cells.
pub const MASK_PENALTY: f64 = -1e30;

/// Standard row-wise softmax with max-shift.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// VJP of `softmax_rows`: dx = p ⊙ (dp − Σ_row dp ⊙ p).
pub fn softmax_rows_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(probs.raw_dim());
    for r in 0..probs.nrows() {
        let p = probs.row(r);
        let g = dprobs.row(r);
        let inner: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for c in 0..probs.ncols() {
            dx[[r, c]] = p[c] * (g[c] - inner);
        }
    }
    dx
}

/// Log-probabilities of a single distribution over the LIVE cells of a
/// matrix.  Masked cells come back as −∞.
///
/// Unlike `softmax_rows`, normalization is global: one distribution over
/// every live cell of the whole matrix.
pub fn masked_log_softmax(values: &Array2<f64>, mask: &Array2<bool>) -> Result<Array2<f64>> {
    debug_assert_eq!(values.dim(), mask.dim());
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoFeasibleAction);
    }
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in values.iter().zip(mask.iter()) {
        let w = if m { *v } else { MASK_PENALTY };
        if w > max {
            max = w;
        }
    }
    let mut sum = 0.0;
    for (v, &m) in values.iter().zip(mask.iter()) {
        let w = if m { *v } else { MASK_PENALTY };
        sum += (w - max).exp();
    }
    let lse = max + sum.ln();
    let mut out = Array2::from_elem(values.raw_dim(), f64::NEG_INFINITY);
    for ((o, v), &m) in out.iter_mut().zip(values.iter()).zip(mask.iter()) {
        if m {
            *o = *v - lse;
        }
    }
    Ok(out)
}

/// VJP of `masked_log_softmax` with respect to the raw values:
/// dv = g − p · Σ_live g on live cells, 0 on masked cells.
pub fn masked_log_softmax_backward(
    log_probs: &Array2<f64>,
    mask: &Array2<bool>,
    upstream: &Array2<f64>,
) -> Array2<f64> {
    let total: f64 = upstream
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(g, _)| *g)
        .sum();
    let mut dv = Array2::zeros(log_probs.raw_dim());
    for ((d, (&lp, &g)), &m) in dv
        .iter_mut()
        .zip(log_probs.iter().zip(upstream.iter()))
        .zip(mask.iter())
    {
        if m {
            *d = g - lp.exp() * total;
        }
    }
    dv
}
