//! Per-edge token features and the executed-move history buffer.
//!
//! Every tour position k yields one directed edge e_k = (π[k] → π[k+1])
//! (cyclic wrap) and one 14-column feature row.  Featurization is
//! parameter-free; learned embeddings live in the policy.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tsp::{Instance, Tour, TwoOptMove};

/// Raw feature column count.
pub const FEATURE_COLS: usize = 14;

/// Denominator guard used for every normalization in this module.
pub const FEATURE_EPS: f64 = 1e-6;

/// Column indices into an [`EdgeFeatureMatrix`] row.
pub mod col {
    /// Tail coordinates x_{u_k}.
    pub const UX: usize = 0;
    pub const UY: usize = 1;
    /// Head coordinates x_{v_k}.
    pub const VX: usize = 2;
    pub const VY: usize = 3;
    /// Edge length d_k.
    pub const LEN: usize = 4;
    /// Unit direction Δ̂_k (zero vector for a degenerate edge).
    pub const DIR_X: usize = 5;
    pub const DIR_Y: usize = 6;
    /// Turn angle at the tail: incoming segment vs this edge.
    pub const COS_U: usize = 7;
    pub const SIN_U: usize = 8;
    /// Turn angle at the head: this edge vs outgoing segment.
    pub const COS_V: usize = 9;
    pub const SIN_V: usize = 10;
    /// d_k relative to the mean of its two neighboring edge lengths.
    pub const REL_LEN: usize = 11;
    /// Per-instance z-score of d_k (population standard deviation).
    pub const Z: usize = 12;
    /// Frequency of position k among recent move endpoints.
    pub const HIST: usize = 13;
}

/// n×14 matrix of raw edge-token features, one row per tour edge.
#[derive(Debug, Clone)]
pub struct EdgeFeatureMatrix {
    data: Array2<f64>,
}

impl EdgeFeatureMatrix {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn get(&self, row: usize, column: usize) -> f64 {
        self.data[[row, column]]
    }
}

/// FIFO buffer of the most recently executed moves, in tour-position space.
///
/// Positions are NOT remapped when later reversals reorder the tour; entries
/// record where a move was applied, not which cities it touched.  A fresh
/// buffer holds no valid entries (the all-padding state), and pushes beyond
/// capacity evict the oldest entry.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    entries: VecDeque<TwoOptMove>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, mv: TwoOptMove) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(mv);
    }

    /// Valid entries, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = TwoOptMove> + '_ {
        self.entries.iter().copied()
    }

    /// The last `window` entries, oldest first.
    pub fn recent(&self, window: usize) -> impl Iterator<Item = TwoOptMove> + '_ {
        let skip = self.entries.len().saturating_sub(window);
        self.entries.iter().skip(skip).copied()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Per-position endpoint frequency: occurrences of position k among all
    /// valid endpoints, divided by the number of valid endpoints.  All zeros
    /// when the buffer is empty.
    pub fn endpoint_frequency(&self, n: usize) -> Vec<f64> {
        let mut freq = vec![0.0; n];
        if self.entries.is_empty() {
            return freq;
        }
        let mut counts = vec![0usize; n];
        let mut total = 0usize;
        for mv in &self.entries {
            for p in [mv.i, mv.j] {
                if p < n {
                    counts[p] += 1;
                }
                total += 1;
            }
        }
        for k in 0..n {
            freq[k] = counts[k] as f64 / total as f64;
        }
        freq
    }
}

/// Directed edges (u_k, v_k) = (π[k], π[k+1]) with cyclic wrap; length n.
pub fn edge_sequence(tour: &Tour) -> Vec<(usize, usize)> {
    let order = tour.as_slice();
    let n = order.len();
    (0..n).map(|k| (order[k], order[(k + 1) % n])).collect()
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// cos/sin of the turn from segment `p` into segment `q`, guarded so that
/// degenerate segments produce zeros instead of NaN.
#[inline]
fn turn(p: [f64; 2], p_len: f64, q: [f64; 2], q_len: f64) -> (f64, f64) {
    let denom = (p_len * q_len).max(FEATURE_EPS);
    let cos = (p[0] * q[0] + p[1] * q[1]) / denom;
    let sin = (p[0] * q[1] - p[1] * q[0]) / denom;
    (cos, sin)
}

/// Build the full n×14 feature matrix for one state.
pub fn compute_features(
    instance: &Instance,
    tour: &Tour,
    history: &HistoryBuffer,
) -> Result<EdgeFeatureMatrix> {
    let n = instance.n();
    if tour.len() != n {
        return Err(Error::InvalidInput(format!(
            "tour has {} positions but instance `{}` has {} cities",
            tour.len(),
            instance.id(),
            n
        )));
    }
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "edge features need n >= 4, got {n}"
        )));
    }
    let order = tour.as_slice();

    // Edge lengths first; the turn and neighbor normalizations reuse them.
    let lens: Vec<f64> = (0..n)
        .map(|k| instance.dist(order[k], order[(k + 1) % n]))
        .collect();
    let mean = lens.iter().sum::<f64>() / n as f64;
    let var = lens.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();

    let hist = history.endpoint_frequency(n);

    let mut data = Array2::zeros((n, FEATURE_COLS));
    for k in 0..n {
        let w = instance.coord(order[(k + n - 1) % n]);
        let u = instance.coord(order[k]);
        let v = instance.coord(order[(k + 1) % n]);
        let s = instance.coord(order[(k + 2) % n]);

        let a = sub(u, w);
        let b = sub(v, u);
        let c = sub(s, v);
        let d_prev = lens[(k + n - 1) % n];
        let d_k = lens[k];
        let d_next = lens[(k + 1) % n];
        debug_assert!((norm(a) - d_prev).abs() < 1e-12);

        let mut row = data.row_mut(k);
        row[col::UX] = u[0];
        row[col::UY] = u[1];
        row[col::VX] = v[0];
        row[col::VY] = v[1];
        row[col::LEN] = d_k;
        let inv = 1.0 / d_k.max(FEATURE_EPS);
        row[col::DIR_X] = b[0] * inv;
        row[col::DIR_Y] = b[1] * inv;
        let (cos_u, sin_u) = turn(a, d_prev, b, d_k);
        row[col::COS_U] = cos_u;
        row[col::SIN_U] = sin_u;
        let (cos_v, sin_v) = turn(b, d_k, c, d_next);
        row[col::COS_V] = cos_v;
        row[col::SIN_V] = sin_v;
        row[col::REL_LEN] = d_k / (0.5 * (d_prev + d_next)).max(FEATURE_EPS);
        row[col::Z] = (d_k - mean) / std.max(FEATURE_EPS);
        row[col::HIST] = hist[k];
    }
    Ok(EdgeFeatureMatrix { data })
}
