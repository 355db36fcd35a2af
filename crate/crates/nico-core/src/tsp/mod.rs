//! Instances, tours, and the 2-opt move kernel.
//!
//! Positions and city indices are 0-based everywhere in this crate.  A 2-opt
//! move `(i, j)` removes tour edges `(π[i], π[i+1])` and `(π[j], π[j+1])`
//! (indices mod n) and reconnects as `(π[i], π[j])`, `(π[i+1], π[j+1])`,
//! which is the same thing as reversing positions `i+1 ..= j`.

mod exact;
mod generate;
pub mod io;

pub use exact::exact_optimum;
pub use generate::{generate_batch, generate_uniform, generate_uniform_indexed, generate_with_rng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Distance handling: on-demand from coordinates up to `DIST_CACHE_MIN`,
/// a precomputed n×n matrix between `DIST_CACHE_MIN` and `DIST_CACHE_MAX`
/// (at most 32 MB), and on-demand again above that to keep memory flat.
const DIST_CACHE_MIN: usize = 512;
const DIST_CACHE_MAX: usize = 2048;

/// A Euclidean TSP instance: labeled points in the plane.
///
/// Immutable after construction, so it can be shared freely across worker
/// threads.
#[derive(Debug, Clone)]
pub struct Instance {
    id: String,
    coords: Vec<[f64; 2]>,
    opt_cost: Option<f64>,
    dist: Option<Vec<f64>>,
}

impl Instance {
    /// Requires at least 3 points (cost is undefined below that) and finite
    /// coordinates.
    pub fn new(id: impl Into<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        let id = id.into();
        if coords.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "instance `{id}` has {} points; need at least 3",
                coords.len()
            )));
        }
        if let Some(k) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidInput(format!(
                "instance `{id}` has a non-finite coordinate at point {k}"
            )));
        }
        let n = coords.len();
        let dist = (n > DIST_CACHE_MIN && n <= DIST_CACHE_MAX).then(|| {
            let mut m = vec![0.0; n * n];
            for a in 0..n {
                for b in (a + 1)..n {
                    let d = euclid(coords[a], coords[b]);
                    m[a * n + b] = d;
                    m[b * n + a] = d;
                }
            }
            m
        });
        Ok(Self { id, coords, opt_cost: None, dist })
    }

    /// Attach an externally known optimal cost (exact solver, dataset field).
    pub fn with_opt_cost(mut self, cost: f64) -> Self {
        self.opt_cost = Some(cost);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn coord(&self, city: usize) -> [f64; 2] {
        self.coords[city]
    }

    pub fn opt_cost(&self) -> Option<f64> {
        self.opt_cost
    }

    /// Euclidean distance between two cities.
    #[inline]
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        match &self.dist {
            Some(m) => m[a * self.coords.len() + b],
            None => euclid(self.coords[a], self.coords[b]),
        }
    }
}

#[inline]
fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// A Hamiltonian cycle given as the visiting order of city indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tour {
    order: Vec<usize>,
}

impl Tour {
    /// Validates that `order` is a permutation of `0..order.len()` with at
    /// least 3 cities.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        if n < 3 {
            return Err(Error::InvalidInput(format!(
                "tour has {n} positions; need at least 3"
            )));
        }
        let mut seen = vec![false; n];
        for &c in &order {
            if c >= n || seen[c] {
                return Err(Error::InvalidInput(format!(
                    "tour order is not a permutation of 0..{n} (offending city {c})"
                )));
            }
            seen[c] = true;
        }
        Ok(Self { order })
    }

    /// Identity tour 0, 1, …, n−1.
    pub fn identity(n: usize) -> Result<Self> {
        Self::new((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.order
    }

    /// City at tour position `pos`.
    pub fn city(&self, pos: usize) -> usize {
        self.order[pos]
    }

    pub fn into_order(self) -> Vec<usize> {
        self.order
    }

    pub(crate) fn order_mut(&mut self) -> &mut [usize] {
        &mut self.order
    }
}

/// A 2-opt move given by the tour positions of the two removed edges.
///
/// Feasibility for a tour of length n: `i < j`, `j − i ≥ 2`, and
/// `(i, j) ≠ (0, n−1)` (the two removed edges must not share an endpoint,
/// including across the cyclic wrap).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TwoOptMove {
    pub i: usize,
    pub j: usize,
}

impl TwoOptMove {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub fn is_feasible(&self, n: usize) -> bool {
        self.i < self.j && self.j < n && self.j - self.i >= 2 && !(self.i == 0 && self.j == n - 1)
    }
}

fn check_move(mv: TwoOptMove, n: usize) -> Result<()> {
    if mv.is_feasible(n) {
        Ok(())
    } else {
        Err(Error::InvalidMove { i: mv.i, j: mv.j, n })
    }
}

/// Total cycle length, summed in position order for bit-stable results.
pub fn tour_cost(instance: &Instance, tour: &Tour) -> Result<f64> {
    let n = instance.n();
    if tour.len() != n {
        return Err(Error::InvalidInput(format!(
            "tour has {} positions but instance `{}` has {} cities",
            tour.len(),
            instance.id(),
            n
        )));
    }
    let order = tour.as_slice();
    let mut total = 0.0;
    for k in 0..n {
        total += instance.dist(order[k], order[(k + 1) % n]);
    }
    Ok(total)
}

/// All feasible 2-opt moves for a tour of length n, in lexicographic (i, j)
/// order.  Empty for n < 4; cardinality n(n−3)/2 otherwise.
pub fn feasible_moves(n: usize) -> Vec<TwoOptMove> {
    if n < 4 {
        return Vec::new();
    }
    let mut moves = Vec::with_capacity(n * (n - 3) / 2);
    for i in 0..(n - 2) {
        let j_max = if i == 0 { n - 2 } else { n - 1 };
        for j in (i + 2)..=j_max {
            moves.push(TwoOptMove::new(i, j));
        }
    }
    debug_assert_eq!(moves.len(), n * (n - 3) / 2);
    moves
}

pub(crate) fn reverse_segment(order: &mut [usize], i: usize, j: usize) {
    order[i + 1..=j].reverse();
}

/// Returns the tour with positions `i+1 ..= j` reversed; the input is left
/// untouched.
pub fn apply_two_opt(tour: &Tour, mv: TwoOptMove) -> Result<Tour> {
    check_move(mv, tour.len())?;
    let mut out = tour.clone();
    reverse_segment(out.order_mut(), mv.i, mv.j);
    Ok(out)
}

/// Cost change of applying `mv`, from the four affected edges only.
///
/// Equals `tour_cost(apply_two_opt(tour, mv)) − tour_cost(tour)` up to
/// floating-point noise, in O(1) time.
pub fn two_opt_delta(instance: &Instance, tour: &Tour, mv: TwoOptMove) -> Result<f64> {
    let n = instance.n();
    if tour.len() != n {
        return Err(Error::InvalidInput(format!(
            "tour has {} positions but instance `{}` has {} cities",
            tour.len(),
            instance.id(),
            n
        )));
    }
    check_move(mv, n)?;
    Ok(two_opt_delta_unchecked(instance, tour.as_slice(), mv))
}

/// Delta without feasibility re-validation, for callers that enumerate moves
/// from `feasible_moves` and have already matched tour and instance.
#[inline]
pub(crate) fn two_opt_delta_unchecked(instance: &Instance, order: &[usize], mv: TwoOptMove) -> f64 {
    let n = order.len();
    let (i, j) = (mv.i, mv.j);
    let a = order[i];
    let b = order[i + 1];
    let c = order[j];
    let d = order[(j + 1) % n];
    instance.dist(a, c) + instance.dist(b, d) - instance.dist(a, b) - instance.dist(c, d)
}

/// Uniformly random tour, deterministic under the seed.
pub fn random_tour(n: usize, seed: u64) -> Result<Tour> {
    let mut rng = rng::rng_from(&[seed, tag::START_TOUR]);
    random_tour_with(n, &mut rng)
}

/// Uniformly random tour drawn from the caller's stream.
pub fn random_tour_with(n: usize, rng: &mut impl rand::Rng) -> Result<Tour> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tour::new(order)
}
