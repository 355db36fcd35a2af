//! Exact optimum via Held-Karp dynamic programming.
//!
//! Used to compute optimality gaps on desk-scale instances.  The DP is
//! O(2^n · n²), so it is guarded at n ≤ 16 (about 15 MB of table and a few
//! tens of millions of transitions at the limit).

use crate::error::{Error, Result};

use super::{tour_cost, Instance, Tour};

pub const EXACT_MAX_N: usize = 16;

/// Minimum tour cost and one optimal tour (anchored at city 0).
///
/// Ties are broken deterministically toward the lower city index, so the
/// returned tour is stable across runs.
pub fn exact_optimum(instance: &Instance) -> Result<(f64, Tour)> {
    let n = instance.n();
    if n > EXACT_MAX_N {
        return Err(Error::SizeLimit(format!(
            "exact solver is limited to n <= {EXACT_MAX_N}, instance `{}` has n = {n}",
            instance.id()
        )));
    }
    // City 0 is the fixed start; DP states range over subsets of the rest.
    let m = n - 1;
    let full = (1usize << m) - 1;
    let width = m;
    let mut dp = vec![f64::INFINITY; (full + 1) * width];
    let mut parent = vec![usize::MAX; (full + 1) * width];

    for r in 0..m {
        dp[(1 << r) * width + r] = instance.dist(0, r + 1);
    }
    // Masks are visited in increasing order, so every strict submask is
    // final before it is read.
    for mask in 1usize..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        for r in 0..m {
            if mask & (1 << r) == 0 {
                continue;
            }
            let rest = mask & !(1 << r);
            let mut best = f64::INFINITY;
            let mut best_s = usize::MAX;
            for s in 0..m {
                if rest & (1 << s) == 0 {
                    continue;
                }
                let c = dp[rest * width + s] + instance.dist(s + 1, r + 1);
                if c < best {
                    best = c;
                    best_s = s;
                }
            }
            dp[mask * width + r] = best;
            parent[mask * width + r] = best_s;
        }
    }

    let (best_cost, best_last) = (0..m)
        .map(|r| (dp[full * width + r] + instance.dist(r + 1, 0), r))
        .fold((f64::INFINITY, usize::MAX), |acc, (c, r)| {
            if c < acc.0 {
                (c, r)
            } else {
                acc
            }
        });

    let mut order = Vec::with_capacity(n);
    let mut mask = full;
    let mut r = best_last;
    while r != usize::MAX {
        order.push(r + 1);
        let p = parent[mask * width + r];
        mask &= !(1 << r);
        r = p;
    }
    order.push(0);
    order.reverse();
    let tour = Tour::new(order)?;
    debug_assert!((tour_cost(instance, &tour)? - best_cost).abs() < 1e-9);
    Ok((best_cost, tour))
}
