//! Classical local-search baselines, instrumented with the same anytime
//! trace as the neural policy so step-for-step comparisons are fair.
//!
//! All three are deterministic: fixed scan orders and explicit tie-breaks,
//! no RNG anywhere.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::search::{AnytimeTrace, StopReason, TraceEntry};
use crate::tsp::{
    apply_two_opt, feasible_moves, tour_cost, two_opt_delta, Instance, Tour, TwoOptMove,
};

/// Delta ties closer than this are broken lexicographically.
pub const TIE_TOL: f64 = 1e-12;

/// O(n³) per step makes plain 3-opt impractical beyond this.
pub const THREE_OPT_MAX_N: usize = 500;

/// The strictly improving move with the smallest delta, ties broken toward
/// the lexicographically smallest (i, j).  `None` at a 2-opt local optimum.
pub fn best_improving_move(instance: &Instance, tour: &Tour) -> Result<Option<(TwoOptMove, f64)>> {
    let mut best: Option<(TwoOptMove, f64)> = None;
    for mv in feasible_moves(tour.len()) {
        let delta = two_opt_delta(instance, tour, mv)?;
        if delta < -TIE_TOL && best.map_or(true, |(_, b)| delta < b - TIE_TOL) {
            best = Some((mv, delta));
        }
    }
    Ok(best)
}

/// Steepest-descent 2-opt: apply the best improving move until none exists
/// or the budget runs out.
pub fn greedy_two_opt(
    instance: &Instance,
    start: Tour,
    budget: usize,
) -> Result<(Tour, AnytimeTrace)> {
    if budget < 1 {
        return Err(Error::InvalidInput("step budget must be at least 1".into()));
    }
    let clock = Instant::now();
    let mut tour = start;
    let mut cost = tour_cost(instance, &tour)?;
    let mut entries = vec![TraceEntry { step: 0, cost, best: cost, seconds: clock.elapsed().as_secs_f64() }];
    let mut reason = StopReason::Budget;
    for step in 1..=budget {
        match best_improving_move(instance, &tour)? {
            None => {
                reason = StopReason::LocalOptimum;
                break;
            }
            Some((mv, delta)) => {
                tour = apply_two_opt(&tour, mv)?;
                cost += delta;
                entries.push(TraceEntry {
                    step,
                    cost,
                    best: cost,
                    seconds: clock.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok((tour, AnytimeTrace { entries, reason }))
}

/// One 3-opt reconnection: cut after positions i, j, k and reassemble.
///
/// With segments A = 0..=i, B = i+1..=j, C = j+1..=k, D = k+1.. and
/// boundary cities a=π_i, b=π_{i+1}, c=π_j, d=π_{j+1}, e=π_k, f=π_{k+1},
/// the seven non-identity reconnections are
///
///   1: A B' C  D   new edges (a,c)(b,d)      2-opt on (i,j)
///   2: A B  C' D   new edges (c,e)(d,f)      2-opt on (j,k)
///   3: A (BC)' D   new edges (a,e)(b,f)      2-opt on (i,k)
///   4: A B' C' D   new edges (a,c)(b,e)(d,f)
///   5: A C  B  D   new edges (a,d)(e,b)(c,f)
///   6: A C  B' D   new edges (a,d)(e,c)(b,f)
///   7: A C' B  D   new edges (a,e)(d,b)(c,f)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreeOptMove {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// Reconnection type, 1..=7 as in the table above.
    pub kind: u8,
}

fn three_opt_delta(instance: &Instance, tour: &Tour, mv: ThreeOptMove) -> f64 {
    let n = tour.len();
    let o = tour.as_slice();
    let (i, j, k) = (mv.i, mv.j, mv.k);
    let a = o[i];
    let b = o[i + 1];
    let c = o[j];
    let d = o[j + 1];
    let e = o[k];
    let f = o[(k + 1) % n];
    let dist = |x: usize, y: usize| instance.dist(x, y);
    let removed_all = dist(a, b) + dist(c, d) + dist(e, f);
    match mv.kind {
        1 => dist(a, c) + dist(b, d) - dist(a, b) - dist(c, d),
        2 => dist(c, e) + dist(d, f) - dist(c, d) - dist(e, f),
        3 => dist(a, e) + dist(b, f) - dist(a, b) - dist(e, f),
        4 => dist(a, c) + dist(b, e) + dist(d, f) - removed_all,
        5 => dist(a, d) + dist(e, b) + dist(c, f) - removed_all,
        6 => dist(a, d) + dist(e, c) + dist(b, f) - removed_all,
        7 => dist(a, e) + dist(d, b) + dist(c, f) - removed_all,
        _ => unreachable!("reconnection kinds are 1..=7"),
    }
}

fn apply_three_opt(tour: &Tour, mv: ThreeOptMove) -> Result<Tour> {
    let o = tour.as_slice();
    let (i, j, k) = (mv.i, mv.j, mv.k);
    let seg_a = &o[..=i];
    let seg_b = &o[i + 1..=j];
    let seg_c = &o[j + 1..=k];
    let seg_d = &o[k + 1..];
    let rev = |s: &[usize]| s.iter().rev().copied().collect::<Vec<_>>();
    let mut order = Vec::with_capacity(o.len());
    order.extend_from_slice(seg_a);
    match mv.kind {
        1 => {
            order.extend(rev(seg_b));
            order.extend_from_slice(seg_c);
        }
        2 => {
            order.extend_from_slice(seg_b);
            order.extend(rev(seg_c));
        }
        3 => {
            order.extend(rev(seg_c));
            order.extend(rev(seg_b));
        }
        4 => {
            order.extend(rev(seg_b));
            order.extend(rev(seg_c));
        }
        5 => {
            order.extend_from_slice(seg_c);
            order.extend_from_slice(seg_b);
        }
        6 => {
            order.extend_from_slice(seg_c);
            order.extend(rev(seg_b));
        }
        7 => {
            order.extend(rev(seg_c));
            order.extend_from_slice(seg_b);
        }
        _ => unreachable!("reconnection kinds are 1..=7"),
    }
    order.extend_from_slice(seg_d);
    Tour::new(order)
}

fn best_three_opt_move(instance: &Instance, tour: &Tour) -> Option<(ThreeOptMove, f64)> {
    let n = tour.len();
    let mut best: Option<(ThreeOptMove, f64)> = None;
    for i in 0..n - 2 {
        for j in i + 1..n - 1 {
            for k in j + 1..n {
                for kind in 1..=7u8 {
                    let mv = ThreeOptMove { i, j, k, kind };
                    let delta = three_opt_delta(instance, tour, mv);
                    if delta < -TIE_TOL && best.map_or(true, |(_, b)| delta < b - TIE_TOL) {
                        best = Some((mv, delta));
                    }
                }
            }
        }
    }
    best
}

pub fn greedy_three_opt(
    instance: &Instance,
    start: Tour,
    budget: usize,
) -> Result<(Tour, AnytimeTrace)> {
    greedy_three_opt_with_limit(instance, start, budget, THREE_OPT_MAX_N)
}

/// `max_n` overrides the default size guard for callers that accept the
/// cubic per-step cost.
pub fn greedy_three_opt_with_limit(
    instance: &Instance,
    start: Tour,
    budget: usize,
    max_n: usize,
) -> Result<(Tour, AnytimeTrace)> {
    let n = start.len();
    if n < 6 {
        return Err(Error::InvalidInput(format!(
            "3-opt needs at least 6 cities, got {n}"
        )));
    }
    if n > max_n {
        return Err(Error::SizeLimit(format!(
            "3-opt scan is O(n^3) per step; n={n} exceeds the limit of {max_n}"
        )));
    }
    if budget < 1 {
        return Err(Error::InvalidInput("step budget must be at least 1".into()));
    }
    let clock = Instant::now();
    let mut tour = start;
    let mut cost = tour_cost(instance, &tour)?;
    let mut entries = vec![TraceEntry { step: 0, cost, best: cost, seconds: clock.elapsed().as_secs_f64() }];
    let mut reason = StopReason::Budget;
    for step in 1..=budget {
        match best_three_opt_move(instance, &tour) {
            None => {
                reason = StopReason::LocalOptimum;
                break;
            }
            Some((mv, delta)) => {
                tour = apply_three_opt(&tour, mv)?;
                cost += delta;
                entries.push(TraceEntry {
                    step,
                    cost,
                    best: cost,
                    seconds: clock.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok((tour, AnytimeTrace { entries, reason }))
}

/// Outcome of a tabu run.  `best` can differ from the final tour because
/// tabu accepts worsening moves.
#[derive(Debug, Clone)]
pub struct TabuRun {
    pub best: Tour,
    pub trace: AnytimeTrace,
    /// Moves in execution order, for tenure audits.
    pub executed: Vec<TwoOptMove>,
    /// Times a tabu move was admitted for reaching a new global best.
    pub aspiration_fires: usize,
    /// Times the oldest tabu entry was evicted to unblock a step.
    pub forced_evictions: usize,
}

/// Best-admissible-move search with a FIFO tabu list over undirected moves
/// (the same move-and-swap identity as the policy's recency mask).
///
/// A tabu move is admissible anyway when it would produce a new global best
/// (aspiration, on by default).  If every move is tabu and none aspirates,
/// the oldest entry is evicted and the step retried.
pub fn tabu_search(
    instance: &Instance,
    start: Tour,
    budget: usize,
    tenure: usize,
    aspiration: bool,
) -> Result<TabuRun> {
    if budget < 1 {
        return Err(Error::InvalidInput("step budget must be at least 1".into()));
    }
    let clock = Instant::now();
    let moves = feasible_moves(start.len());
    let mut tour = start;
    let mut cost = tour_cost(instance, &tour)?;
    let mut best_cost = cost;
    let mut best_tour = tour.clone();
    let mut entries = vec![TraceEntry { step: 0, cost, best: cost, seconds: clock.elapsed().as_secs_f64() }];
    let mut tabu: std::collections::VecDeque<TwoOptMove> = std::collections::VecDeque::new();
    let mut executed = Vec::new();
    let mut aspiration_fires = 0usize;
    let mut forced_evictions = 0usize;

    for step in 1..=budget {
        let chosen = loop {
            let mut candidate: Option<(TwoOptMove, f64, bool)> = None;
            for &mv in &moves {
                let delta = two_opt_delta(instance, &tour, mv)?;
                let is_tabu = tabu.contains(&mv);
                let aspirates = aspiration && cost + delta < best_cost - TIE_TOL;
                if is_tabu && !aspirates {
                    continue;
                }
                if candidate.map_or(true, |(_, b, _)| delta < b - TIE_TOL) {
                    candidate = Some((mv, delta, is_tabu));
                }
            }
            match candidate {
                Some(c) => break c,
                None => {
                    // Liveness: everything is tabu, free the oldest entry.
                    tabu.pop_front();
                    forced_evictions += 1;
                }
            }
        };
        let (mv, delta, was_tabu) = chosen;
        if was_tabu {
            aspiration_fires += 1;
        }
        tour = apply_two_opt(&tour, mv)?;
        cost += delta;
        if tenure > 0 {
            tabu.push_back(mv);
            while tabu.len() > tenure {
                tabu.pop_front();
            }
        }
        executed.push(mv);
        if cost < best_cost {
            best_cost = cost;
            best_tour = tour.clone();
        }
        entries.push(TraceEntry {
            step,
            cost,
            best: best_cost,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }

    Ok(TabuRun {
        best: best_tour,
        trace: AnytimeTrace { entries, reason: StopReason::Budget },
        executed,
        aspiration_fires,
        forced_evictions,
    })
}
