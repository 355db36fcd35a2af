//! The improvement-search state and the generic anytime driver.
//!
//! A search state is one tour plus the bounded history of executed moves.
//! The driver repeatedly asks a move selector for the next 2-opt move,
//! applies it, and records an anytime trace entry; baselines produce the
//! same trace shape from their own loops so every method is compared on
//! identical footing.

use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_features, HistoryBuffer};
use crate::policy::PolicyNet;
use crate::tsp::{feasible_moves, tour_cost, Instance, Tour, TwoOptMove};

/// One row of an anytime trace.  `seconds` is elapsed wall-clock time since
/// the search started, measured on a monotonic clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub cost: f64,
    pub best: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    /// No admissible move remained: either no strictly improving move (the
    /// classical baselines) or every feasible cell was masked.
    LocalOptimum,
}

/// Step-indexed cost record of one search run.  Entry 0 is the start state;
/// each applied move appends one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnytimeTrace {
    pub entries: Vec<TraceEntry>,
    pub reason: StopReason,
}

impl AnytimeTrace {
    pub fn best_final(&self) -> f64 {
        self.entries.last().map(|e| e.best).unwrap_or(f64::INFINITY)
    }

    pub fn steps_taken(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    /// Best-so-far at the given step, clamped to the last entry for traces
    /// that stopped early.
    pub fn best_at_step(&self, step: usize) -> f64 {
        let idx = step.min(self.entries.len().saturating_sub(1));
        self.entries[idx].best
    }
}

/// Current tour, its incrementally maintained cost, and the recent-move
/// history.  Owned by exactly one search driver at a time.
#[derive(Debug, Clone)]
pub struct SearchState<'a> {
    pub instance: &'a Instance,
    pub tour: Tour,
    pub history: HistoryBuffer,
    cost: f64,
}

impl<'a> SearchState<'a> {
    pub fn new(instance: &'a Instance, tour: Tour, history_capacity: usize) -> Result<Self> {
        let cost = tour_cost(instance, &tour)?;
        Ok(Self { instance, tour, history: HistoryBuffer::new(history_capacity), cost })
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn n(&self) -> usize {
        self.tour.len()
    }

    /// Recompute the cost from scratch (the incremental value accumulates
    /// only rounding noise; used by tests and for final reporting).
    pub fn recompute_cost(&self) -> f64 {
        tour_cost(self.instance, &self.tour).expect("state tour fits its instance")
    }

    /// Apply a move, update the cost by its delta, and push it into the
    /// history buffer.  Returns the delta.
    pub fn apply(&mut self, mv: TwoOptMove) -> Result<f64> {
        let delta = crate::tsp::two_opt_delta(self.instance, &self.tour, mv)?;
        self.tour = crate::tsp::apply_two_opt(&self.tour, mv)?;
        self.cost += delta;
        self.history.push(mv);
        Ok(delta)
    }

    pub fn features(&self) -> Result<crate::features::EdgeFeatureMatrix> {
        compute_features(self.instance, &self.tour, &self.history)
    }
}

/// Decoding rule for policy-driven selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decode {
    Sample,
    Greedy,
}

/// A strategy that picks the next move for a state.  Selectors are pure
/// given the state and the RNG stream, so runs are reproducible from seeds.
pub trait MoveSelector {
    fn select(&self, state: &SearchState, rng: &mut ChaCha8Rng) -> Result<TwoOptMove>;
}

/// Runs the trained policy: features, forward pass with the recency mask
/// active, then sampling or greedy argmax.
pub struct NeuralSelector<'n> {
    pub net: &'n PolicyNet,
    pub decode: Decode,
}

impl MoveSelector for NeuralSelector<'_> {
    fn select(&self, state: &SearchState, rng: &mut ChaCha8Rng) -> Result<TwoOptMove> {
        let features = state.features()?;
        let (out, _) = self.net.forward(&features, &state.history, true)?;
        let (mv, _) = match self.decode {
            Decode::Sample => out.sample(rng)?,
            Decode::Greedy => out.greedy()?,
        };
        Ok(mv)
    }
}

/// Uniform choice over the same admissible set the neural policy sees:
/// feasible moves minus the recency window.
pub struct UniformSelector {
    pub recency_window: usize,
}

impl MoveSelector for UniformSelector {
    fn select(&self, state: &SearchState, rng: &mut ChaCha8Rng) -> Result<TwoOptMove> {
        let n = state.n();
        let blocked: Vec<TwoOptMove> = state.history.recent(self.recency_window).collect();
        let live: Vec<TwoOptMove> = feasible_moves(n)
            .into_iter()
            .filter(|mv| !blocked.contains(mv))
            .collect();
        if live.is_empty() {
            return Err(Error::NoFeasibleAction);
        }
        use rand::Rng;
        Ok(live[rng.random_range(0..live.len())])
    }
}

/// Drive `selector` for up to `budget` moves (or until `time_cap`, when
/// given, whichever comes first), tracking the best tour seen.
///
/// The returned tour is the best one encountered, not the final one; the
/// trace's entry 0 records the start state.  A selector reporting that no
/// admissible move remains ends the run with `LocalOptimum`.
pub fn run_improvement(
    instance: &Instance,
    start: Tour,
    selector: &impl MoveSelector,
    budget: usize,
    history_capacity: usize,
    rng: &mut ChaCha8Rng,
    time_cap: Option<Duration>,
) -> Result<(Tour, AnytimeTrace)> {
    if budget < 1 {
        return Err(Error::InvalidInput("step budget must be at least 1".into()));
    }
    let clock = Instant::now();
    let mut state = SearchState::new(instance, start, history_capacity)?;
    let mut best_cost = state.cost();
    let mut best_tour = state.tour.clone();
    let mut entries = vec![TraceEntry {
        step: 0,
        cost: state.cost(),
        best: best_cost,
        seconds: clock.elapsed().as_secs_f64(),
    }];

    let mut reason = StopReason::Budget;
    for step in 1..=budget {
        if let Some(cap) = time_cap {
            if clock.elapsed() >= cap {
                break;
            }
        }
        let mv = match selector.select(&state, rng) {
            Ok(mv) => mv,
            Err(Error::NoFeasibleAction) => {
                reason = StopReason::LocalOptimum;
                break;
            }
            Err(e) => return Err(e),
        };
        state.apply(mv)?;
        if state.cost() < best_cost {
            best_cost = state.cost();
            best_tour = state.tour.clone();
        }
        entries.push(TraceEntry {
            step,
            cost: state.cost(),
            best: best_cost,
            seconds: clock.elapsed().as_secs_f64(),
        });
    }

    Ok((best_tour, AnytimeTrace { entries, reason }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::rng::rng_from;
    use crate::tsp::{generate_uniform, random_tour};

    fn check_trace(trace: &AnytimeTrace) {
        for (idx, e) in trace.entries.iter().enumerate() {
            assert_eq!(e.step, idx);
        }
        for pair in trace.entries.windows(2) {
            assert!(pair[1].best <= pair[0].best);
            assert!(pair[1].seconds >= pair[0].seconds);
        }
        for e in &trace.entries {
            assert!(e.best <= e.cost + 1e-12);
        }
    }

    #[test]
    fn state_apply_tracks_cost_incrementally() {
        let inst = generate_uniform(20, 1).unwrap();
        let tour = random_tour(20, 2).unwrap();
        let mut state = SearchState::new(&inst, tour, 8).unwrap();
        let mut rng = rng_from(&[3]);
        let selector = UniformSelector { recency_window: 8 };
        for _ in 0..1000 {
            let mv = selector.select(&state, &mut rng).unwrap();
            state.apply(mv).unwrap();
        }
        assert!((state.cost() - state.recompute_cost()).abs() < 1e-9);
        assert_eq!(state.history.iter().count(), 8);
    }

    #[test]
    fn mismatched_tour_rejected() {
        let inst = generate_uniform(10, 4).unwrap();
        let tour = random_tour(8, 5).unwrap();
        assert!(SearchState::new(&inst, tour, 8).is_err());
    }

    #[test]
    fn uniform_run_respects_budget_and_invariants() {
        let inst = generate_uniform(15, 6).unwrap();
        let tour = random_tour(15, 7).unwrap();
        let mut rng = rng_from(&[8]);
        let (best, trace) = run_improvement(
            &inst,
            tour.clone(),
            &UniformSelector { recency_window: 8 },
            40,
            16,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(trace.entries.len(), 41);
        assert_eq!(trace.reason, StopReason::Budget);
        check_trace(&trace);
        assert!((tour_cost(&inst, &best).unwrap() - trace.best_final()).abs() < 1e-9);
        assert!(trace.best_final() <= trace.entries[0].cost);
    }

    #[test]
    fn identical_seeds_reproduce_runs() {
        let inst = generate_uniform(12, 9).unwrap();
        let tour = random_tour(12, 10).unwrap();
        let run = |_: ()| {
            let mut rng = rng_from(&[11]);
            run_improvement(
                &inst,
                tour.clone(),
                &UniformSelector { recency_window: 8 },
                25,
                16,
                &mut rng,
                None,
            )
            .unwrap()
        };
        let (t1, tr1) = run(());
        let (t2, tr2) = run(());
        assert_eq!(t1.as_slice(), t2.as_slice());
        assert_eq!(tr1.entries.len(), tr2.entries.len());
        for (a, b) in tr1.entries.iter().zip(tr2.entries.iter()) {
            assert_eq!(a.cost, b.cost);
            assert_eq!(a.best, b.best);
        }
    }

    #[test]
    fn exhausted_action_set_stops_with_local_optimum() {
        // n=5 has 5 feasible moves; a window of 8 eventually blocks all.
        let inst = generate_uniform(5, 12).unwrap();
        let tour = random_tour(5, 13).unwrap();
        let mut rng = rng_from(&[14]);
        let (_, trace) = run_improvement(
            &inst,
            tour,
            &UniformSelector { recency_window: 8 },
            100,
            8,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(trace.reason, StopReason::LocalOptimum);
        assert!(trace.entries.len() <= 6);
        check_trace(&trace);
    }

    #[test]
    fn time_cap_stops_early() {
        let inst = generate_uniform(30, 15).unwrap();
        let tour = random_tour(30, 16).unwrap();
        let mut rng = rng_from(&[17]);
        let (_, trace) = run_improvement(
            &inst,
            tour,
            &UniformSelector { recency_window: 8 },
            1_000_000,
            16,
            &mut rng,
            Some(Duration::from_millis(30)),
        )
        .unwrap();
        assert!(trace.entries.len() < 1_000_001);
        check_trace(&trace);
    }

    #[test]
    fn neural_selector_runs_and_greedy_is_deterministic() {
        let cfg = PolicyConfig {
            layers: 1,
            model_dim: 8,
            ffn_hidden: 8,
            heads: 2,
            ..Default::default()
        };
        let net = PolicyNet::new(cfg, 18).unwrap();
        let inst = generate_uniform(10, 19).unwrap();
        let tour = random_tour(10, 20).unwrap();
        for decode in [Decode::Sample, Decode::Greedy] {
            let mut rng = rng_from(&[21]);
            let (_, trace) = run_improvement(
                &inst,
                tour.clone(),
                &NeuralSelector { net: &net, decode },
                15,
                net.config().history_capacity,
                &mut rng,
                None,
            )
            .unwrap();
            check_trace(&trace);
            assert_eq!(trace.entries.len(), 16);
        }

        // Greedy decoding never consumes randomness, so two different seeds
        // agree move for move.
        let mut r1 = rng_from(&[22]);
        let mut r2 = rng_from(&[23]);
        let sel = NeuralSelector { net: &net, decode: Decode::Greedy };
        let (t1, _) =
            run_improvement(&inst, tour.clone(), &sel, 10, 16, &mut r1, None).unwrap();
        let (t2, _) = run_improvement(&inst, tour, &sel, 10, 16, &mut r2, None).unwrap();
        assert_eq!(t1.as_slice(), t2.as_slice());
    }
}
