//! Exact K-step lookahead teacher.
//!
//! Enumerates every feasible move sequence of length K from a state, scores
//! each by the tour cost after the final move, and reports the set of first
//! moves that begin a best sequence.  Intermediate moves are not required
//! to improve; the teacher is equally well-defined at local optima, where
//! it reports the least-bad reachable cost.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::search::SearchState;
use crate::tsp::{
    apply_two_opt, feasible_moves, tour_cost, two_opt_delta, Instance, Tour, TwoOptMove,
};

/// Sequences within this of the exact minimum count as optimal.
pub const ORACLE_TIE_TOL: f64 = 1e-9;

/// Enumeration ceiling for (moves per step)^K.
pub const ORACLE_BUDGET: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// First moves that begin at least one best K-sequence, in (i, j) order.
    pub optimal_actions: BTreeSet<TwoOptMove>,
    /// Cost after the best K-sequence.  Not necessarily below the current
    /// cost; at a deep local optimum every sequence may end worse.
    pub best_final_cost: f64,
    /// Lexicographically first sequence attaining `best_final_cost`.
    pub one_optimal_sequence: Vec<TwoOptMove>,
}

struct Dfs<'a> {
    instance: &'a Instance,
    moves: Vec<TwoOptMove>,
    /// Exact best final cost per first move, indexed like `moves`.
    best_by_first: Vec<f64>,
    best_cost: f64,
    witness: Vec<TwoOptMove>,
    prefix: Vec<TwoOptMove>,
}

impl Dfs<'_> {
    fn visit(&mut self, tour: &mut Tour, cost: f64, depth_left: usize) -> Result<()> {
        if depth_left == 0 {
            let first_idx = self
                .moves
                .iter()
                .position(|m| *m == self.prefix[0])
                .expect("prefix starts with a feasible move");
            if cost < self.best_by_first[first_idx] {
                self.best_by_first[first_idx] = cost;
            }
            // Sequences are visited in lexicographic order, so keeping the
            // incumbent witness on ties within the band yields the lex-first
            // optimal sequence.
            if cost < self.best_cost - ORACLE_TIE_TOL {
                self.best_cost = cost;
                self.witness = self.prefix.clone();
            } else if cost < self.best_cost {
                self.best_cost = cost;
            }
            return Ok(());
        }
        for idx in 0..self.moves.len() {
            let mv = self.moves[idx];
            let delta = two_opt_delta(self.instance, tour, mv)?;
            *tour = apply_two_opt(tour, mv)?;
            self.prefix.push(mv);
            self.visit(tour, cost + delta, depth_left - 1)?;
            self.prefix.pop();
            // A 2-opt move is an involution, so reapplying it restores the
            // tour without cloning.
            *tour = apply_two_opt(tour, mv)?;
        }
        Ok(())
    }
}

/// Exact best reachable cost in exactly K moves, the set of first moves
/// achieving it (ties within 1e-9), and one witness sequence.
pub fn k_step_lookahead(instance: &Instance, tour: &Tour, k: usize) -> Result<OracleResult> {
    if k == 0 {
        return Err(Error::InvalidInput("lookahead depth must be at least 1".into()));
    }
    let n = tour.len();
    let moves = feasible_moves(n);
    let per_step = moves.len() as f64;
    if per_step.powi(k as i32) > ORACLE_BUDGET {
        return Err(Error::SizeLimit(format!(
            "lookahead would enumerate {per_step}^{k} sequences, over the 1e7 ceiling"
        )));
    }
    if moves.is_empty() {
        return Err(Error::NoFeasibleAction);
    }

    let cost = tour_cost(instance, tour)?;
    let mut dfs = Dfs {
        instance,
        best_by_first: vec![f64::INFINITY; moves.len()],
        moves,
        best_cost: f64::INFINITY,
        witness: Vec::new(),
        prefix: Vec::with_capacity(k),
    };
    let mut scratch = tour.clone();
    dfs.visit(&mut scratch, cost, k)?;

    let optimal_actions = dfs
        .moves
        .iter()
        .zip(dfs.best_by_first.iter())
        .filter(|(_, &c)| c <= dfs.best_cost + ORACLE_TIE_TOL)
        .map(|(&m, _)| m)
        .collect();
    Ok(OracleResult {
        optimal_actions,
        best_final_cost: dfs.best_cost,
        one_optimal_sequence: dfs.witness,
    })
}

/// Advance `steps` times along witness actions, recording the state and the
/// oracle's optimal set before each advance.  The recorded states carry the
/// executed-move history, so their features match what the policy sees.
/// Starting from an existing state keeps any warmup history it accumulated.
pub fn oracle_rollout_state<'a>(
    mut state: SearchState<'a>,
    k: usize,
    steps: usize,
) -> Result<Vec<(SearchState<'a>, OracleResult)>> {
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let result = k_step_lookahead(state.instance, &state.tour, k)?;
        let next = result.one_optimal_sequence[0];
        out.push((state.clone(), result));
        state.apply(next)?;
    }
    Ok(out)
}

pub fn oracle_rollout<'a>(
    instance: &'a Instance,
    start: Tour,
    k: usize,
    steps: usize,
    history_capacity: usize,
) -> Result<Vec<(SearchState<'a>, OracleResult)>> {
    oracle_rollout_state(SearchState::new(instance, start, history_capacity)?, k, steps)
}
