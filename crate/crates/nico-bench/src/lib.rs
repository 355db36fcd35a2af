//! Shared fixtures for the criterion benches.
//!
//! Everything is deterministic so numbers are comparable across runs: the
//! same n always yields the same instance, tour, and history.

use nico_core::features::HistoryBuffer;
use nico_core::rng::rng_from;
use nico_core::tsp::{feasible_moves, generate_uniform_indexed, random_tour_with, Instance, Tour};

pub fn bench_instance(n: usize) -> Instance {
    generate_uniform_indexed(n, 0xBE7C, 0).expect("bench instance")
}

pub fn bench_tour(n: usize) -> Tour {
    let mut rng = rng_from(&[0xBE7C, n as u64]);
    random_tour_with(n, &mut rng).expect("bench tour")
}

/// History preloaded with 8 feasible moves, the steady-state recency load.
pub fn bench_history(n: usize) -> HistoryBuffer {
    let mut history = HistoryBuffer::new(16);
    for mv in feasible_moves(n).into_iter().step_by(3).take(8) {
        history.push(mv);
    }
    history
}
