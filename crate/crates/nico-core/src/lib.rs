//! Neural-improvement toolkit for Euclidean TSP.
//!
//! The crate is organized around a 2-opt improvement process: a policy
//! (learned or classical) repeatedly picks an edge pair of the current tour,
//! the corresponding segment is reversed, and an anytime trace records the
//! cost trajectory.  Modules:
//!
//! * [`tsp`]: instances, tours, the 2-opt move kernel, exact solvers, file I/O.
//! * [`features`]: per-edge token features and the move-history buffer.
//! * [`nn`]: dense layers, attention, normalization, AdamW, gradient checking,
//!   and the binary checkpoint container.  All backward passes are written by
//!   hand and validated against finite differences.
//! * [`policy`]: the edge-token encoder/decoder network producing a masked
//!   distribution over 2-opt moves.
//! * [`oracle`]: exhaustive k-step lookahead used as the imitation target.
//! * [`search`]: the rollout driver shared by learned and random policies.
//! * [`baselines`]: greedy 2-opt, greedy 3-opt, and tabu search.
//! * [`training`]: imitation and group-based RL stages with PPO-style updates.

pub mod baselines;
pub mod error;
pub mod nn;
pub mod features;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod search;
pub mod training;
pub mod tsp;

pub use baselines::{greedy_three_opt, greedy_two_opt, tabu_search, TabuRun};
pub use error::{Error, Result};
pub use features::{EdgeFeatureMatrix, HistoryBuffer, FEATURE_COLS};
pub use nn::{AdamW, NormKind, OptimizerConfig};
pub use oracle::{k_step_lookahead, oracle_rollout, OracleResult};
pub use policy::{PolicyConfig, PolicyNet, PolicyOutput, Pooling};
pub use search::{AnytimeTrace, SearchState, StopReason, TraceEntry};
pub use training::{load_policy, train, CheckpointMeta, EpochMetrics, Stage, TrainConfig, Trainer};
pub use tsp::{Instance, Tour, TwoOptMove};
