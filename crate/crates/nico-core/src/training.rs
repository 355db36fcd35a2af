//! Both learning stages and their shared plumbing.
//!
//! Imitation: warmup to a diverse state, query the exact lookahead teacher,
//! and minimize the negative log of the total probability mass the policy
//! puts on the teacher's optimal set.
//!
//! Reinforcement: group rollouts from a shared warmup state scored against
//! the best cost seen during warmup, centered within the group (no critic),
//! broadcast over the prefix up to the group's best-discovery step, then a
//! clipped PPO update replayed against stored behavior log-probabilities.
//!
//! Rollout collection runs against a frozen behavior snapshot and every
//! random draw is keyed by (seed, role, counters), so worker scheduling
//! never changes results and interrupted runs resume exactly.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_features, HistoryBuffer};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint, BlockData};
use crate::nn::{AdamW, OptimizerConfig, ParamModule, StepOutcome};
use crate::oracle::oracle_rollout_state;
use crate::policy::{PolicyConfig, PolicyNet, PolicyOutput};
use crate::rng::{rng_from, tag};
use crate::search::SearchState;
use crate::tsp::{generate_with_rng, random_tour_with, Instance, Tour, TwoOptMove};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Il,
    Rl,
}

/// Full training schedule for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: u64,
    /// Instance-size range; one size is drawn per optimizer update and all
    /// instances in that update share it.
    pub n_low: usize,
    pub n_high: usize,
    /// Teacher depth K.
    pub lookahead: usize,
    /// Group size G.
    pub group_size: usize,
    /// Rollout segment length T.
    pub horizon: usize,
    pub ppo_clip: f64,
    /// Optimization passes over each collected batch.
    pub ppo_epochs: usize,
    /// Collected batches between behavior-snapshot refreshes.
    pub behavior_refresh: u64,
    /// Instances per optimizer update.
    pub batch_size: usize,
    /// Updates per epoch (the epoch is the checkpoint/decay unit).
    pub batches_per_epoch: u64,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::il_default()
    }
}

impl TrainConfig {
    pub fn il_default() -> Self {
        Self {
            stage: Stage::Il,
            epochs: 100,
            n_low: 20,
            n_high: 50,
            lookahead: 2,
            group_size: 20,
            horizon: 32,
            ppo_clip: 0.2,
            ppo_epochs: 1,
            behavior_refresh: 1,
            batch_size: 32,
            batches_per_epoch: 10,
            seed: 0,
            policy: PolicyConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn rl_default() -> Self {
        Self {
            stage: Stage::Rl,
            epochs: 200,
            n_high: 100,
            behavior_refresh: 20,
            ..Self::il_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.optimizer.validate()?;
        if self.epochs < 1 || self.batches_per_epoch < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs, batches, and batch size must be positive".into()));
        }
        if self.n_low < 4 || self.n_low > self.n_high {
            return Err(Error::Config(format!(
                "instance-size range [{}, {}] is invalid (need 4 <= low <= high)",
                self.n_low, self.n_high
            )));
        }
        if self.lookahead < 1 {
            return Err(Error::Config("lookahead depth must be at least 1".into()));
        }
        if self.horizon < 1 {
            return Err(Error::Config("rollout horizon must be at least 1".into()));
        }
        if !(0.0 < self.ppo_clip && self.ppo_clip < 1.0) {
            return Err(Error::Config(format!(
                "ppo_clip must lie in (0, 1), got {}",
                self.ppo_clip
            )));
        }
        if self.ppo_epochs < 1 || self.behavior_refresh < 1 {
            return Err(Error::Config("ppo_epochs and behavior_refresh must be positive".into()));
        }
        if self.stage == Stage::Rl {
            if self.group_size < 2 {
                return Err(Error::Config(
                    "group size must be at least 2: advantages are centered within the group"
                        .into(),
                ));
            }
            // A rollout must never mask out every feasible cell, or members
            // could die mid-segment.
            let min_moves = self.n_low * (self.n_low - 3) / 2;
            if self.policy.use_recency_mask && min_moves <= self.policy.recency_window {
                return Err(Error::Config(format!(
                    "n_low={} yields only {min_moves} feasible moves, not enough to keep a \
                     recency window of {} live",
                    self.n_low, self.policy.recency_window
                )));
            }
        }
        Ok(())
    }
}

/// Warmup outcome: the state handed to the learner and the best cost seen
/// on the way there (the RL reference cost).
pub struct WarmupResult<'a> {
    pub state: SearchState<'a>,
    pub c_ref: f64,
    pub t0: usize,
}

/// Start from a random tour, draw t0 uniformly from {0, …, n}, and walk t0
/// stochastic steps with the behavior policy (recency mask active).
/// `c_ref` is the minimum cost over the whole walk, initial tour included.
pub fn warmup_state<'a>(
    instance: &'a Instance,
    behavior: &PolicyNet,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<WarmupResult<'a>> {
    let n = instance.n();
    let tour = random_tour_with(n, rng)?;
    let mut state = SearchState::new(instance, tour, behavior.config().history_capacity)?;
    let mut c_ref = state.cost();
    let t0 = rng.random_range(0..=n);
    for _ in 0..t0 {
        let features = state.features()?;
        let (out, _) = behavior.forward(&features, &state.history, true)?;
        let mv = match out.sample(rng) {
            Ok((mv, _)) => mv,
            Err(Error::NoFeasibleAction) => break,
            Err(e) => return Err(e),
        };
        state.apply(mv)?;
        if state.cost() < c_ref {
            c_ref = state.cost();
        }
    }
    Ok(WarmupResult { state, c_ref, t0 })
}

/// log Σ_{a ∈ set} p(a): the log of the probability mass on a move set.
pub fn set_log_mass(output: &PolicyOutput, set: &BTreeSet<TwoOptMove>) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &a in set {
        m = m.max(output.log_prob(a));
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = set.iter().map(|&a| (output.log_prob(a) - m).exp()).sum();
    m + sum.ln()
}

/// One imitation episode: the instance plus (state, teacher set) pairs.
struct IlEpisode {
    instance: Instance,
    steps: Vec<(Tour, HistoryBuffer, BTreeSet<TwoOptMove>)>,
}

/// One member's rollout segment.
#[derive(Debug, Clone)]
pub struct MemberRollout {
    pub actions: Vec<TwoOptMove>,
    pub behavior_logps: Vec<f64>,
    /// Costs indexed by step: costs[0] is the shared start state, costs[s+1]
    /// follows actions[s].
    pub costs: Vec<f64>,
    pub reward: f64,
    /// Centered group advantage A (pre-broadcast).
    pub advantage: f64,
    /// Per-action advantages after the prefix broadcast (and, later,
    /// normalization); step_adv[s] belongs to actions[s].
    pub step_adv: Vec<f64>,
}

/// G rollouts from one shared warmup state of one instance.
pub struct GroupBatch {
    pub instance: Instance,
    pub start_tour: Tour,
    pub start_history: HistoryBuffer,
    pub c_ref: f64,
    /// Earliest step (0 = the start state itself) at which the group-wide
    /// best cost first appeared.
    pub t_best: usize,
    pub members: Vec<MemberRollout>,
}

impl GroupBatch {
    pub fn group_best_cost(&self) -> f64 {
        self.members
            .iter()
            .flat_map(|m| m.costs.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Decoding used for behavior rollouts; sampling in real training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutDecode {
    Sample,
    Greedy,
}

/// Collect one group: shared warmup, then G independent T-step rollouts
/// with per-member RNG streams keyed by (seed, instance index, member).
pub fn collect_group_rollouts(
    instance: Instance,
    behavior: &PolicyNet,
    cfg: &TrainConfig,
    instance_index: u64,
    decode: RolloutDecode,
) -> Result<GroupBatch> {
    let mut warm_rng = rng_from(&[cfg.seed, tag::WARMUP, instance_index]);
    let warm = warmup_state(&instance, behavior, &mut warm_rng)?;
    let start_tour = warm.state.tour.clone();
    let start_history = warm.state.history.clone();
    let c_ref = warm.c_ref;

    let mut members = Vec::with_capacity(cfg.group_size);
    for g in 0..cfg.group_size {
        let mut rng = rng_from(&[cfg.seed, tag::MEMBER, instance_index, g as u64]);
        let mut state = SearchState::new(&instance, start_tour.clone(), 0)?;
        state.history = start_history.clone();
        let mut actions = Vec::with_capacity(cfg.horizon);
        let mut behavior_logps = Vec::with_capacity(cfg.horizon);
        let mut costs = Vec::with_capacity(cfg.horizon + 1);
        costs.push(state.cost());
        for _ in 0..cfg.horizon {
            let features = state.features()?;
            let (out, _) = behavior.forward(&features, &state.history, true)?;
            let (mv, lp) = match decode {
                RolloutDecode::Sample => out.sample(&mut rng)?,
                RolloutDecode::Greedy => out.greedy()?,
            };
            state.apply(mv)?;
            actions.push(mv);
            behavior_logps.push(lp);
            costs.push(state.cost());
        }
        members.push(MemberRollout {
            actions,
            behavior_logps,
            costs,
            reward: 0.0,
            advantage: 0.0,
            step_adv: vec![0.0; cfg.horizon],
        });
    }

    Ok(GroupBatch { instance, start_tour, start_history, c_ref, t_best: 0, members })
}

/// Rewards against the warmup reference, centered within the group, then
/// broadcast across each member's prefix up to the group's discovery step.
pub fn compute_rewards_and_advantages(batch: &mut GroupBatch) -> Result<()> {
    if batch.c_ref <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "reference cost {} of instance {} is not positive; cannot normalize rewards",
            batch.c_ref, batch.instance.id()
        )));
    }
    let horizon = batch.members[0].costs.len() - 1;
    let group_best = batch.group_best_cost();
    let t_best = (0..=horizon)
        .find(|&t| batch.members.iter().any(|m| m.costs[t] == group_best))
        .expect("the minimum is attained at some step");
    batch.t_best = t_best;

    let mut mean_r = 0.0;
    for m in batch.members.iter_mut() {
        let c_best = m.costs[..=t_best].iter().copied().fold(f64::INFINITY, f64::min);
        m.reward = (batch.c_ref - c_best).max(0.0) / batch.c_ref;
        mean_r += m.reward;
    }
    mean_r /= batch.members.len() as f64;
    for m in batch.members.iter_mut() {
        m.advantage = m.reward - mean_r;
        for s in 0..horizon {
            m.step_adv[s] = if s < t_best { m.advantage } else { 0.0 };
        }
    }
    Ok(())
}

/// Divide every nonzero per-step advantage in the update batch by the
/// population standard deviation of the nonzero entries.  Zeros stay zero;
/// a batch with no signal (or a degenerate spread) is left untouched.
pub fn normalize_step_advantages(batches: &mut [GroupBatch]) {
    let nonzero: Vec<f64> = batches
        .iter()
        .flat_map(|b| b.members.iter())
        .flat_map(|m| m.step_adv.iter().copied())
        .filter(|a| *a != 0.0)
        .collect();
    if nonzero.is_empty() {
        return;
    }
    let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
    let var = nonzero.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / nonzero.len() as f64;
    let std = var.sqrt();
    if std < 1e-8 {
        return;
    }
    for b in batches.iter_mut() {
        for m in b.members.iter_mut() {
            for a in m.step_adv.iter_mut() {
                if *a != 0.0 {
                    *a /= std;
                }
            }
        }
    }
}

/// min(ρ·A, clip(ρ, 1−ε, 1+ε)·A): the per-term clipped surrogate.
pub(crate) fn clipped_objective_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    (ratio * advantage).min(clipped)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PpoStats {
    /// Σ of surrogate terms (not yet negated or divided).
    pub term_sum: f64,
    /// Terms dropped for non-finite ratios.
    pub dropped: u64,
}

/// Replay one group under the current policy and accumulate the clipped-PPO
/// gradient (scaled by 1/denom) into the policy's parameters.
///
/// Members whose advantage is zero are skipped outright: every one of their
/// terms is zero with zero gradient, which also realizes the guarantee that
/// no-improvement groups contribute nothing.
pub fn ppo_accumulate(
    policy: &mut PolicyNet,
    batch: &GroupBatch,
    eps: f64,
    denom: f64,
    with_grad: bool,
) -> Result<PpoStats> {
    let mut stats = PpoStats::default();
    for member in &batch.members {
        if member.advantage == 0.0 || batch.t_best == 0 {
            continue;
        }
        let mut state = SearchState::new(&batch.instance, batch.start_tour.clone(), 0)?;
        state.history = batch.start_history.clone();
        for s in 0..batch.t_best {
            let a_t = member.step_adv[s];
            let mv = member.actions[s];
            let features = state.features()?;
            let (out, cache) = policy.forward(&features, &state.history, true)?;
            let lp = out.log_prob(mv);
            let ratio = (lp - member.behavior_logps[s]).exp();
            if !ratio.is_finite() {
                stats.dropped += 1;
            } else {
                stats.term_sum += clipped_objective_term(ratio, a_t, eps);
                if with_grad {
                    let unclipped = ratio * a_t;
                    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * a_t;
                    // The min picks a branch; only an unclipped (or
                    // band-interior) selection lets gradient through.
                    let dterm_dlp = if unclipped <= clipped { unclipped } else { 0.0 };
                    if dterm_dlp != 0.0 {
                        let n = state.n();
                        let mut d = Array2::zeros((n, n));
                        d[[mv.i, mv.j]] = -dterm_dlp / denom;
                        policy.backward(&cache, &d);
                    }
                }
            }
            state.apply(mv)?;
        }
    }
    Ok(stats)
}

/// Epoch-level record appended to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    /// Global epoch number, counted across stages (drives the decay).
    pub epoch: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_best_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_signal_fraction: Option<f64>,
    pub skipped_episodes: u64,
    pub dropped_terms: u64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Checkpoint metadata: everything needed to rebuild the nets, the
/// optimizer, and the RNG keying counters for an exact resume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub policy: PolicyConfig,
    pub optimizer: OptimizerConfig,
    pub stage: Stage,
    pub epochs_completed: u64,
    pub optimizer_steps: u64,
    pub skipped_steps: u64,
    /// Collected batches so far; keys instance/warmup/member RNG streams
    /// and the behavior-refresh cadence.
    pub episodes: u64,
    pub seed: u64,
}

const BEHAVIOR_PREFIX: &str = "behavior/";

/// Read a checkpoint and rebuild just the live policy net, for inference.
/// The optimizer moments and the behavior snapshot are left behind.
pub fn load_policy(path: &Path) -> Result<(CheckpointMeta, PolicyNet)> {
    let (meta, blocks): (CheckpointMeta, Vec<BlockData>) = read_checkpoint(path)?;
    let mut policy = PolicyNet::new(meta.policy.clone(), meta.seed)?;
    let policy_blocks: Vec<BlockData> =
        blocks.into_iter().filter(|b| !b.name.starts_with(BEHAVIOR_PREFIX)).collect();
    policy.apply_blocks(&policy_blocks)?;
    Ok((meta, policy))
}

#[derive(Debug)]
pub struct Trainer {
    pub policy: PolicyNet,
    /// Frozen snapshot used for warmups and rollouts.
    pub behavior: PolicyNet,
    pub optimizer: AdamW,
    pub episodes: u64,
    pub epochs_completed: u64,
    pub last_stage: Stage,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let policy = PolicyNet::new(cfg.policy.clone(), cfg.seed)?;
        let behavior = policy.clone();
        Ok(Self {
            policy,
            behavior,
            optimizer: AdamW::new(cfg.optimizer.clone())?,
            episodes: 0,
            epochs_completed: 0,
            last_stage: cfg.stage,
        })
    }

    /// Resume from a checkpoint.  The architecture in the config must match
    /// the checkpoint's; optimizer moments and counters carry over, so a
    /// later stage continues without resetting anything.
    pub fn from_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (meta, blocks): (CheckpointMeta, Vec<BlockData>) = read_checkpoint(path)?;
        if meta.policy != cfg.policy {
            return Err(Error::Checkpoint(format!(
                "checkpoint architecture differs from the configured one \
                 (checkpoint {:?} vs config {:?})",
                meta.policy, cfg.policy
            )));
        }
        let mut policy = PolicyNet::new(cfg.policy.clone(), cfg.seed)?;
        let mut behavior = policy.clone();
        let (behavior_blocks, policy_blocks): (Vec<BlockData>, Vec<BlockData>) =
            blocks.into_iter().partition(|b| b.name.starts_with(BEHAVIOR_PREFIX));
        policy.apply_blocks(&policy_blocks)?;
        let stripped: Vec<BlockData> = behavior_blocks
            .into_iter()
            .map(|mut b| {
                b.name = b.name[BEHAVIOR_PREFIX.len()..].to_string();
                b
            })
            .collect();
        behavior.apply_blocks(&stripped)?;
        let mut optimizer = AdamW::new(cfg.optimizer.clone())?;
        optimizer.step_count = meta.optimizer_steps;
        optimizer.skipped = meta.skipped_steps;
        Ok(Self {
            policy,
            behavior,
            optimizer,
            episodes: meta.episodes,
            epochs_completed: meta.epochs_completed,
            last_stage: meta.stage,
        })
    }

    pub fn save_checkpoint(&self, path: &Path, cfg: &TrainConfig) -> Result<()> {
        let meta = CheckpointMeta {
            policy: cfg.policy.clone(),
            optimizer: cfg.optimizer.clone(),
            stage: cfg.stage,
            epochs_completed: self.epochs_completed,
            optimizer_steps: self.optimizer.step_count,
            skipped_steps: self.optimizer.skipped,
            episodes: self.episodes,
            seed: cfg.seed,
        };
        let mut blocks = self.policy.to_blocks(true);
        for mut b in self.behavior.to_blocks(false) {
            b.name = format!("{BEHAVIOR_PREFIX}{}", b.name);
            blocks.push(b);
        }
        write_checkpoint(path, &meta, &blocks)
    }

    fn refresh_behavior_if_due(&mut self, cfg: &TrainConfig) {
        if self.episodes % cfg.behavior_refresh == 0 {
            self.behavior = self.policy.clone();
        }
    }

    /// One imitation epoch: `batches_per_epoch` updates of `batch_size`
    /// oracle episodes each.  Returns the epoch metrics (minus timing).
    pub fn il_epoch(&mut self, cfg: &TrainConfig, lr: f64) -> Result<EpochMetrics> {
        let mut loss_sum = 0.0;
        let mut episode_count = 0u64;
        let mut skipped = 0u64;
        let mut grad_norm = 0.0;
        for batch_idx in 0..cfg.batches_per_epoch {
            let mut size_rng =
                rng_from(&[cfg.seed, tag::SIZE, self.epochs_completed, batch_idx]);
            let n = size_rng.random_range(cfg.n_low..=cfg.n_high);
            let base_index = self.episodes * cfg.batch_size as u64;

            let behavior = &self.behavior;
            let episodes: Vec<Result<Option<IlEpisode>>> = (0..cfg.batch_size)
                .into_par_iter()
                .map(|idx| {
                    let instance_index = base_index + idx as u64;
                    let mut gen_rng = rng_from(&[cfg.seed, tag::GENERATE, instance_index]);
                    let instance =
                        generate_with_rng(n, &mut gen_rng, format!("train-{instance_index}"))?;
                    let mut warm_rng = rng_from(&[cfg.seed, tag::WARMUP, instance_index]);
                    let warm = warmup_state(&instance, behavior, &mut warm_rng)?;
                    let rollout =
                        match oracle_rollout_state(warm.state, cfg.lookahead, cfg.lookahead) {
                            Ok(r) => r,
                            // Teacher too expensive at this size: episode
                            // skipped, surfaced through the metrics.
                            Err(Error::SizeLimit(_)) => return Ok(None),
                            Err(e) => return Err(e),
                        };
                    let steps = rollout
                        .into_iter()
                        .map(|(s, r)| (s.tour.clone(), s.history.clone(), r.optimal_actions))
                        .collect();
                    Ok(Some(IlEpisode { instance, steps }))
                })
                .collect();

            let weight = 1.0 / cfg.batch_size as f64;
            for episode in episodes {
                let Some(episode) = episode? else {
                    skipped += 1;
                    continue;
                };
                let mut episode_loss = 0.0;
                for (tour, history, optimal) in &episode.steps {
                    let features = compute_features(&episode.instance, tour, history)?;
                    let (out, cache) = self.policy.forward(&features, history, false)?;
                    let lse = set_log_mass(&out, optimal);
                    episode_loss += -lse;
                    let n_tokens = features.n();
                    let mut d = Array2::zeros((n_tokens, n_tokens));
                    for &a in optimal {
                        d[[a.i, a.j]] = -(out.log_prob(a) - lse).exp() * weight;
                    }
                    self.policy.backward(&cache, &d);
                }
                loss_sum += episode_loss;
                episode_count += 1;
            }

            if let StepOutcome::Applied { grad_norm: g } =
                self.optimizer.step(self.policy.params_mut(), lr)
            {
                grad_norm = g;
            }
            self.episodes += 1;
            self.refresh_behavior_if_due(cfg);
        }
        Ok(EpochMetrics {
            stage: Stage::Il,
            epoch: self.epochs_completed,
            loss: if episode_count > 0 { loss_sum / episode_count as f64 } else { 0.0 },
            mean_reward: None,
            mean_best_cost: None,
            zero_signal_fraction: None,
            skipped_episodes: skipped,
            dropped_terms: 0,
            learning_rate: lr,
            grad_norm,
            seconds: 0.0,
        })
    }

    /// One reinforcement epoch: collect groups with the frozen behavior
    /// net, score them, and run the clipped PPO update(s).
    pub fn rl_epoch(&mut self, cfg: &TrainConfig, lr: f64) -> Result<EpochMetrics> {
        let mut loss_sum = 0.0;
        let mut update_count = 0u64;
        let mut reward_sum = 0.0;
        let mut member_count = 0u64;
        let mut best_cost_sum = 0.0;
        let mut group_count = 0u64;
        let mut zero_groups = 0u64;
        let mut dropped = 0u64;
        let mut grad_norm = 0.0;

        for batch_idx in 0..cfg.batches_per_epoch {
            let mut size_rng =
                rng_from(&[cfg.seed, tag::SIZE, self.epochs_completed, batch_idx]);
            let n = size_rng.random_range(cfg.n_low..=cfg.n_high);
            let base_index = self.episodes * cfg.batch_size as u64;

            let behavior = &self.behavior;
            let mut batches: Vec<GroupBatch> = (0..cfg.batch_size)
                .into_par_iter()
                .map(|idx| {
                    let instance_index = base_index + idx as u64;
                    let mut gen_rng = rng_from(&[cfg.seed, tag::GENERATE, instance_index]);
                    let instance =
                        generate_with_rng(n, &mut gen_rng, format!("train-{instance_index}"))?;
                    collect_group_rollouts(
                        instance,
                        behavior,
                        cfg,
                        instance_index,
                        RolloutDecode::Sample,
                    )
                })
                .collect::<Result<Vec<_>>>()?;

            for batch in batches.iter_mut() {
                compute_rewards_and_advantages(batch)?;
                for m in &batch.members {
                    reward_sum += m.reward;
                    member_count += 1;
                }
                best_cost_sum += batch.group_best_cost();
                group_count += 1;
                if batch.members.iter().all(|m| m.advantage == 0.0) || batch.t_best == 0 {
                    zero_groups += 1;
                }
            }
            normalize_step_advantages(&mut batches);

            let denom = (batches.len() * cfg.group_size * cfg.horizon) as f64;
            for _pass in 0..cfg.ppo_epochs {
                let mut term_sum = 0.0;
                for batch in &batches {
                    let stats =
                        ppo_accumulate(&mut self.policy, batch, cfg.ppo_clip, denom, true)?;
                    term_sum += stats.term_sum;
                    dropped += stats.dropped;
                }
                loss_sum += -term_sum / denom;
                update_count += 1;
                if let StepOutcome::Applied { grad_norm: g } =
                    self.optimizer.step(self.policy.params_mut(), lr)
                {
                    grad_norm = g;
                }
            }
            self.episodes += 1;
            self.refresh_behavior_if_due(cfg);
        }

        Ok(EpochMetrics {
            stage: Stage::Rl,
            epoch: self.epochs_completed,
            loss: if update_count > 0 { loss_sum / update_count as f64 } else { 0.0 },
            mean_reward: Some(reward_sum / member_count.max(1) as f64),
            mean_best_cost: Some(best_cost_sum / group_count.max(1) as f64),
            zero_signal_fraction: Some(zero_groups as f64 / group_count.max(1) as f64),
            skipped_episodes: 0,
            dropped_terms: dropped,
            learning_rate: lr,
            grad_norm,
            seconds: 0.0,
        })
    }
}

/// Run the configured stage for its epoch count, checkpointing after every
/// epoch and appending one metrics line per epoch to `metrics.jsonl`.
///
/// `resume` continues from an existing checkpoint (for RL after IL, or an
/// interrupted run); the decay schedule follows the global epoch counter,
/// so a later stage keeps decaying where the earlier one stopped.
pub fn train(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(path, cfg)?,
        None => Trainer::new(cfg)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file =
        std::fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;

    let mut all = Vec::with_capacity(cfg.epochs as usize);
    for _ in 0..cfg.epochs {
        let clock = Instant::now();
        let lr = cfg.optimizer.scheduled_lr(trainer.epochs_completed);
        let mut metrics = match cfg.stage {
            Stage::Il => trainer.il_epoch(cfg, lr)?,
            Stage::Rl => trainer.rl_epoch(cfg, lr)?,
        };
        trainer.epochs_completed += 1;
        metrics.seconds = clock.elapsed().as_secs_f64();

        let ckpt = out_dir.join(format!("epoch-{:04}.ckpt", trainer.epochs_completed));
        trainer.save_checkpoint(&ckpt, cfg)?;
        trainer.save_checkpoint(&out_dir.join("latest.ckpt"), cfg)?;

        let line = serde_json::to_string(&metrics)
            .map_err(|e| Error::InvalidInput(format!("metrics serialization failed: {e}")))?;
        writeln!(metrics_file, "{line}")?;
        on_epoch(&metrics);
        all.push(metrics);
    }
    Ok(all)
}
