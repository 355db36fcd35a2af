//! The edge-attention policy network.
//!
//! Pipeline: embed the 14 raw feature columns per edge token (learned
//! coordinate embedding for both endpoints, then one projection to D)
//! → cycle-mix with the two tour-adjacent tokens → L self-attention encoder
//! blocks → fuse mean-pooled global context → score all token pairs with a
//! scaled dot product, clip with C·tanh, symmetrize → mask infeasible and
//! recently executed moves → masked softmax over the surviving cells.
//!
//! Every stage caches what its hand-written backward pass needs; the
//! backward contract is validated by finite differences in the tests.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{col, EdgeFeatureMatrix, HistoryBuffer, FEATURE_COLS};
use crate::nn::checkpoint::BlockData;
use crate::nn::{
    masked_log_softmax, masked_log_softmax_backward, norm_backward, norm_forward, Linear, MhaCache,
    MultiHeadAttention, NormCache, NormKind, Parameter, ParamModule,
};
use crate::rng::{rng_from, tag};
use crate::tsp::{feasible_moves, TwoOptMove};

/// Graph-context pooling over encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Architecture and masking hyperparameters.
///
/// The ablation switches (`heads`, `pooling`, `norm`, `use_history_feature`,
/// `use_recency_mask`) cover every architecture variant runnable from config
/// alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Encoder depth L.
    pub layers: usize,
    /// Token width D.
    pub model_dim: usize,
    /// Feed-forward hidden width H (also the cycle-mix hidden width).
    pub ffn_hidden: usize,
    pub heads: usize,
    /// Logit bound C in C·tanh(·).
    pub logit_clip: f64,
    /// History buffer capacity K_hist.
    pub history_capacity: usize,
    /// Recency-mask window m (last m moves become infeasible).
    pub recency_window: usize,
    /// Decoder query/key width; defaults to `model_dim` when absent.
    pub key_dim: Option<usize>,
    pub use_history_feature: bool,
    pub use_recency_mask: bool,
    pub pooling: Pooling,
    pub norm: NormKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            model_dim: 128,
            ffn_hidden: 128,
            heads: 8,
            logit_clip: 10.0,
            history_capacity: 16,
            recency_window: 8,
            key_dim: None,
            use_history_feature: true,
            use_recency_mask: true,
            pooling: Pooling::Mean,
            norm: NormKind::Rms,
        }
    }
}

impl PolicyConfig {
    pub fn key_dim(&self) -> usize {
        self.key_dim.unwrap_or(self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.model_dim == 0
            || self.ffn_hidden == 0
            || self.heads == 0
            || self.key_dim() == 0
        {
            return Err(Error::Config("all policy dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(self.logit_clip > 0.0) {
            return Err(Error::Config(format!(
                "logit_clip must be > 0, got {}",
                self.logit_clip
            )));
        }
        Ok(())
    }
}

/// The distribution over 2-opt moves for one state.
///
/// `logits` is the post-clip, post-symmetrization n×n matrix before masking;
/// live cells are the canonical i<j feasible cells minus recency blocks.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub logits: Array2<f64>,
    pub mask: Array2<bool>,
    pub log_probs: Array2<f64>,
}

impl PolicyOutput {
    pub fn n(&self) -> usize {
        self.logits.nrows()
    }

    pub fn live_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Live cells in lexicographic (i, j) order with their log-probabilities.
    pub fn live_cells(&self) -> impl Iterator<Item = (TwoOptMove, f64)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| {
            ((i + 1)..n).filter_map(move |j| {
                self.mask[[i, j]].then(|| (TwoOptMove::new(i, j), self.log_probs[[i, j]]))
            })
        })
    }

    /// −∞ for masked cells.
    pub fn log_prob(&self, mv: TwoOptMove) -> f64 {
        self.log_probs[[mv.i, mv.j]]
    }

    /// Exactly 0 for masked cells.
    pub fn prob(&self, mv: TwoOptMove) -> f64 {
        self.log_probs[[mv.i, mv.j]].exp()
    }

    /// Draw a live cell proportionally to its probability.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(TwoOptMove, f64)> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (mv, lp) in self.live_cells() {
            acc += lp.exp();
            last = Some((mv, lp));
            if u < acc {
                return Ok((mv, lp));
            }
        }
        // Accumulated probability can fall a few ulps short of 1.
        last.ok_or(Error::NoFeasibleAction)
    }

    /// Argmax with lowest-(i, j) lexicographic tie-break.
    pub fn greedy(&self) -> Result<(TwoOptMove, f64)> {
        let mut best: Option<(TwoOptMove, f64)> = None;
        for (mv, lp) in self.live_cells() {
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((mv, lp));
            }
        }
        best.ok_or(Error::NoFeasibleAction)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    ffn_w1: Parameter,
    ffn_w2: Parameter,
}

/// Forward activations for one encoder block.
pub struct BlockCache {
    attn: MhaCache,
    norm1: NormCache,
    /// Input to the feed-forward sublayer (output of the first norm).
    h_mid: Array2<f64>,
    /// Feed-forward pre-activation.
    ffn_pre: Array2<f64>,
    norm2: NormCache,
}

pub struct EmbedCache {
    u_coords: Array2<f64>,
    v_coords: Array2<f64>,
    concat: Array2<f64>,
}

pub struct MixCache {
    z: Array2<f64>,
    pre: Array2<f64>,
    phi: Array2<f64>,
}

pub struct CtxCache {
    h_enc: Array2<f64>,
    /// Pooled context, 1×D.
    c: Array2<f64>,
    /// Row index of the per-column maximum (max pooling only).
    argmax: Option<Vec<usize>>,
}

pub struct DecCache {
    h_tilde: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    /// tanh of the scaled dot products, cached for the clip derivative.
    t: Array2<f64>,
}

/// Everything `backward` needs from one forward pass.
pub struct PolicyCache {
    embed: EmbedCache,
    mix: MixCache,
    blocks: Vec<BlockCache>,
    ctx: CtxCache,
    dec: DecCache,
    mask: Array2<bool>,
    log_probs: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    cfg: PolicyConfig,
    /// Shared 2→D coordinate embedding applied to both edge endpoints.
    node_embed: Parameter,
    /// (2D+10)→D projection of the concatenated token.
    token_proj: Linear,
    /// Cycle-mix gate α (1×1) and its 3D→H→D feed-forward net.
    mix_gate: Parameter,
    mix_w1: Parameter,
    mix_w2: Parameter,
    blocks: Vec<EncoderBlock>,
    local_map: Parameter,
    global_map: Parameter,
    query_map: Parameter,
    key_map: Parameter,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ½(x + xᵀ).
pub(crate) fn symmetrize(x: &Array2<f64>) -> Array2<f64> {
    0.5 * (x + &x.t())
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(&[seed, tag::INIT]);
        let d = cfg.model_dim;
        let h = cfg.ffn_hidden;
        let dk = cfg.key_dim();
        let blocks = (0..cfg.layers)
            .map(|l| {
                Ok(EncoderBlock {
                    attn: MultiHeadAttention::new(&format!("enc{l}.attn"), d, cfg.heads, &mut rng)?,
                    ffn_w1: Parameter::uniform(format!("enc{l}.ffn.w1"), d, h, &mut rng),
                    ffn_w2: Parameter::uniform(format!("enc{l}.ffn.w2"), h, d, &mut rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            node_embed: Parameter::uniform("node_embed", 2, d, &mut rng),
            token_proj: Linear::new("token_proj", 2 * d + 10, d, true, &mut rng),
            mix_gate: Parameter::constant("mix.gate", 1, 1, 0.1),
            mix_w1: Parameter::uniform("mix.w1", 3 * d, h, &mut rng),
            mix_w2: Parameter::uniform("mix.w2", h, d, &mut rng),
            blocks,
            local_map: Parameter::uniform("head.local", d, d, &mut rng),
            global_map: Parameter::uniform("head.global", d, d, &mut rng),
            query_map: Parameter::uniform("head.query", d, dk, &mut rng),
            key_map: Parameter::uniform("head.key", d, dk, &mut rng),
            cfg,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// Learned embedding of both endpoints plus the raw scalar columns,
    /// projected to D.
    pub fn embed_tokens(&self, features: &EdgeFeatureMatrix) -> Result<(Array2<f64>, EmbedCache)> {
        let f = features.as_array();
        let n = f.nrows();
        let d = self.cfg.model_dim;
        let u_coords = f.slice(s![.., col::UX..=col::UY]).to_owned();
        let v_coords = f.slice(s![.., col::VX..=col::VY]).to_owned();
        let u_emb = u_coords.dot(&self.node_embed.value);
        let v_emb = v_coords.dot(&self.node_embed.value);

        let mut concat = Array2::zeros((n, 2 * d + 10));
        concat.slice_mut(s![.., 0..d]).assign(&u_emb);
        concat.slice_mut(s![.., d..2 * d]).assign(&v_emb);
        let scalars = f.slice(s![.., col::LEN..FEATURE_COLS]);
        concat.slice_mut(s![.., 2 * d..]).assign(&scalars);
        if !self.cfg.use_history_feature {
            concat.column_mut(2 * d + (col::HIST - col::LEN)).fill(0.0);
        }
        let out = self.token_proj.forward(&concat)?;
        Ok((out, EmbedCache { u_coords, v_coords, concat }))
    }

    fn embed_backward(&mut self, cache: &EmbedCache, d_out: &Array2<f64>) {
        let d = self.cfg.model_dim;
        let d_concat = self.token_proj.backward(&cache.concat, d_out);
        let du = d_concat.slice(s![.., 0..d]);
        let dv = d_concat.slice(s![.., d..2 * d]);
        self.node_embed.grad += &cache.u_coords.t().dot(&du);
        self.node_embed.grad += &cache.v_coords.t().dot(&dv);
    }

    /// h_k ← h_k + α·φ([h_{k−1}, h_k, h_{k+1}]) with cyclic neighbors.
    pub fn cycle_mix(&self, h: &Array2<f64>) -> (Array2<f64>, MixCache) {
        let (n, d) = h.dim();
        let mut z = Array2::zeros((n, 3 * d));
        for k in 0..n {
            let prev = (k + n - 1) % n;
            let next = (k + 1) % n;
            z.slice_mut(s![k, 0..d]).assign(&h.row(prev));
            z.slice_mut(s![k, d..2 * d]).assign(&h.row(k));
            z.slice_mut(s![k, 2 * d..]).assign(&h.row(next));
        }
        let pre = z.dot(&self.mix_w1.value);
        let phi = relu(&pre).dot(&self.mix_w2.value);
        let alpha = self.mix_gate.value[[0, 0]];
        let out = h + &(alpha * &phi);
        (out, MixCache { z, pre, phi })
    }

    fn cycle_mix_backward(&mut self, cache: &MixCache, dy: &Array2<f64>) -> Array2<f64> {
        let (n, td) = cache.z.dim();
        let d = td / 3;
        let alpha = self.mix_gate.value[[0, 0]];

        self.mix_gate.grad[[0, 0]] += (dy * &cache.phi).sum();
        let dphi = alpha * dy;
        let hidden = relu(&cache.pre);
        self.mix_w2.grad += &hidden.t().dot(&dphi);
        let mut dpre = dphi.dot(&self.mix_w2.value.t());
        dpre.zip_mut_with(&cache.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        self.mix_w1.grad += &cache.z.t().dot(&dpre);
        let dz = dpre.dot(&self.mix_w1.value.t());

        let mut dh = dy.clone();
        for k in 0..n {
            let prev = (k + n - 1) % n;
            let next = (k + 1) % n;
            for c in 0..d {
                dh[[prev, c]] += dz[[k, c]];
                dh[[k, c]] += dz[[k, d + c]];
                dh[[next, c]] += dz[[k, 2 * d + c]];
            }
        }
        dh
    }

    /// L blocks of h ← Norm(h + MHA(h)); h ← Norm(h + FFN(h)).
    pub fn encode(&self, h: &Array2<f64>) -> (Array2<f64>, Vec<BlockCache>) {
        let mut h = h.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (attn_out, attn_cache) = block.attn.forward(&h);
            let (h_mid, norm1) = norm_forward(self.cfg.norm, &(&h + &attn_out));
            let ffn_pre = h_mid.dot(&block.ffn_w1.value);
            let ffn_out = relu(&ffn_pre).dot(&block.ffn_w2.value);
            let (h_out, norm2) = norm_forward(self.cfg.norm, &(&h_mid + &ffn_out));
            caches.push(BlockCache { attn: attn_cache, norm1, h_mid, ffn_pre, norm2 });
            h = h_out;
        }
        (h, caches)
    }

    fn encode_backward(&mut self, caches: &[BlockCache], dy: &Array2<f64>) -> Array2<f64> {
        let mut dh = dy.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches.iter()).rev() {
            let d_sum2 = norm_backward(&cache.norm2, &dh);
            // h_out_pre = h_mid + ffn(h_mid): both paths receive d_sum2.
            let hidden = relu(&cache.ffn_pre);
            block.ffn_w2.grad += &hidden.t().dot(&d_sum2);
            let mut dpre = d_sum2.dot(&block.ffn_w2.value.t());
            dpre.zip_mut_with(&cache.ffn_pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            block.ffn_w1.grad += &cache.h_mid.t().dot(&dpre);
            let d_mid = &d_sum2 + &dpre.dot(&block.ffn_w1.value.t());

            let d_sum1 = norm_backward(&cache.norm1, &d_mid);
            let d_attn_in = block.attn.backward(&cache.attn, &d_sum1);
            dh = &d_sum1 + &d_attn_in;
        }
        dh
    }

    /// h̃_k = h_k·W_loc + c·W_glob with c pooled over tokens.
    pub fn global_context(&self, h: &Array2<f64>) -> (Array2<f64>, CtxCache) {
        let (n, d) = h.dim();
        let (c, argmax) = match self.cfg.pooling {
            Pooling::Mean => {
                (h.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)), None)
            }
            Pooling::Max => {
                let mut c = Array2::from_elem((1, d), f64::NEG_INFINITY);
                let mut arg = vec![0usize; d];
                for r in 0..n {
                    for col in 0..d {
                        if h[[r, col]] > c[[0, col]] {
                            c[[0, col]] = h[[r, col]];
                            arg[col] = r;
                        }
                    }
                }
                (c, Some(arg))
            }
        };
        let glob = c.dot(&self.global_map.value);
        let mut out = h.dot(&self.local_map.value);
        out += &glob;
        (out, CtxCache { h_enc: h.clone(), c, argmax })
    }

    fn global_context_backward(&mut self, cache: &CtxCache, dy: &Array2<f64>) -> Array2<f64> {
        let (n, _) = cache.h_enc.dim();
        self.local_map.grad += &cache.h_enc.t().dot(dy);
        let mut dh = dy.dot(&self.local_map.value.t());

        let dsum = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.global_map.grad += &cache.c.t().dot(&dsum);
        let dc = dsum.dot(&self.global_map.value.t());
        match &cache.argmax {
            None => {
                let spread = &dc / n as f64;
                dh += &spread;
            }
            Some(arg) => {
                for (col, &r) in arg.iter().enumerate() {
                    dh[[r, col]] += dc[[0, col]];
                }
            }
        }
        dh
    }

    /// ℓ_ij = C·tanh(⟨W_Q h̃_i, W_K h̃_j⟩/√d_key), then symmetrized.
    pub fn pairwise_logits(&self, h_tilde: &Array2<f64>) -> (Array2<f64>, DecCache) {
        let dk = self.cfg.key_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let q = h_tilde.dot(&self.query_map.value);
        let k = h_tilde.dot(&self.key_map.value);
        let t = (q.dot(&k.t()) * scale).mapv(f64::tanh);
        let logits = symmetrize(&(self.cfg.logit_clip * &t));
        (logits, DecCache { h_tilde: h_tilde.clone(), q, k, t })
    }

    fn pairwise_backward(&mut self, cache: &DecCache, d_logits: &Array2<f64>) -> Array2<f64> {
        let dk = self.cfg.key_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let c = self.cfg.logit_clip;
        // Symmetrization and the tanh clip, in reverse.
        let d_clip = symmetrize(d_logits);
        let d_raw = d_clip * &cache.t.mapv(|t| c * (1.0 - t * t));
        let dq = d_raw.dot(&cache.k) * scale;
        let dkm = d_raw.t().dot(&cache.q) * scale;
        self.query_map.grad += &cache.h_tilde.t().dot(&dq);
        self.key_map.grad += &cache.h_tilde.t().dot(&dkm);
        dq.dot(&self.query_map.value.t()) + dkm.dot(&self.key_map.value.t())
    }

    /// Canonical i<j feasible cells, minus the last `recency_window` moves
    /// (and their transposes) when the recency mask is active.
    pub fn action_mask(
        &self,
        n: usize,
        history: &HistoryBuffer,
        recency_active: bool,
    ) -> Array2<bool> {
        let mut mask = Array2::from_elem((n, n), false);
        for mv in feasible_moves(n) {
            mask[[mv.i, mv.j]] = true;
        }
        if recency_active && self.cfg.use_recency_mask {
            for mv in history.recent(self.cfg.recency_window) {
                if mv.i < n && mv.j < n {
                    mask[[mv.i, mv.j]] = false;
                    mask[[mv.j, mv.i]] = false;
                }
            }
        }
        mask
    }

    /// Full forward pass.  `recency_active` is false during imitation
    /// learning and true for warmup, RL, and evaluation.
    pub fn forward(
        &self,
        features: &EdgeFeatureMatrix,
        history: &HistoryBuffer,
        recency_active: bool,
    ) -> Result<(PolicyOutput, PolicyCache)> {
        let n = features.n();
        let (tokens, embed) = self.embed_tokens(features)?;
        let (mixed, mix) = self.cycle_mix(&tokens);
        let (encoded, blocks) = self.encode(&mixed);
        let (h_tilde, ctx) = self.global_context(&encoded);
        let (logits, dec) = self.pairwise_logits(&h_tilde);
        let mask = self.action_mask(n, history, recency_active);
        let log_probs = masked_log_softmax(&logits, &mask)?;
        let output = PolicyOutput { logits, mask: mask.clone(), log_probs: log_probs.clone() };
        let cache = PolicyCache { embed, mix, blocks, ctx, dec, mask, log_probs };
        Ok((output, cache))
    }

    /// Accumulate gradients for an upstream gradient on the log-probability
    /// matrix (entries at masked cells are ignored).
    pub fn backward(&mut self, cache: &PolicyCache, d_log_probs: &Array2<f64>) {
        let d_logits = masked_log_softmax_backward(&cache.log_probs, &cache.mask, d_log_probs);
        let d_h_tilde = self.pairwise_backward(&cache.dec, &d_logits);
        let d_enc = self.global_context_backward(&cache.ctx, &d_h_tilde);
        let d_mixed = self.encode_backward(&cache.blocks, &d_enc);
        let d_tokens = self.cycle_mix_backward(&cache.mix, &d_mixed);
        self.embed_backward(&cache.embed, &d_tokens);
    }

    /// Parameter blocks for checkpointing, in stable declaration order.
    pub fn to_blocks(&self, with_moments: bool) -> Vec<BlockData> {
        self.params()
            .into_iter()
            .map(|p| BlockData::from_parameter(p, with_moments))
            .collect()
    }

    /// Restore parameters (and moments, when present) from checkpoint
    /// blocks.  Every parameter must be covered exactly once.
    pub fn apply_blocks(&mut self, blocks: &[BlockData]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &BlockData> =
            blocks.iter().map(|b| (b.name.as_str(), b)).collect();
        if by_name.len() != blocks.len() {
            return Err(Error::Checkpoint("duplicate block names".into()));
        }
        let mut params = self.params_mut();
        if params.len() != blocks.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks but the model has {} parameters",
                blocks.len(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let block = by_name.get(p.name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("missing block for parameter `{}`", p.name))
            })?;
            block.apply_to(p)?;
        }
        Ok(())
    }
}

impl ParamModule for PolicyNet {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.node_embed];
        out.extend(self.token_proj.params());
        out.push(&self.mix_gate);
        out.push(&self.mix_w1);
        out.push(&self.mix_w2);
        for b in &self.blocks {
            out.extend(b.attn.params());
            out.push(&b.ffn_w1);
            out.push(&b.ffn_w2);
        }
        out.push(&self.local_map);
        out.push(&self.global_map);
        out.push(&self.query_map);
        out.push(&self.key_map);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.node_embed];
        out.extend(self.token_proj.params_mut());
        out.push(&mut self.mix_gate);
        out.push(&mut self.mix_w1);
        out.push(&mut self.mix_w2);
        for b in &mut self.blocks {
            out.extend(b.attn.params_mut());
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_w2);
        }
        out.push(&mut self.local_map);
        out.push(&mut self.global_map);
        out.push(&mut self.query_map);
        out.push(&mut self.key_map);
        out
    }
}
