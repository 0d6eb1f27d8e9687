//! Causal Transformer over interleaved token sequences and its prediction heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Block, Embedding, FfKind, LayerCache, LayerNorm, Mlp};
use crate::params::ParamStore;
use crate::rng::Rng;

/// Position roles inside one timestep block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Obs { agent: usize, k: usize },
    Action { agent: usize },
    Feature,
}

/// Arrangement of one sequence: per step, every agent's observation tokens,
/// then every agent's action, then an optional aggregated-feature slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Agents whose tokens share one sequence (1 when decentralized).
    pub agents: usize,
    pub tokens: usize,
    pub feature_slot: bool,
    pub horizon: usize,
}

impl SequenceLayout {
    pub fn decentralized(tokens: usize, horizon: usize) -> Self {
        Self { agents: 1, tokens, feature_slot: true, horizon }
    }

    pub fn centralized(agents: usize, tokens: usize, horizon: usize) -> Self {
        Self { agents, tokens, feature_slot: false, horizon }
    }

    pub fn block_len(&self) -> usize {
        self.agents * (self.tokens + 1) + self.feature_slot as usize
    }

    pub fn len(&self) -> usize {
        self.horizon * self.block_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_pos(&self, t: usize, agent: usize, k: usize) -> usize {
        t * self.block_len() + agent * self.tokens + k
    }

    pub fn act_pos(&self, t: usize, agent: usize) -> usize {
        t * self.block_len() + self.agents * self.tokens + agent
    }

    /// Position whose output feeds the reward, discount and availability heads.
    pub fn read_pos(&self, t: usize) -> usize {
        (t + 1) * self.block_len() - 1
    }

    pub fn slot(&self, p: usize) -> Slot {
        let o = p % self.block_len();
        let obs = self.agents * self.tokens;
        if o < obs {
            Slot::Obs { agent: o / self.tokens, k: o % self.tokens }
        } else if o < obs + self.agents {
            Slot::Action { agent: o - obs }
        } else {
            Slot::Feature
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub vocab: usize,
    pub tokens_per_obs: usize,
    pub n_actions: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub horizon: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub config: DynamicsConfig,
    pub layout: SequenceLayout,
    pub obs_emb: Embedding,
    pub act_emb: Embedding,
    pub pos_emb: Embedding,
    /// Fills the feature slot when aggregation is off.
    pub null_feature: Option<Embedding>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub token_head: Mlp,
    pub reward_head: Mlp,
    pub discount_head: Mlp,
    pub avail_head: Mlp,
}

/// Hidden states of a full forward pass.
pub struct DynamicsTrace {
    /// `[batch * len, D]`
    pub hidden: Var,
    /// Causal attention node per layer.
    pub attention: Vec<Var>,
}

/// Incremental decoding state for a batch of sequences.
#[derive(Clone, Debug, Default)]
pub struct DecodeState {
    pub batch: usize,
    pub len: usize,
    pub caches: Vec<LayerCache>,
}

impl Dynamics {
    pub fn new(store: &mut ParamStore, config: DynamicsConfig, layout: SequenceLayout, null_feature: bool, rng: &mut Rng) -> Result<Self> {
        if !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::InvalidConfig(format!("d_model {} not divisible by heads {}", config.d_model, config.heads)));
        }
        let d = config.d_model;
        let hd = d / config.heads;
        let blocks = (0..config.layers).map(|l| Block::new(store, &format!("dyn.block{l}"), d, config.heads, hd, FfKind::Gelu, rng)).collect();
        Ok(Self {
            obs_emb: Embedding::new(store, "dyn.obs_emb", config.vocab, d, rng),
            act_emb: Embedding::new(store, "dyn.act_emb", config.n_actions, d, rng),
            pos_emb: Embedding::new(store, "dyn.pos_emb", layout.len(), d, rng),
            null_feature: null_feature.then(|| Embedding::new(store, "dyn.null_feature", 1, d, rng)),
            blocks,
            ln_f: LayerNorm::new(store, "dyn.ln_f", d),
            token_head: Mlp::new(store, "dyn.head.tokens", &[d, d, config.vocab], Activation::Relu, rng),
            reward_head: Mlp::new(store, "dyn.head.reward", &[d, d, 1], Activation::Relu, rng),
            discount_head: Mlp::new(store, "dyn.head.discount", &[d, d, 1], Activation::Relu, rng),
            avail_head: Mlp::new(store, "dyn.head.avail", &[d, d, layout.agents * config.n_actions], Activation::Relu, rng),
            config,
            layout,
        })
    }

    /// Causal pass over `x` (`[batch * len, D]`) of `len ≤ layout.len()` positions.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<DynamicsTrace> {
        if len > self.layout.len() {
            return Err(Error::ContextOverflow { steps: len.div_ceil(self.layout.block_len()), window: self.layout.horizon });
        }
        let pos_ids: Vec<usize> = (0..len).collect();
        let pos = self.pos_emb.forward(g, &pos_ids);
        let mut h = g.add_broadcast(x, pos);
        h = g.dropout(h, self.config.dropout);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, a) = blk.forward(g, h, batch, len, true, self.config.dropout);
            h = y;
            attention.push(a);
        }
        Ok(DynamicsTrace { hidden: self.ln_f.forward(g, h), attention })
    }

    pub fn begin_decode(&self, batch: usize) -> DecodeState {
        DecodeState { batch, len: 0, caches: vec![LayerCache::default(); self.blocks.len()] }
    }

    /// Feeds one embedded position per sequence and returns final hidden rows `[batch, D]`.
    pub fn decode_step(&self, store: &ParamStore, state: &mut DecodeState, x: &[f64]) -> Result<Vec<f64>> {
        if state.len >= self.layout.len() {
            return Err(Error::ContextOverflow { steps: self.layout.horizon + 1, window: self.layout.horizon });
        }
        let mut h = x.to_vec();
        let pos = self.pos_emb.row(store, state.len);
        for row in h.chunks_mut(self.config.d_model) {
            crate::kernels::axpy(row, 1.0, pos);
        }
        for (blk, cache) in self.blocks.iter().zip(state.caches.iter_mut()) {
            h = blk.infer_step(store, &h, state.batch, cache, state.len);
        }
        state.len += 1;
        Ok(self.ln_f.infer(store, &h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_positions() {
        let l = SequenceLayout::decentralized(16, 5);
        assert_eq!(l.len(), 90);
        assert_eq!(l.block_len(), 18);
        assert_eq!(l.slot(l.obs_pos(2, 0, 3)), Slot::Obs { agent: 0, k: 3 });
        assert_eq!(l.slot(l.act_pos(2, 0)), Slot::Action { agent: 0 });
        assert_eq!(l.slot(l.read_pos(2)), Slot::Feature);
        let c = SequenceLayout::centralized(3, 2, 4);
        assert_eq!(c.block_len(), 9);
        assert_eq!(c.slot(c.read_pos(0)), Slot::Action { agent: 2 });
        assert_eq!(c.slot(c.obs_pos(1, 2, 1)), Slot::Obs { agent: 2, k: 1 });
    }
}
