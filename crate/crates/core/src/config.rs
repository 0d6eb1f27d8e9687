//! Run configuration. Every field has a default; unknown keys are rejected
//! at deserialization time.

use alloc::format;
use alloc::string::String;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, AggregatorKind};
use crate::behavior::BehaviorConfig;
use crate::env::{EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::imagination::ImagineConfig;
use crate::rng::{self, Stream};
use crate::tokenizer::VqConfig;
use crate::world_model::WorldModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Vq,
    Bins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Grid width for coop-switch, state dimension for coupled-chain.
    pub size: usize,
    pub episode_limit: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { kind: EnvKind::CoopSwitch, n_agents: 2, size: 5, episode_limit: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub kind: TokenizerKind,
    pub hidden: usize,
    pub tokens: usize,
    pub code_dim: usize,
    /// Codebook size; also the bin count of the bins tokenizer.
    pub codebook_size: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    /// Observations used to fit bin ranges.
    pub bins_fit_limit: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        let v = VqConfig::new(1);
        Self {
            kind: TokenizerKind::Vq,
            hidden: v.hidden,
            tokens: v.tokens,
            code_dim: v.code_dim,
            codebook_size: v.codebook_size,
            beta: v.beta,
            ema_decay: v.ema_decay,
            ema_eps: v.ema_eps,
            lr: 3e-4,
            weight_decay: 0.01,
            grad_clip: 10.0,
            batch_size: 256,
            bins_fit_limit: 1000,
        }
    }
}

/// How training segments are drawn from the buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSampling {
    /// Uniform over full windows; padding only for episodes shorter than the horizon.
    #[default]
    Valid,
    /// Uniform over start steps with padding past the episode end.
    TailPadded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    /// Segment length for training; bounds the imagination horizon.
    pub horizon: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub centralized: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub windows: WindowSampling,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            horizon: 15,
            d_model: 256,
            layers: 10,
            heads: 4,
            dropout: 0.1,
            centralized: false,
            lr: 1e-4,
            weight_decay: 0.01,
            grad_clip: 10.0,
            batch_size: 30,
            windows: WindowSampling::Valid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImaginationSection {
    pub horizon: usize,
    pub rollouts: usize,
    pub greedy_tokens: bool,
    pub termination_threshold: f64,
    pub avail_threshold: f64,
}

impl Default for ImaginationSection {
    fn default() -> Self {
        let d = ImagineConfig::default();
        Self { horizon: d.horizon, rollouts: d.rollouts, greedy_tokens: d.greedy_tokens, termination_threshold: d.termination_threshold, avail_threshold: d.avail_threshold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub total_env_steps: u64,
    /// Real transitions collected per outer epoch.
    pub transitions_per_epoch: usize,
    pub tokenizer_epochs: usize,
    pub world_model_epochs: usize,
    /// Imagination + PPO updates per outer epoch.
    pub policy_updates: usize,
    /// Env steps between greedy evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub buffer_capacity: usize,
    /// Leading env steps collected with a uniform policy over available actions.
    pub warmup_steps: u64,
    /// Stop early once the greedy evaluation reaches this success rate.
    pub target_success: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_env_steps: 100_000,
            transitions_per_epoch: 200,
            tokenizer_epochs: 200,
            world_model_epochs: 200,
            policy_updates: 4,
            eval_every: 1000,
            eval_episodes: 10,
            buffer_capacity: 50_000,
            warmup_steps: 0,
            target_success: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub tokenizer: TokenizerConfig,
    pub dynamics: DynamicsSection,
    pub aggregator: AggregatorConfig,
    pub imagination: ImaginationSection,
    pub behavior: BehaviorConfig,
    pub schedule: Schedule,
}

/// Policy-update count for an imagination horizon, scaling inversely with it.
pub fn policy_updates_for(horizon: usize) -> usize {
    match horizon {
        0..=5 => 30,
        6..=8 => 10,
        _ => 4,
    }
}

impl RunConfig {
    /// Small coop-switch setting that trains in minutes on one CPU core.
    pub fn desk_coop_switch(seed: u64) -> Self {
        Self {
            seed,
            env: EnvConfig::default(),
            tokenizer: TokenizerConfig { hidden: 64, tokens: 4, code_dim: 16, codebook_size: 64, batch_size: 64, lr: 1e-3, ..Default::default() },
            dynamics: DynamicsSection {
                horizon: 8,
                d_model: 32,
                layers: 2,
                heads: 2,
                dropout: 0.0,
                lr: 1e-3,
                batch_size: 16,
                windows: WindowSampling::TailPadded,
                ..Default::default()
            },
            aggregator: AggregatorConfig { cross_heads: 2, inner_layers: 1, inner_heads: 2, head_dim: 16, self_attention_layers: 1, dropout: 0.0, ..Default::default() },
            imagination: ImaginationSection { horizon: 8, rollouts: 64, ..Default::default() },
            behavior: BehaviorConfig { hidden: 64, critic_heads: 2, entropy_coef: 0.01, ..Default::default() },
            schedule: Schedule {
                total_env_steps: 20_000,
                transitions_per_epoch: 200,
                tokenizer_epochs: 20,
                world_model_epochs: 40,
                policy_updates: policy_updates_for(8),
                eval_every: 1000,
                warmup_steps: 5000,
                ..Default::default()
            },
        }
    }

    /// Small coupled-chain setting for the ablation studies.
    pub fn desk_coupled_chain(n_agents: usize, seed: u64) -> Self {
        let mut c = Self::desk_coop_switch(seed);
        c.env = EnvConfig { kind: EnvKind::CoupledChain, n_agents, size: 4, episode_limit: 50 };
        c.schedule.total_env_steps = 2000;
        c.schedule.eval_every = 0;
        c
    }

    pub fn env_spec(&self) -> EnvSpec {
        EnvSpec {
            kind: self.env.kind,
            n_agents: self.env.n_agents,
            size: self.env.size,
            episode_limit: self.env.episode_limit,
            seed: rng::derive_seed(self.seed, Stream::Env),
        }
    }

    pub fn vq_config(&self, obs_dim: usize) -> VqConfig {
        let t = &self.tokenizer;
        VqConfig { obs_dim, hidden: t.hidden, tokens: t.tokens, code_dim: t.code_dim, codebook_size: t.codebook_size, beta: t.beta, ema_decay: t.ema_decay, ema_eps: t.ema_eps }
    }

    pub fn world_model_config(&self, vocab: usize, tokens_per_obs: usize, n_actions: usize) -> WorldModelConfig {
        let d = &self.dynamics;
        WorldModelConfig {
            n_agents: self.env.n_agents,
            vocab,
            tokens_per_obs,
            n_actions,
            d_model: d.d_model,
            layers: d.layers,
            heads: d.heads,
            horizon: d.horizon,
            dropout: d.dropout,
            centralized: d.centralized,
            aggregator: self.aggregator.clone(),
        }
    }

    pub fn imagine_config(&self) -> ImagineConfig {
        let i = &self.imagination;
        ImagineConfig {
            horizon: i.horizon,
            rollouts: i.rollouts,
            greedy_tokens: i.greedy_tokens,
            termination_threshold: i.termination_threshold,
            avail_threshold: i.avail_threshold,
            stack: self.behavior.stack,
        }
    }

    /// Tokens per observation under the configured tokenizer.
    pub fn tokens_per_obs(&self) -> usize {
        match self.tokenizer.kind {
            TokenizerKind::Vq => self.tokenizer.tokens,
            TokenizerKind::Bins => self.env_spec().obs_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.env_spec().validate()?;
        let d = &self.dynamics;
        if d.heads == 0 || !d.d_model.is_multiple_of(d.heads) {
            return bad(format!("dynamics.d_model {} not divisible by dynamics.heads {}", d.d_model, d.heads));
        }
        if d.horizon == 0 || d.layers == 0 || d.batch_size == 0 {
            return bad("dynamics.horizon, layers and batch_size must be positive".into());
        }
        if self.imagination.horizon < 2 || self.imagination.horizon > d.horizon {
            return bad(format!("imagination.horizon {} must lie in 2..={}", self.imagination.horizon, d.horizon));
        }
        if self.imagination.rollouts == 0 {
            return bad("imagination.rollouts must be positive".into());
        }
        let t = &self.tokenizer;
        if t.tokens == 0 || t.code_dim == 0 || t.codebook_size < 2 || t.batch_size == 0 {
            return bad("tokenizer sizes must be positive and the codebook needs two entries".into());
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return bad("tokenizer.ema_decay must lie in [0, 1]".into());
        }
        if d.centralized && self.aggregator.kind != AggregatorKind::None {
            return bad("the centralized variant has no aggregation; set aggregator.kind = \"none\"".into());
        }
        if !(0.0..=1.0).contains(&self.behavior.lambda) {
            return bad("behavior.lambda must lie in [0, 1]".into());
        }
        let s = &self.schedule;
        if s.transitions_per_epoch == 0 || s.eval_episodes == 0 || s.buffer_capacity == 0 {
            return bad("schedule counts must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.tokenizer.tokens, c.tokenizer.codebook_size, c.tokenizer.code_dim), (16, 512, 128));
        assert_eq!((c.tokenizer.batch_size, c.dynamics.batch_size), (256, 30));
        assert_eq!((c.schedule.tokenizer_epochs, c.schedule.world_model_epochs), (200, 200));
        assert_eq!(c.behavior.ppo_epochs, 5);
        assert_eq!(c.imagination.rollouts, 600);
        assert!(c.validate().is_ok());
        assert!(RunConfig::desk_coop_switch(0).validate().is_ok());
        assert!(RunConfig::desk_coupled_chain(3, 0).validate().is_ok());
    }

    #[test]
    fn policy_updates_scale_inversely_with_horizon() {
        assert_eq!(policy_updates_for(15), 4);
        assert_eq!(policy_updates_for(8), 10);
        assert_eq!(policy_updates_for(5), 30);
    }

    #[test]
    fn centralized_with_aggregation_rejected() {
        let mut c = RunConfig::desk_coop_switch(0);
        c.dynamics.centralized = true;
        assert!(c.validate().is_err());
        c.aggregator.kind = AggregatorKind::None;
        assert!(c.validate().is_ok());
    }
}
