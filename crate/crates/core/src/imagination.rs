//! Batched rollouts inside the learned world model.
//!
//! All rollouts and agents advance in lockstep, one sequence position at a
//! time, through the dynamics Transformer's key/value cache. The policy only
//! ever sees observations decoded from predicted tokens.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::behavior::{ActMode, Actor, BehaviorBatch, ObsStack};
use crate::dynamics::Slot;
use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::rng::{self, Rng};
use crate::tokenizer::ObsTokenizer;
use crate::world_model::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagineConfig {
    pub horizon: usize,
    pub rollouts: usize,
    /// Argmax instead of sampling for observation tokens.
    pub greedy_tokens: bool,
    /// Discount probability below this ends the imagined episode.
    pub termination_threshold: f64,
    pub avail_threshold: f64,
    /// Policy observation stack length.
    pub stack: usize,
}

impl Default for ImagineConfig {
    fn default() -> Self {
        Self { horizon: 15, rollouts: 600, greedy_tokens: false, termination_threshold: 0.5, avail_threshold: 0.5, stack: 5 }
    }
}

/// Where imagined actions come from.
pub enum ActionSource<'a> {
    Policy { actor: &'a Actor, mode: ActMode },
    /// Fixed actions `[t][r][agent]`.
    Recorded(&'a [usize]),
}

/// `H` imagined steps for `R` rollouts of `n` agents; arrays are `[t][r][agent]...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImaginedRollout {
    pub rollouts: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub tokens_per_obs: usize,
    pub input_dim: usize,
    pub tokens: Vec<usize>,
    pub recon_obs: Vec<f64>,
    pub policy_inputs: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub masks: Vec<bool>,
    pub rewards: Vec<f64>,
    /// Weight `γ̂`: 0 after a predicted termination, else `0.99·p`.
    pub discounts: Vec<f64>,
    pub alive: Vec<f64>,
}

impl ImaginedRollout {
    /// Training view: λ-targets exist for the first `H − 1` steps.
    pub fn to_behavior_batch(&self) -> Result<BehaviorBatch> {
        if self.horizon < 2 {
            return Err(Error::InvalidConfig("behavior learning needs an imagination horizon of at least 2".into()));
        }
        let s = self.horizon - 1;
        let per = self.rollouts * self.n_agents;
        Ok(BehaviorBatch {
            rollouts: self.rollouts,
            n_agents: self.n_agents,
            steps: s,
            input_dim: self.input_dim,
            n_actions: self.n_actions,
            inputs: self.policy_inputs.clone(),
            actions: self.actions[..s * per].to_vec(),
            masks: self.masks[..s * per * self.n_actions].to_vec(),
            old_log_probs: self.log_probs[..s * per].to_vec(),
            rewards: self.rewards[..s * per].to_vec(),
            discounts: self.discounts[..s * per].to_vec(),
            alive: self.alive[..s * per].to_vec(),
        })
    }

    pub fn obs_at(&self, t: usize, r: usize, i: usize) -> &[f64] {
        let o = ((t * self.rollouts + r) * self.n_agents + i) * self.obs_dim;
        &self.recon_obs[o..o + self.obs_dim]
    }
}

fn sample_token(logits: &[f64], greedy: bool, rng: &mut Rng) -> usize {
    if greedy {
        return (0..logits.len()).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
    }
    let mut p = logits.to_vec();
    kernels::log_softmax_row(&mut p);
    p.iter_mut().for_each(|x| *x = math::exp(*x));
    rng::categorical(rng, &p)
}

/// Forces the most likely action available when every entry was predicted unavailable.
pub fn repair_mask(probs: &[f64], threshold: f64) -> Vec<bool> {
    let mut m: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    if !m.iter().any(|&x| x) {
        let best = (0..probs.len()).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
        m[best] = true;
    }
    m
}

/// Rolls `cfg.horizon` steps from `init_obs` (`[r][agent][obs_dim]`) with masks `init_avail`.
pub fn imagine(
    wm: &WorldModel,
    tokenizer: &ObsTokenizer,
    source: ActionSource,
    init_obs: &[f64],
    init_avail: &[bool],
    cfg: &ImagineConfig,
    rng: &mut Rng,
) -> Result<ImaginedRollout> {
    let layout = wm.layout();
    let h = cfg.horizon;
    if h > layout.horizon {
        return Err(Error::ContextOverflow { steps: h, window: layout.horizon });
    }
    let n = wm.config.n_agents;
    let k = wm.config.tokens_per_obs;
    let na = wm.config.n_actions;
    let od = tokenizer.obs_dim();
    let r_n = init_obs.len() / (n * od);
    if r_n == 0 {
        return Err(Error::EmptyBuffer);
    }
    if init_avail.len() != r_n * n * na {
        return Err(Error::LengthMismatch("initial masks".into()));
    }
    if let ActionSource::Recorded(a) = &source {
        if a.len() < h * r_n * n {
            return Err(Error::LengthMismatch("recorded actions shorter than horizon".into()));
        }
    }
    let dynm = &wm.dynamics;
    let store = &wm.store;
    let ag = layout.agents;
    let spi = n / ag;
    let nb = r_n * spi;
    let dm = wm.config.d_model;
    let per = r_n * n;
    let stack_len = cfg.stack.max(1);

    let mut out = ImaginedRollout {
        rollouts: r_n,
        n_agents: n,
        horizon: h,
        obs_dim: od,
        n_actions: na,
        tokens_per_obs: k,
        input_dim: stack_len * od,
        tokens: Vec::with_capacity(h * per * k),
        recon_obs: Vec::with_capacity(h * per * od),
        policy_inputs: Vec::with_capacity(h * per * stack_len * od),
        actions: Vec::with_capacity(h * per),
        log_probs: Vec::with_capacity(h * per),
        masks: Vec::with_capacity(h * per * na),
        rewards: Vec::with_capacity(h * per),
        discounts: Vec::with_capacity(h * per),
        alive: Vec::with_capacity(h * per),
    };

    let mut tokens = tokenizer.encode_batch(init_obs)?;
    let mut avail = init_avail.to_vec();
    let mut alive = vec![1.0; per];
    let mut state = dynm.begin_decode(nb);
    let mut hidden: Vec<f64> = Vec::new();
    let mut stack: Option<ObsStack> = None;
    let mut x = vec![0.0; nb * dm];
    let seq_agent = |s_idx: usize, a: usize| s_idx * ag + a;

    for t in 0..h {
        // observation tokens
        for a in 0..ag {
            for kk in 0..k {
                if t > 0 {
                    let logits = dynm.token_head.infer(store, &hidden);
                    let v = logits.len() / nb;
                    for q in 0..nb {
                        let (r, s) = (q / spi, q % spi);
                        let i = seq_agent(s, a);
                        tokens[(r * n + i) * k + kk] = sample_token(&logits[q * v..(q + 1) * v], cfg.greedy_tokens, rng);
                    }
                }
                for q in 0..nb {
                    let (r, s) = (q / spi, q % spi);
                    let tok = tokens[(r * n + seq_agent(s, a)) * k + kk];
                    x[q * dm..(q + 1) * dm].copy_from_slice(wm.obs_embedding(tok));
                }
                debug_assert_eq!(layout.slot(state.len), Slot::Obs { agent: a, k: kk });
                hidden = dynm.decode_step(store, &mut state, &x)?;
            }
        }
        let recon = tokenizer.decode_batch(&tokens);
        match stack.as_mut() {
            None => stack = Some(ObsStack::new(stack_len, od, &recon)),
            Some(st) => st.push(&recon),
        }
        let st = stack.as_ref().unwrap();
        out.tokens.extend_from_slice(&tokens);
        out.recon_obs.extend_from_slice(&recon);
        out.policy_inputs.extend_from_slice(&st.data);
        out.masks.extend_from_slice(&avail);

        // actions
        let acts: Vec<(usize, f64)> = match &source {
            ActionSource::Policy { actor, mode } => actor.act_batch(&st.data, &avail, *mode, rng)?,
            ActionSource::Recorded(rec) => rec[t * per..(t + 1) * per].iter().map(|&a| (a, 0.0)).collect(),
        };
        let actions: Vec<usize> = acts.iter().map(|p| p.0).collect();
        out.actions.extend_from_slice(&actions);
        out.log_probs.extend(acts.iter().map(|p| p.1));
        for a in 0..ag {
            for q in 0..nb {
                let (r, s) = (q / spi, q % spi);
                x[q * dm..(q + 1) * dm].copy_from_slice(wm.act_embedding(actions[r * n + seq_agent(s, a)]));
            }
            hidden = dynm.decode_step(store, &mut state, &x)?;
        }

        // aggregated feature
        if layout.feature_slot {
            let feats = wm.aggregate(&tokens, &actions, r_n)?;
            for q in 0..nb {
                let (r, s) = (q / spi, q % spi);
                x[q * dm..(q + 1) * dm].copy_from_slice(&feats[(r * n + s) * dm..(r * n + s + 1) * dm]);
            }
            hidden = dynm.decode_step(store, &mut state, &x)?;
        }

        // reward, discount and next availability
        let rew = dynm.reward_head.infer(store, &hidden);
        let disc = dynm.discount_head.infer(store, &hidden);
        let av = dynm.avail_head.infer(store, &hidden);
        out.alive.extend_from_slice(&alive);
        for r in 0..r_n {
            for i in 0..n {
                let q = r * spi + i / ag;
                let a = i % ag;
                out.rewards.push(rew[q]);
                let p = math::sigmoid(disc[q]);
                let g = if p < cfg.termination_threshold { 0.0 } else { crate::env::CONTINUATION * p };
                out.discounts.push(g);
                if g == 0.0 {
                    alive[r * n + i] = 0.0;
                }
                let probs: Vec<f64> = av[(q * ag + a) * na..(q * ag + a + 1) * na].iter().map(|&l| math::sigmoid(l)).collect();
                avail[(r * n + i) * na..(r * n + i + 1) * na].copy_from_slice(&repair_mask(&probs, cfg.avail_threshold));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::{AggregatorConfig, AggregatorKind};
    use crate::behavior::{lambda_returns, Behavior, BehaviorConfig};
    use crate::tokenizer::BinsTokenizer;
    use crate::world_model::WorldModelConfig;

    fn setup(centralized: bool, kind: AggregatorKind) -> (WorldModel, ObsTokenizer) {
        let cfg = WorldModelConfig {
            n_agents: 2,
            vocab: 4,
            tokens_per_obs: 2,
            n_actions: 3,
            d_model: 16,
            layers: 1,
            heads: 2,
            horizon: 4,
            dropout: 0.0,
            centralized,
            aggregator: AggregatorConfig { kind, cross_heads: 2, inner_layers: 1, inner_heads: 2, head_dim: 4, self_attention_layers: 1, dropout: 0.0 },
        };
        let wm = WorldModel::new(cfg, &mut rng::seeded(3)).unwrap();
        let tok = ObsTokenizer::Bins(BinsTokenizer::new(4, vec![0.0, 0.0], vec![1.0, 1.0]));
        (wm, tok)
    }

    fn set_const_heads(wm: &mut WorldModel, token: usize, reward: f64, disc_logit: f64) {
        let d = wm.dynamics.clone();
        for (head, bias) in [
            (&d.token_head, (0..4).map(|j| if j == token { 5.0 } else { 0.0 }).collect::<Vec<_>>()),
            (&d.reward_head, vec![reward]),
            (&d.discount_head, vec![disc_logit]),
            (&d.avail_head, vec![5.0; d.avail_head.d_out()]),
        ] {
            let last = head.layers.last().unwrap();
            wm.store.value_mut(last.w).data.iter_mut().for_each(|x| *x = 0.0);
            wm.store.value_mut(last.b.unwrap()).data.copy_from_slice(&bias);
        }
    }

    #[test]
    fn hand_built_model_matches_analytic_rollout() {
        for (c, kind) in [(false, AggregatorKind::Perceiver), (true, AggregatorKind::None)] {
            let (mut wm, tok) = setup(c, kind);
            set_const_heads(&mut wm, 2, 0.3, 2.0);
            let actor = Actor::new(2 * 2, 8, 3, &mut rng::seeded(5));
            let cfg = ImagineConfig { horizon: 4, rollouts: 3, stack: 2, ..Default::default() };
            let init = vec![0.1; 3 * 2 * 2];
            let out = imagine(&wm, &tok, ActionSource::Policy { actor: &actor, mode: ActMode::Sample }, &init, &[true; 3 * 2 * 3], &cfg, &mut rng::seeded(6)).unwrap();
            let g = 0.99 * math::sigmoid(2.0);
            for t in 1..4 {
                for r in 0..3 {
                    for i in 0..2 {
                        assert_eq!(out.obs_at(t, r, i), &[0.625, 0.625]);
                    }
                }
            }
            assert!(out.rewards.iter().all(|&x| (x - 0.3).abs() < 1e-12));
            assert!(out.discounts.iter().all(|&x| (x - g).abs() < 1e-12));
            assert!(out.alive.iter().all(|&x| x == 1.0));
            let ret = lambda_returns(&[0.3; 3], &[g; 3], &[0.0; 4], 1.0).unwrap();
            assert!((ret[0] - (0.3 + g * 0.3 + g * g * 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn termination_masks_later_steps() {
        let (mut wm, tok) = setup(false, AggregatorKind::None);
        set_const_heads(&mut wm, 0, 0.0, -3.0);
        let cfg = ImagineConfig { horizon: 3, rollouts: 1, stack: 1, ..Default::default() };
        let rec = vec![0; 3 * 2];
        let out = imagine(&wm, &tok, ActionSource::Recorded(&rec), &[0.5; 4], &[true; 6], &cfg, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.alive, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(out.discounts.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn shapes_masks_and_policy_inputs() {
        for (c, kind) in [(false, AggregatorKind::Perceiver), (false, AggregatorKind::SelfAttention), (true, AggregatorKind::None)] {
            let (wm, tok) = setup(c, kind);
            let actor = Actor::new(2 * 3, 8, 3, &mut rng::seeded(1));
            let cfg = ImagineConfig { horizon: 4, rollouts: 5, stack: 3, ..Default::default() };
            let mut r = rng::seeded(2);
            let init: Vec<f64> = (0..5 * 2 * 2).map(|_| rng::uniform(&mut r)).collect();
            let mut avail = vec![true; 5 * 2 * 3];
            avail[1] = false;
            let out = imagine(&wm, &tok, ActionSource::Policy { actor: &actor, mode: ActMode::Sample }, &init, &avail, &cfg, &mut r).unwrap();
            assert_eq!(out.actions.len(), 4 * 5 * 2);
            for (j, &a) in out.actions.iter().enumerate() {
                assert!(out.masks[j * 3 + a]);
            }
            // every policy input row is a stack of decoded observations
            let recon: Vec<f64> = out.recon_obs.clone();
            for t in 0..4 {
                for j in 0..10 {
                    let row = &out.policy_inputs[(t * 10 + j) * 6..(t * 10 + j + 1) * 6];
                    assert_eq!(&row[4..6], &recon[(t * 10 + j) * 2..(t * 10 + j + 1) * 2]);
                }
            }
            let b = out.to_behavior_batch().unwrap();
            let mut beh = Behavior::new(BehaviorConfig { hidden: 8, stack: 3, ppo_epochs: 1, critic_heads: 2, ..Default::default() }, 2, 2, 3, &mut rng::seeded(9));
            beh.actor = actor.clone();
            beh.update(&b).unwrap();
        }
    }

    #[test]
    fn horizon_one_and_overflow() {
        let (wm, tok) = setup(false, AggregatorKind::Perceiver);
        let rec = vec![1; 2];
        let cfg = ImagineConfig { horizon: 1, rollouts: 1, stack: 1, ..Default::default() };
        let out = imagine(&wm, &tok, ActionSource::Recorded(&rec), &[0.2; 4], &[true; 6], &cfg, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.actions.len(), 2);
        assert_eq!(out.rewards.len(), 2);
        let cfg = ImagineConfig { horizon: 5, ..cfg };
        assert!(matches!(imagine(&wm, &tok, ActionSource::Recorded(&[0; 10]), &[0.2; 4], &[true; 6], &cfg, &mut rng::seeded(0)), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let (wm, tok) = setup(false, AggregatorKind::Perceiver);
        let cfg = ImagineConfig { horizon: 4, rollouts: 2, greedy_tokens: true, stack: 1, ..Default::default() };
        let rec = vec![2; 4 * 4];
        let run = |seed| imagine(&wm, &tok, ActionSource::Recorded(&rec), &[0.3; 8], &[true; 12], &cfg, &mut rng::seeded(seed)).unwrap();
        assert_eq!(run(1).tokens, run(2).tokens);
    }

    #[test]
    fn repaired_mask_never_empty() {
        assert_eq!(repair_mask(&[0.1, 0.3, 0.2], 0.5), vec![false, true, false]);
        assert_eq!(repair_mask(&[0.9, 0.3], 0.5), vec![true, false]);
    }
}
