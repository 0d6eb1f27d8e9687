//! Actor-critic trained on imagined rollouts.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PpoBatch, Var};
use crate::kernels;
use crate::math;
use crate::nn::{Activation, Attention, Embedding, Init, LayerNorm, Linear, Mlp};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Gradients, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Which critic value the λ-recursion mixes in at step `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// `V(ô_t)`, as the recursion is literally written.
    Current,
    /// `V(ô_{t+1})`.
    Next,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub hidden: usize,
    pub stack: usize,
    pub lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub ppo_epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub normalize_advantages: bool,
    pub bootstrap: Bootstrap,
    pub critic_heads: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            stack: 5,
            lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.001,
            ppo_epochs: 5,
            lr: 5e-4,
            grad_clip: 100.0,
            normalize_advantages: false,
            bootstrap: Bootstrap::Current,
            critic_heads: 4,
        }
    }
}

/// `V_λ(t) = r_t + γ_t[(1−λ)v_t + λ V_λ(t+1)]`, `V_λ(T) = v_T`.
/// `rewards` and `discounts` have length `T`, `values` length `T + 1`;
/// the returned vector has length `T + 1`.
pub fn lambda_returns(rewards: &[f64], discounts: &[f64], values: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let t_len = rewards.len();
    if discounts.len() != t_len || values.len() != t_len + 1 {
        return Err(Error::LengthMismatch(alloc::format!("rewards {t_len}, discounts {}, values {}", discounts.len(), values.len())));
    }
    let mut out = vec![0.0; t_len + 1];
    out[t_len] = values[t_len];
    for t in (0..t_len).rev() {
        out[t] = rewards[t] + discounts[t] * ((1.0 - lambda) * values[t] + lambda * out[t + 1]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// Probabilities of the masked softmax over `logits`.
pub fn masked_probs(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    let mut p = vec![0.0; logits.len()];
    kernels::masked_softmax(logits, mask, &mut p);
    Ok(p)
}

/// Picks an action from masked logits; returns `(action, log π(action))`.
pub fn act(logits: &[f64], mask: &[bool], mode: ActMode, rng: &mut Rng) -> Result<(usize, f64)> {
    let p = masked_probs(logits, mask)?;
    let a = match mode {
        ActMode::Greedy => {
            let mut best = None;
            for (j, (&l, &m)) in logits.iter().zip(mask).enumerate() {
                if m && best.is_none_or(|b: usize| l > logits[b]) {
                    best = Some(j);
                }
            }
            best.unwrap()
        }
        ActMode::Sample => rng::categorical(rng, &p),
    };
    Ok((a, math::ln(p[a])))
}

/// Entropy of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum::<f64>()
}

/// Clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Shared actor over stacked reconstructed observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub store: ParamStore,
    pub net: Mlp,
    pub n_actions: usize,
}

impl Actor {
    pub fn new(input: usize, hidden: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "actor", &[input, hidden, hidden, n_actions], Activation::Relu, rng);
        Self { store, net, n_actions }
    }

    pub fn input_dim(&self) -> usize {
        self.net.d_in()
    }

    /// Logits for `[M, input]` rows.
    pub fn logits(&self, inputs: &[f64]) -> Vec<f64> {
        self.net.infer(&self.store, inputs)
    }

    /// Actions for each row given masks `[M][A]` flattened.
    pub fn act_batch(&self, inputs: &[f64], masks: &[bool], mode: ActMode, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
        let logits = self.logits(inputs);
        let a = self.n_actions;
        (0..logits.len() / a).map(|r| act(&logits[r * a..(r + 1) * a], &masks[r * a..(r + 1) * a], mode, rng)).collect()
    }
}

/// Per-agent MLP encoder, agent-id embedding and one self-attention layer across agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub store: ParamStore,
    pub encoder: Mlp,
    pub agent_emb: Embedding,
    pub ln: LayerNorm,
    pub attn: Attention,
    pub head: Linear,
    pub n_agents: usize,
}

impl Critic {
    pub fn new(input: usize, hidden: usize, n_agents: usize, heads: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let heads = heads.max(1);
        let hd = (hidden / heads).max(1);
        Self {
            encoder: Mlp::new(&mut store, "critic.enc", &[input, hidden, hidden, hidden], Activation::Relu, rng),
            agent_emb: Embedding::new(&mut store, "critic.agent_emb", n_agents, hidden, rng),
            ln: LayerNorm::new(&mut store, "critic.ln", hidden),
            attn: Attention::new(&mut store, "critic.attn", hidden, heads, hd, rng),
            head: Linear::new(&mut store, "critic.head", hidden, 1, true, Init::FanIn, rng),
            n_agents,
            store,
        }
    }

    /// Values `[batch * n]` for joint inputs `[batch * n, input]` (agent-minor).
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Var {
        let h = self.encoder.forward(g, x);
        let h = g.relu(h);
        let ids: Vec<usize> = (0..self.n_agents).collect();
        let ae = self.agent_emb.forward(g, &ids);
        let h = g.add_broadcast(h, ae);
        let hn = self.ln.forward(g, h);
        let (a, _) = self.attn.self_attend(g, hn, batch, self.n_agents, false, 0.0);
        let h = g.add(h, a);
        let h = g.relu(h);
        self.head.forward(g, h)
    }

    pub fn values(&self, inputs: &[f64], batch: usize) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let x = g.input(Tensor::from_vec(&[batch * self.n_agents, inputs.len() / (batch * self.n_agents)], inputs.to_vec()));
        let v = self.forward(&mut g, x, batch);
        g.value(v).data.clone()
    }
}

/// Flattened training data of one imagination phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorBatch {
    pub rollouts: usize,
    pub n_agents: usize,
    /// Steps with a λ-target (imagined horizon minus one).
    pub steps: usize,
    pub input_dim: usize,
    pub n_actions: usize,
    /// `[t][r][i][input]` for `t` in `0..=steps`.
    pub inputs: Vec<f64>,
    /// `[t][r][i]` for `t < steps`.
    pub actions: Vec<usize>,
    pub masks: Vec<bool>,
    pub old_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub discounts: Vec<f64>,
    /// Loss weight: 1 while the imagined episode has not terminated.
    pub alive: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
}

/// Actor, critic and their optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Behavior {
    pub config: BehaviorConfig,
    pub actor: Actor,
    pub critic: Critic,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Behavior {
    pub fn new(config: BehaviorConfig, obs_dim: usize, n_agents: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let input = obs_dim * config.stack.max(1);
        let actor = Actor::new(input, config.hidden, n_actions, rng);
        let critic = Critic::new(input, config.hidden, n_agents, config.critic_heads, rng);
        let opt = AdamConfig::adam(config.lr, config.grad_clip);
        Self { actor_opt: Adam::new(opt, &actor.store), critic_opt: Adam::new(opt, &critic.store), config, actor, critic }
    }

    /// λ-targets `[t][r][i]` for `t < steps` and the critic values `[t][r][i]` for `t ≤ steps`.
    pub fn targets(&self, b: &BehaviorBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        let (r_n, n, s) = (b.rollouts, b.n_agents, b.steps);
        let per = r_n * n;
        let values = self.critic.values(&b.inputs, r_n * (s + 1));
        let mut targets = vec![0.0; s * per];
        let mut rew = vec![0.0; s];
        let mut disc = vec![0.0; s];
        let mut vals = vec![0.0; s + 1];
        for j in 0..per {
            for t in 0..s {
                rew[t] = b.rewards[t * per + j];
                disc[t] = b.discounts[t * per + j];
            }
            for t in 0..=s {
                vals[t] = match self.config.bootstrap {
                    Bootstrap::Current => values[t * per + j],
                    Bootstrap::Next => values[(t + 1).min(s) * per + j],
                };
            }
            let ret = lambda_returns(&rew, &disc, &vals, self.config.lambda)?;
            for t in 0..s {
                targets[t * per + j] = ret[t];
            }
        }
        Ok((targets, values))
    }

    /// Critic regression then PPO epochs on one imagined batch.
    pub fn update(&mut self, b: &BehaviorBatch) -> Result<BehaviorStats> {
        let (targets, values) = self.targets(b)?;
        let per = b.rollouts * b.n_agents;
        let m = b.steps * per;
        let weight_sum: f64 = b.alive.iter().sum::<f64>().max(1.0);
        let mut adv: Vec<f64> = (0..m).map(|k| targets[k] - values[k]).collect();
        if self.config.normalize_advantages {
            let mean = adv.iter().zip(&b.alive).map(|(a, w)| a * w).sum::<f64>() / weight_sum;
            let var = adv.iter().zip(&b.alive).map(|(a, w)| w * (a - mean) * (a - mean)).sum::<f64>() / weight_sum;
            let sd = math::sqrt(var) + 1e-8;
            adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
        }
        let inputs_t = Tensor::from_vec(&[m, b.input_dim], b.inputs[..m * b.input_dim].to_vec());
        let w: Vec<f64> = b.alive.iter().map(|a| a / weight_sum).collect();

        // critic
        let critic_loss = {
            let mut g = Graph::new(&self.critic.store);
            let x = g.input(inputs_t.clone());
            let v = self.critic.forward(&mut g, x, b.rollouts * b.steps);
            let l = g.squared_error(v, &targets, &w);
            let lv = g.value(l).item();
            let mut grads = g.backward(l).params;
            drop(g);
            check_grads(&grads, "critic")?;
            self.critic_opt.step(&mut self.critic.store, &mut grads);
            lv
        };

        // actor
        let mut objective = 0.0;
        for _ in 0..self.config.ppo_epochs.max(1) {
            let mut g = Graph::new(&self.actor.store);
            let x = g.input(inputs_t.clone());
            let logits = self.actor.net.forward(&mut g, x);
            let batch = PpoBatch {
                masks: b.masks.clone(),
                actions: b.actions.clone(),
                old_log_probs: b.old_log_probs.clone(),
                advantages: adv.clone(),
                weights: w.clone(),
                clip_eps: self.config.clip_eps,
                entropy_coef: self.config.entropy_coef,
            };
            let obj = g.ppo_objective(logits, batch);
            let loss = g.scale(obj, -1.0);
            objective = g.value(obj).item();
            let mut grads: Gradients = g.backward(loss).params;
            drop(g);
            check_grads(&grads, "actor")?;
            self.actor_opt.step(&mut self.actor.store, &mut grads);
        }
        let logits = self.actor.logits(&inputs_t.data);
        let a = b.n_actions;
        let ent = (0..m).map(|r| entropy(&masked_probs(&logits[r * a..(r + 1) * a], &b.masks[r * a..(r + 1) * a]).unwrap_or_default()) * w[r]).sum();
        Ok(BehaviorStats {
            critic_loss,
            actor_objective: objective,
            entropy: ent,
            mean_return: targets.iter().zip(&w).map(|(t, w)| t * w).sum(),
            mean_reward: b.rewards.iter().zip(&w).map(|(t, w)| t * w).sum(),
        })
    }
}

fn check_grads(g: &Gradients, phase: &str) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::NanLoss { phase: phase.into(), detail: "non-finite gradient".into() })
    }
}

/// Sliding window of the last `stack` observations for each agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsStack {
    pub stack: usize,
    pub obs_dim: usize,
    /// `[row][stack * obs_dim]`, oldest first.
    pub data: Vec<f64>,
}

impl ObsStack {
    /// Seeds each row's window by repeating its first observation.
    pub fn new(stack: usize, obs_dim: usize, first: &[f64]) -> Self {
        let stack = stack.max(1);
        let rows = first.len() / obs_dim;
        let mut data = Vec::with_capacity(rows * stack * obs_dim);
        for r in 0..rows {
            for _ in 0..stack {
                data.extend_from_slice(&first[r * obs_dim..(r + 1) * obs_dim]);
            }
        }
        Self { stack, obs_dim, data }
    }

    pub fn push(&mut self, obs: &[f64]) {
        let w = self.stack * self.obs_dim;
        for (r, row) in self.data.chunks_mut(w).enumerate() {
            row.copy_within(self.obs_dim.., 0);
            row[w - self.obs_dim..].copy_from_slice(&obs[r * self.obs_dim..(r + 1) * self.obs_dim]);
        }
    }

    /// Restarts one row's window from `obs`.
    pub fn reset_row(&mut self, r: usize, obs: &[f64]) {
        let w = self.stack * self.obs_dim;
        for s in 0..self.stack {
            self.data[r * w + s * self.obs_dim..r * w + (s + 1) * self.obs_dim].copy_from_slice(obs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Explicit mixture of k-step targets, independent of the recursion.
    fn brute_force(r: &[f64], g: &[f64], v: &[f64], lam: f64, t: usize) -> f64 {
        let big_t = r.len();
        if t == big_t {
            return v[big_t];
        }
        let n = big_t - t;
        let disc = |k: usize| (0..k).map(|j| g[t + j]).product::<f64>();
        let partial = |k: usize| (0..k).map(|j| disc(j) * r[t + j]).sum::<f64>();
        let mut total = 0.0;
        for k in 1..=n {
            total += (1.0 - lam) * lam.powi(k as i32 - 1) * (partial(k) + disc(k) * v[t + k - 1]);
        }
        total + lam.powi(n as i32) * (partial(n) + disc(n) * v[big_t])
    }

    #[test]
    fn lambda_return_cases() {
        let r = [1.0, 0.0, 1.0];
        let g = [0.99; 3];
        let v = [0.5, 0.4, 0.3, 0.2];
        let out = lambda_returns(&r, &g, &v, 0.95).unwrap();
        for t in 0..=3 {
            assert!((out[t] - brute_force(&r, &g, &v, 0.95, t)).abs() < 1e-12);
        }
        assert_eq!(out[3], 0.2);
        let zero = lambda_returns(&r, &g, &v, 0.0).unwrap();
        for t in 0..3 {
            assert!((zero[t] - (r[t] + g[t] * v[t])).abs() < 1e-12);
        }
        assert!(lambda_returns(&r, &g, &v[..3], 0.9).is_err());
    }

    #[test]
    fn clipping_arithmetic() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert!((clipped_surrogate(1.1, 2.0, 0.2) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn greedy_and_masking() {
        let mut r = rng::seeded(0);
        assert_eq!(act(&[10.0, -10.0], &[true, true], ActMode::Greedy, &mut r).unwrap().0, 0);
        for _ in 0..50 {
            assert_eq!(act(&[10.0, -10.0], &[false, true], ActMode::Sample, &mut r).unwrap().0, 1);
        }
        assert_eq!(act(&[1.0], &[false], ActMode::Greedy, &mut r).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn sampling_frequencies_match_masked_softmax() {
        let mut r = rng::seeded(1);
        let logits = [0.3, 1.2, -0.5, 0.0];
        let mask = [true, true, false, true];
        let p = masked_probs(&logits, &mask).unwrap();
        let mut c = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            c[act(&logits, &mask, ActMode::Sample, &mut r).unwrap().0] += 1;
        }
        for j in 0..4 {
            assert!((c[j] as f64 / n as f64 - p[j]).abs() < 0.01);
        }
        assert_eq!(c[2], 0);
    }

    #[test]
    fn critic_loss_zero_and_offset() {
        let mut rr = rng::seeded(2);
        let c = Critic::new(3, 8, 2, 2, &mut rr);
        let x: Vec<f64> = (0..2 * 2 * 3).map(|_| rng::normal(&mut rr)).collect();
        let v = c.values(&x, 2);
        for (off, expect) in [(0.0, 0.0), (0.3, 0.09)] {
            let mut g = Graph::new(&c.store);
            let xi = g.input(Tensor::from_vec(&[4, 3], x.clone()));
            let out = c.forward(&mut g, xi, 2);
            let t: Vec<f64> = v.iter().map(|a| a + off).collect();
            let l = g.squared_error(out, &t, &[0.25; 4]);
            assert!((g.value(l).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn obs_stack_shifts() {
        let mut s = ObsStack::new(3, 1, &[1.0, 2.0]);
        assert_eq!(s.data, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        s.push(&[5.0, 6.0]);
        assert_eq!(s.data, vec![1.0, 1.0, 5.0, 2.0, 2.0, 6.0]);
    }

    proptest! {
        #[test]
        fn recursion_equals_brute_force(
            r in proptest::collection::vec(-2.0f64..2.0, 1..10),
            lam in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let mut rr = rng::seeded(seed);
            let g: Vec<f64> = r.iter().map(|_| rng::uniform(&mut rr)).collect();
            let v: Vec<f64> = (0..=r.len()).map(|_| rng::normal(&mut rr)).collect();
            let out = lambda_returns(&r, &g, &v, lam).unwrap();
            for t in 0..=r.len() {
                prop_assert!((out[t] - brute_force(&r, &g, &v, lam, t)).abs() < 1e-9);
            }
        }

        #[test]
        fn entropy_peaks_at_uniform(logits in proptest::collection::vec(-3.0f64..3.0, 2..6)) {
            let mask = vec![true; logits.len()];
            let p = masked_probs(&logits, &mask).unwrap();
            prop_assert!(entropy(&p) <= math::ln(logits.len() as f64) + 1e-12);
        }
    }
}
