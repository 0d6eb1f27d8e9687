//! Aggregator and dynamics trained jointly on tokenized real segments.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, AggregatorKind};
use crate::buffer::Segment;
use crate::dynamics::{Dynamics, DynamicsConfig, SequenceLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tokenizer::ObsTokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub n_agents: usize,
    pub vocab: usize,
    pub tokens_per_obs: usize,
    pub n_actions: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub horizon: usize,
    pub dropout: f64,
    /// One joint sequence for all agents instead of per-agent sequences.
    pub centralized: bool,
    pub aggregator: AggregatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub store: ParamStore,
    pub dynamics: Dynamics,
    pub aggregator: Option<Aggregator>,
}

/// Tokenized teacher-forcing batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmBatch {
    pub batch: usize,
    pub horizon: usize,
    pub n_agents: usize,
    pub tokens_per_obs: usize,
    pub n_actions: usize,
    /// `[b][t][agent][k]`
    pub obs_tokens: Vec<usize>,
    /// `[b][t][agent]`
    pub actions: Vec<usize>,
    /// `[b][t]`
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
    pub pad: Vec<bool>,
    /// `[b][t][agent][action]`
    pub avail: Vec<bool>,
}

impl WmBatch {
    pub fn from_segments(segments: &[Segment], tokenizer: &ObsTokenizer) -> Result<Self> {
        let b = segments.len();
        let h = segments[0].horizon();
        let n = segments[0].n_agents();
        let n_act = segments[0].avail[0][0].len();
        let mut obs = Vec::with_capacity(b * h * n * tokenizer.obs_dim());
        let mut out = Self {
            batch: b,
            horizon: h,
            n_agents: n,
            tokens_per_obs: tokenizer.tokens_per_obs(),
            n_actions: n_act,
            obs_tokens: Vec::new(),
            actions: Vec::with_capacity(b * h * n),
            rewards: Vec::with_capacity(b * h),
            continuations: Vec::with_capacity(b * h),
            pad: Vec::with_capacity(b * h),
            avail: Vec::with_capacity(b * h * n * n_act),
        };
        for s in segments {
            if s.horizon() != h || s.n_agents() != n {
                return Err(Error::LengthMismatch("segments differ in shape".to_string()));
            }
            for t in 0..h {
                for i in 0..n {
                    obs.extend_from_slice(&s.obs[t][i]);
                    out.actions.push(s.actions[t][i]);
                    out.avail.extend_from_slice(&s.avail[t][i]);
                }
                out.rewards.push(s.rewards[t]);
                out.continuations.push(s.continuations[t]);
                out.pad.push(s.pad[t]);
            }
        }
        out.obs_tokens = tokenizer.encode_batch(&obs)?;
        Ok(out)
    }

    fn tok(&self, b: usize, t: usize, i: usize, k: usize) -> usize {
        self.obs_tokens[((b * self.horizon + t) * self.n_agents + i) * self.tokens_per_obs + k]
    }

    fn step(&self, b: usize, t: usize) -> usize {
        b * self.horizon + t
    }
}

/// Reported components of the dynamics loss; `total` is their sum.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLoss {
    pub tokens: f64,
    pub reward: f64,
    pub discount: f64,
    pub avail: f64,
    pub total: f64,
    pub token_accuracy: f64,
}

/// Differentiable loss plus the attention nodes of the pass.
pub struct WmForward {
    pub loss: Var,
    pub report: DynamicsLoss,
    pub dynamics_attention: Vec<Var>,
    pub aggregator_attention: Vec<Var>,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.n_agents == 0 || config.horizon == 0 || config.tokens_per_obs == 0 {
            return Err(Error::InvalidConfig("world model needs agents, horizon and tokens".to_string()));
        }
        let mut store = ParamStore::new();
        let layout = if config.centralized {
            SequenceLayout::centralized(config.n_agents, config.tokens_per_obs, config.horizon)
        } else {
            SequenceLayout::decentralized(config.tokens_per_obs, config.horizon)
        };
        let use_agg = !config.centralized && config.aggregator.kind != AggregatorKind::None;
        let dcfg = DynamicsConfig {
            vocab: config.vocab,
            tokens_per_obs: config.tokens_per_obs,
            n_actions: config.n_actions,
            d_model: config.d_model,
            layers: config.layers,
            heads: config.heads,
            horizon: config.horizon,
            dropout: config.dropout,
        };
        let null = !config.centralized && !use_agg;
        let dynamics = Dynamics::new(&mut store, dcfg, layout, null, rng)?;
        let aggregator = if use_agg {
            Some(Aggregator::new(&mut store, config.aggregator.clone(), config.n_agents, config.tokens_per_obs, config.d_model, rng)?)
        } else {
            None
        };
        Ok(Self { config, store, dynamics, aggregator })
    }

    pub fn layout(&self) -> SequenceLayout {
        self.dynamics.layout
    }

    /// Sequences per joint trajectory: one per agent, or one in total.
    pub fn seqs_per_item(&self) -> usize {
        self.config.n_agents / self.layout().agents
    }

    /// Teacher-forced loss graph.
    pub fn forward(&self, g: &mut Graph, batch: &WmBatch) -> Result<WmForward> {
        let c = &self.config;
        if batch.horizon > c.horizon {
            return Err(Error::HorizonTooLong { horizon: batch.horizon, window: c.horizon });
        }
        if batch.n_agents != c.n_agents || batch.tokens_per_obs != c.tokens_per_obs {
            return Err(Error::LengthMismatch(format!(
                "batch has {} agents x {} tokens, model expects {} x {}",
                batch.n_agents, batch.tokens_per_obs, c.n_agents, c.tokens_per_obs
            )));
        }
        let (bsz, h, n, k) = (batch.batch, batch.horizon, batch.n_agents, batch.tokens_per_obs);
        let d = &self.dynamics;
        let layout = SequenceLayout { horizon: h, ..self.layout() };
        let obs_e = d.obs_emb.forward(g, &batch.obs_tokens);
        let act_e = d.act_emb.forward(g, &batch.actions);
        let o_act = batch.obs_tokens.len();
        let o_feat = o_act + batch.actions.len();
        let obs_row = |b: usize, t: usize, i: usize, kk: usize| ((b * h + t) * n + i) * k + kk;
        let act_row = |b: usize, t: usize, i: usize| o_act + (b * h + t) * n + i;

        let mut aggregator_attention = Vec::new();
        let mut parts = vec![obs_e, act_e];
        if layout.feature_slot {
            let feat = match &self.aggregator {
                Some(agg) => {
                    let mut idx = Vec::with_capacity(bsz * h * n * (k + 1));
                    for b in 0..bsz {
                        for t in 0..h {
                            for i in 0..n {
                                idx.extend((0..k).map(|kk| obs_row(b, t, i, kk)));
                                idx.push(act_row(b, t, i));
                            }
                        }
                    }
                    let both = g.concat_rows(&[obs_e, act_e]);
                    let joint = g.gather_rows(both, &idx);
                    let out = agg.forward(g, joint, bsz * h)?;
                    aggregator_attention = out.attention;
                    out.features
                }
                None => {
                    let null = d.null_feature.as_ref().expect("null feature present without aggregator");
                    null.forward(g, &vec![0; bsz * h * n])
                }
            };
            parts.push(feat);
        }
        let all = g.concat_rows(&parts);

        let spi = n / layout.agents;
        let n_seq = bsz * spi;
        let len = layout.len();
        let mut idx = Vec::with_capacity(n_seq * len);
        for b in 0..bsz {
            for s in 0..spi {
                for t in 0..h {
                    for a in 0..layout.agents {
                        let i = s * layout.agents + a;
                        idx.extend((0..k).map(|kk| obs_row(b, t, i, kk)));
                    }
                    for a in 0..layout.agents {
                        idx.push(act_row(b, t, s * layout.agents + a));
                    }
                    if layout.feature_slot {
                        idx.push(o_feat + (b * h + t) * n + s);
                    }
                }
            }
        }
        let x = g.gather_rows(all, &idx);
        let trace = d.forward(g, x, n_seq, len)?;

        // next-token targets: observation tokens of steps t >= 1
        let mut pred_rows = Vec::new();
        let mut targets = Vec::new();
        for b in 0..bsz {
            for s in 0..spi {
                let base = (b * spi + s) * len;
                for t in 1..h {
                    if batch.pad[batch.step(b, t)] {
                        continue;
                    }
                    for a in 0..layout.agents {
                        for kk in 0..k {
                            pred_rows.push(base + layout.obs_pos(t, a, kk) - 1);
                            targets.push(batch.tok(b, t, s * layout.agents + a, kk));
                        }
                    }
                }
            }
        }
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut report = DynamicsLoss::default();
        if !targets.is_empty() {
            let hid = g.gather_rows(trace.hidden, &pred_rows);
            let logits = d.token_head.forward(g, hid);
            let w = vec![1.0 / targets.len() as f64; targets.len()];
            let ce = g.cross_entropy(logits, &targets, &w);
            let lv = g.value(logits);
            let vocab = lv.cols();
            let correct = (0..targets.len())
                .filter(|&r| {
                    let row = lv.row(r);
                    let am = (0..vocab).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                    am == targets[r]
                })
                .count();
            report.tokens = g.value(ce).item();
            report.token_accuracy = correct as f64 / targets.len() as f64;
            terms.push((ce, 1.0));
        }

        // reward, discount and next availability read at each step's last slot
        let mut read_rows = Vec::new();
        let mut rew = Vec::new();
        let mut disc = Vec::new();
        let mut av_t = Vec::new();
        let mut av_w = Vec::new();
        let na = batch.n_actions;
        for b in 0..bsz {
            for s in 0..spi {
                let base = (b * spi + s) * len;
                for t in 0..h {
                    let st = batch.step(b, t);
                    if batch.pad[st] {
                        continue;
                    }
                    read_rows.push(base + layout.read_pos(t));
                    rew.push(batch.rewards[st]);
                    disc.push(if batch.continuations[st] > 0.0 { 1.0 } else { 0.0 });
                    let next_ok = t + 1 < h && !batch.pad[st + 1] && batch.continuations[st] > 0.0;
                    for a in 0..layout.agents {
                        let i = s * layout.agents + a;
                        for j in 0..na {
                            let v = if next_ok { batch.avail[((st + 1) * n + i) * na + j] } else { false };
                            av_t.push(if v { 1.0 } else { 0.0 });
                            av_w.push(if next_ok { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
        if !read_rows.is_empty() {
            let m = read_rows.len() as f64;
            let hid = g.gather_rows(trace.hidden, &read_rows);
            let r = d.reward_head.forward(g, hid);
            let rl = g.smooth_l1(r, &rew, &vec![1.0 / m; rew.len()]);
            let dl = d.discount_head.forward(g, hid);
            let dloss = g.bce_with_logits(dl, &disc, &vec![1.0 / m; disc.len()]);
            report.reward = g.value(rl).item();
            report.discount = g.value(dloss).item();
            terms.push((rl, 1.0));
            terms.push((dloss, 1.0));
            let n_av = av_w.iter().filter(|&&w| w > 0.0).count();
            if n_av > 0 {
                let w: Vec<f64> = av_w.iter().map(|x| x / n_av as f64).collect();
                let al = d.avail_head.forward(g, hid);
                let aloss = g.bce_with_logits(al, &av_t, &w);
                report.avail = g.value(aloss).item();
                terms.push((aloss, 1.0));
            }
        }
        if terms.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let loss = g.weighted_sum(&terms);
        report.total = g.value(loss).item();
        if !report.total.is_finite() {
            return Err(Error::NanLoss { phase: "dynamics".to_string(), detail: format!("{report:?}") });
        }
        Ok(WmForward { loss, report, dynamics_attention: trace.attention, aggregator_attention })
    }

    /// Loss and gradients; `dropout_seed` enables training-mode dropout.
    pub fn loss_and_grads(&self, batch: &WmBatch, dropout_seed: Option<u64>) -> Result<(DynamicsLoss, Gradients)> {
        let mut g = match dropout_seed {
            Some(s) => Graph::training(&self.store, s),
            None => Graph::new(&self.store),
        };
        let f = self.forward(&mut g, batch)?;
        let grads = g.backward(f.loss).params;
        Ok((f.report, grads))
    }

    pub fn loss(&self, batch: &WmBatch) -> Result<DynamicsLoss> {
        let mut g = Graph::new(&self.store);
        Ok(self.forward(&mut g, batch)?.report)
    }

    /// Embedding rows for observation tokens.
    pub fn obs_embedding(&self, token: usize) -> &[f64] {
        self.dynamics.obs_emb.row(&self.store, token)
    }

    pub fn act_embedding(&self, action: usize) -> &[f64] {
        self.dynamics.act_emb.row(&self.store, action)
    }

    /// Eval-mode aggregated features for `batch` joint steps.
    /// `tokens` is `[batch][agent][k]`, `actions` is `[batch][agent]`; returns `[batch][agent][D]`.
    pub fn aggregate(&self, tokens: &[usize], actions: &[usize], batch: usize) -> Result<Vec<f64>> {
        let (n, k, dm) = (self.config.n_agents, self.config.tokens_per_obs, self.config.d_model);
        match &self.aggregator {
            None => {
                let null = self.dynamics.null_feature.as_ref().map(|e| e.row(&self.store, 0).to_vec()).unwrap_or_else(|| vec![0.0; dm]);
                Ok(null.repeat(batch * n))
            }
            Some(agg) => {
                let mut joint = Vec::with_capacity(batch * n * (k + 1) * dm);
                for b in 0..batch {
                    for i in 0..n {
                        for kk in 0..k {
                            joint.extend_from_slice(self.obs_embedding(tokens[(b * n + i) * k + kk]));
                        }
                        joint.extend_from_slice(self.act_embedding(actions[b * n + i]));
                    }
                }
                let mut g = Graph::new(&self.store);
                let x = g.input(Tensor::from_vec(&[batch * n * (k + 1), dm], joint));
                let out = agg.forward(&mut g, x, batch)?;
                Ok(g.value(out.features).data.clone())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn tiny_config(centralized: bool, kind: AggregatorKind) -> WorldModelConfig {
        WorldModelConfig {
            n_agents: 2,
            vocab: 8,
            tokens_per_obs: 2,
            n_actions: 3,
            d_model: 16,
            layers: 1,
            heads: 2,
            horizon: 3,
            dropout: 0.0,
            centralized,
            aggregator: AggregatorConfig { kind, cross_heads: 2, inner_layers: 1, inner_heads: 2, head_dim: 4, self_attention_layers: 1, dropout: 0.0 },
        }
    }

    pub(crate) fn tiny_batch(seed: u64, bsz: usize, h: usize) -> WmBatch {
        let mut r = rng::seeded(seed);
        let (n, k, na) = (2, 2, 3);
        let mut pad = vec![false; bsz * h];
        if h > 1 {
            pad[h - 1] = true;
        }
        WmBatch {
            batch: bsz,
            horizon: h,
            n_agents: n,
            tokens_per_obs: k,
            n_actions: na,
            obs_tokens: (0..bsz * h * n * k).map(|_| rng::below(&mut r, 8)).collect(),
            actions: (0..bsz * h * n).map(|_| rng::below(&mut r, na)).collect(),
            rewards: (0..bsz * h).map(|_| rng::uniform(&mut r)).collect(),
            continuations: (0..bsz * h).map(|i| if i % 4 == 3 { 0.0 } else { 0.99 }).collect(),
            pad,
            avail: (0..bsz * h * n * na).map(|_| rng::uniform(&mut r) < 0.7).collect(),
        }
    }

    #[test]
    fn loss_is_sum_of_components_for_every_variant() {
        for (c, kind) in [(false, AggregatorKind::Perceiver), (false, AggregatorKind::SelfAttention), (false, AggregatorKind::None), (true, AggregatorKind::None)] {
            let wm = WorldModel::new(tiny_config(c, kind), &mut rng::seeded(1)).unwrap();
            let l = wm.loss(&tiny_batch(2, 3, 3)).unwrap();
            assert!((l.total - (l.tokens + l.reward + l.discount + l.avail)).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_agents_get_identical_losses() {
        let wm = WorldModel::new(tiny_config(false, AggregatorKind::None), &mut rng::seeded(1)).unwrap();
        let mut b = tiny_batch(3, 1, 3);
        // copy agent 0 into agent 1 everywhere
        for t in 0..3 {
            for kk in 0..2 {
                b.obs_tokens[(t * 2 + 1) * 2 + kk] = b.obs_tokens[(t * 2) * 2 + kk];
            }
            b.actions[t * 2 + 1] = b.actions[t * 2];
            for j in 0..3 {
                b.avail[(t * 2 + 1) * 3 + j] = b.avail[(t * 2) * 3 + j];
            }
        }
        let mut g = Graph::new(&wm.store);
        let f = wm.forward(&mut g, &b).unwrap();
        let hid = g.value(f.dynamics_attention[0]).clone();
        let l = wm.layout().len();
        let inner = hid.cols();
        assert_eq!(hid.data[..l * inner], hid.data[l * inner..2 * l * inner]);
    }

    #[test]
    fn aggregator_receives_gradient() {
        let wm = WorldModel::new(tiny_config(false, AggregatorKind::Perceiver), &mut rng::seeded(4)).unwrap();
        let (_, grads) = wm.loss_and_grads(&tiny_batch(5, 2, 3), None).unwrap();
        let agg = wm.aggregator.as_ref().unwrap();
        let crate::aggregator::AggregatorNet::Perceiver(p) = &agg.net else { unreachable!() };
        assert!(grads.get(p.queries).unwrap().sq_norm() > 0.0);
    }
}
