//! Agent-wise aggregation of the joint token embeddings at one timestep.
//!
//! The Perceiver variant cross-attends `n` learned queries (one per agent)
//! onto the `n(K+1)` joint embeddings and refines them with a small
//! bidirectional Transformer. The self-attention variant runs full
//! Transformer layers over the joint sequence.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Attention, Block, Embedding, FeedForward, FfKind, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Perceiver,
    SelfAttention,
    None,
}

impl AggregatorKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perceiver" => Ok(Self::Perceiver),
            "self_attention" | "self-attention" => Ok(Self::SelfAttention),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidConfig(format!("unknown aggregator kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub cross_heads: usize,
    pub inner_layers: usize,
    pub inner_heads: usize,
    pub head_dim: usize,
    /// Layers of the self-attention baseline.
    pub self_attention_layers: usize,
    pub dropout: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self { kind: AggregatorKind::Perceiver, cross_heads: 8, inner_layers: 2, inner_heads: 8, head_dim: 64, self_attention_layers: 3, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perceiver {
    pub queries: ParamId,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross: Attention,
    pub ln_ff: LayerNorm,
    pub cross_ff: FeedForward,
    pub inner: Vec<Block>,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionAggregator {
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregatorNet {
    Perceiver(Perceiver),
    SelfAttention(SelfAttentionAggregator),
}

/// Joint-embedding aggregator for a fixed number of agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregator {
    pub config: AggregatorConfig,
    pub n_agents: usize,
    pub tokens_per_obs: usize,
    pub d_model: usize,
    pub agent_emb: Embedding,
    pub slot_emb: Embedding,
    pub net: AggregatorNet,
}

/// Output of one batched aggregation.
pub struct Aggregated {
    /// `[batch * n, D]`, one feature per agent.
    pub features: Var,
    /// Attention nodes: Perceiver cross-attention first, then inner layers.
    pub attention: Vec<Var>,
    /// Unpooled `[batch * n(K+1), D]` output of the self-attention variant.
    pub sequence: Option<Var>,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, config: AggregatorConfig, n_agents: usize, tokens_per_obs: usize, d_model: usize, rng: &mut Rng) -> Result<Self> {
        let net = match config.kind {
            AggregatorKind::None => return Err(Error::InvalidConfig("aggregator kind `none` has no network".to_string())),
            AggregatorKind::Perceiver => {
                let q = Tensor::from_vec(&[n_agents, d_model], (0..n_agents * d_model).map(|_| rng::normal(rng) * 0.02).collect());
                AggregatorNet::Perceiver(Perceiver {
                    queries: store.add("agg.queries", q, false),
                    ln_q: LayerNorm::new(store, "agg.ln_q", d_model),
                    ln_kv: LayerNorm::new(store, "agg.ln_kv", d_model),
                    cross: Attention::new(store, "agg.cross", d_model, config.cross_heads, config.head_dim, rng),
                    ln_ff: LayerNorm::new(store, "agg.ln_ff", d_model),
                    cross_ff: FeedForward::new(store, "agg.cross_ff", d_model, 4, FfKind::Geglu, rng),
                    inner: (0..config.inner_layers)
                        .map(|l| Block::new(store, &format!("agg.inner{l}"), d_model, config.inner_heads, config.head_dim, FfKind::Geglu, rng))
                        .collect(),
                    ln_out: LayerNorm::new(store, "agg.ln_out", d_model),
                })
            }
            AggregatorKind::SelfAttention => AggregatorNet::SelfAttention(SelfAttentionAggregator {
                blocks: (0..config.self_attention_layers)
                    .map(|l| Block::new(store, &format!("agg.sa{l}"), d_model, config.inner_heads, config.head_dim, FfKind::Geglu, rng))
                    .collect(),
                ln_out: LayerNorm::new(store, "agg.ln_out", d_model),
            }),
        };
        Ok(Self {
            agent_emb: Embedding::new(store, "agg.agent_emb", n_agents, d_model, rng),
            slot_emb: Embedding::new(store, "agg.slot_emb", tokens_per_obs + 1, d_model, rng),
            config,
            n_agents,
            tokens_per_obs,
            d_model,
            net,
        })
    }

    pub fn joint_len(&self) -> usize {
        self.n_agents * (self.tokens_per_obs + 1)
    }

    /// Aggregates `joint` (`[batch * n(K+1), D]`, agent-major within each
    /// item: agent 0's K token embeddings and action embedding, then agent 1, ...).
    pub fn forward(&self, g: &mut Graph, joint: Var, batch: usize) -> Result<Aggregated> {
        let l = self.joint_len();
        let rows = g.value(joint).rows();
        if rows != batch * l {
            return Err(Error::LengthMismatch(format!("{rows} joint embeddings for {batch} items of {} agents x {}", self.n_agents, self.tokens_per_obs + 1)));
        }
        let k1 = self.tokens_per_obs + 1;
        let agent_ids: Vec<usize> = (0..l).map(|p| p / k1).collect();
        let slot_ids: Vec<usize> = (0..l).map(|p| p % k1).collect();
        let ae = self.agent_emb.forward(g, &agent_ids);
        let se = self.slot_emb.forward(g, &slot_ids);
        let ident = g.add(ae, se);
        let x = g.add_broadcast(joint, ident);
        let p = self.config.dropout;
        let x = g.dropout(x, p);
        let n = self.n_agents;
        match &self.net {
            AggregatorNet::Perceiver(pc) => {
                let q = g.param(pc.queries);
                let q_rows: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
                let lat = g.gather_rows(q, &q_rows);
                let qn = pc.ln_q.forward(g, lat);
                let kvn = pc.ln_kv.forward(g, x);
                let (c, cross_node) = pc.cross.cross_attend(g, qn, kvn, batch, n, l, p);
                let c = g.dropout(c, p);
                let mut lat = g.add(lat, c);
                let h = pc.ln_ff.forward(g, lat);
                let f = pc.cross_ff.forward(g, h);
                let f = g.dropout(f, p);
                lat = g.add(lat, f);
                let mut attention = alloc::vec![cross_node];
                for blk in &pc.inner {
                    let (y, a) = blk.forward(g, lat, batch, n, false, p);
                    lat = y;
                    attention.push(a);
                }
                let features = pc.ln_out.forward(g, lat);
                Ok(Aggregated { features, attention, sequence: None })
            }
            AggregatorNet::SelfAttention(sa) => {
                let mut h = x;
                let mut attention = Vec::new();
                for blk in &sa.blocks {
                    let (y, a) = blk.forward(g, h, batch, l, false, p);
                    h = y;
                    attention.push(a);
                }
                let seq = sa.ln_out.forward(g, h);
                // mean-pool each agent's K+1 outputs into its feature
                let pooled = g.reshape(seq, &[batch * n, k1 * self.d_model]);
                let pool = self.pool_matrix(g);
                let features = g.linear(pooled, pool, None);
                Ok(Aggregated { features, attention, sequence: Some(seq) })
            }
        }
    }

    /// Constant `[(K+1)·D, D]` averaging matrix.
    fn pool_matrix(&self, g: &mut Graph) -> Var {
        let (k1, d) = (self.tokens_per_obs + 1, self.d_model);
        let mut m = Tensor::zeros(&[k1 * d, d]);
        for s in 0..k1 {
            for j in 0..d {
                m.data[(s * d + j) * d + j] = 1.0 / k1 as f64;
            }
        }
        g.input(m)
    }
}

/// Which cost a FLOPs figure denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopsConvention {
    /// One multiply-accumulate counts once (profiler convention).
    Macs,
    /// Two operations per multiply-accumulate.
    TwoPerMac,
}

/// Shape parameters of an aggregator for analytic cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_mult: usize,
    pub inner_layers: usize,
    pub self_attention_layers: usize,
}

impl CostModel {
    /// Reference configuration: D = 256, 8 heads of 64, gated feed-forward ×4.
    pub fn reference() -> Self {
        Self { d_model: 256, heads: 8, head_dim: 64, ff_mult: 4, inner_layers: 2, self_attention_layers: 3 }
    }

    fn inner(&self) -> u64 {
        (self.heads * self.head_dim) as u64
    }

    fn ff(&self) -> u64 {
        let d = self.d_model as u64;
        let h = d * self.ff_mult as u64;
        d * 2 * h + h * d
    }

    /// One bidirectional self-attention layer over `len` tokens.
    fn self_layer(&self, len: u64) -> u64 {
        let d = self.d_model as u64;
        len * (4 * d * self.inner() + self.ff()) + 2 * len * len * self.inner()
    }
}

/// Analytic multiply-accumulate count of one aggregation over `n` agents with
/// `k` tokens per observation. Layer norms, softmax and biases are ignored.
pub fn flops_estimate(kind: AggregatorKind, n: usize, k: usize, cost: &CostModel, convention: FlopsConvention) -> u64 {
    let d = cost.d_model as u64;
    let inner = cost.inner();
    let l = (n * (k + 1)) as u64;
    let n = n as u64;
    let macs = match kind {
        AggregatorKind::None => 0,
        AggregatorKind::SelfAttention => (0..cost.self_attention_layers).map(|_| cost.self_layer(l)).sum(),
        AggregatorKind::Perceiver => {
            let kv = 2 * l * d * inner;
            let q_out = 2 * n * d * inner;
            let scores = 2 * n * l * inner;
            let ff = n * cost.ff();
            let latent: u64 = (0..cost.inner_layers).map(|_| cost.self_layer(n)).sum();
            kv + q_out + scores + ff + latent
        }
    };
    match convention {
        FlopsConvention::Macs => macs,
        FlopsConvention::TwoPerMac => 2 * macs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(kind: AggregatorKind, n: usize, k: usize) -> (ParamStore, Aggregator) {
        let mut s = ParamStore::new();
        let mut r = rng::seeded(11);
        let cfg = AggregatorConfig { kind, cross_heads: 2, inner_heads: 2, head_dim: 4, dropout: 0.0, ..Default::default() };
        let a = Aggregator::new(&mut s, cfg, n, k, 8, &mut r).unwrap();
        (s, a)
    }

    fn joint(batch: usize, n: usize, k: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let rows = batch * n * (k + 1);
        Tensor::from_vec(&[rows, 8], (0..rows * 8).map(|_| rng::normal(&mut r)).collect())
    }

    #[test]
    fn perceiver_shapes() {
        for (n, k) in [(1, 2), (5, 16)] {
            let (s, a) = setup(AggregatorKind::Perceiver, n, k);
            let mut g = Graph::new(&s);
            let x = g.input(joint(2, n, k, 1));
            let out = a.forward(&mut g, x, 2).unwrap();
            assert_eq!(g.shape(out.features), &[2 * n, 8]);
            let (probs, dims) = g.attention_probs(out.attention[0]).unwrap();
            assert_eq!((dims.q_len, dims.k_len), (n, n * (k + 1)));
            assert_eq!(probs.len(), 2 * 2 * n * n * (k + 1));
        }
        let (s, a) = setup(AggregatorKind::Perceiver, 2, 2);
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::zeros(&[5, 8]));
        assert!(matches!(a.forward(&mut g, x, 1), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn self_attention_preserves_length() {
        let (s, a) = setup(AggregatorKind::SelfAttention, 2, 16);
        let mut g = Graph::new(&s);
        let x = g.input(joint(1, 2, 16, 2));
        let out = a.forward(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(out.sequence.unwrap()), &[34, 8]);
        assert_eq!(g.shape(out.features), &[2, 8]);
    }

    #[test]
    fn information_flows_across_agents() {
        for kind in [AggregatorKind::Perceiver, AggregatorKind::SelfAttention] {
            let (n, k) = (3, 2);
            let (s, a) = setup(kind, n, k);
            let base = joint(1, n, k, 3);
            let run = |t: Tensor| {
                let mut g = Graph::new(&s);
                let x = g.input(t);
                let o = a.forward(&mut g, x, 1).unwrap();
                g.value(o.features).row(0).to_vec()
            };
            let mut pert = base.clone();
            // agent 2's action embedding row
            let row = (k + 1) + k;
            pert.row_mut(row)[0] += 1.0;
            let (f0, f1) = (run(base.clone()), run(pert));
            assert!(f0.iter().zip(&f1).any(|(x, y)| (x - y).abs() > 1e-9));
            // and the Jacobian block is nonzero via the tape too
            let mut g = Graph::new(&s);
            let x = g.input_with_grad(base);
            let o = a.forward(&mut g, x, 1).unwrap();
            let pick = g.gather_rows(o.features, &[0]);
            let l = g.sum(pick);
            let gx = g.backward(l).wrt(x).unwrap().clone();
            assert!((k + 1..2 * (k + 1)).any(|r| gx.row(r).iter().any(|v| v.abs() > 0.0)));
        }
    }

    #[test]
    fn deterministic_in_eval_mode() {
        let (s, a) = setup(AggregatorKind::Perceiver, 2, 3);
        let t = joint(2, 2, 3, 4);
        let run = || {
            let mut g = Graph::new(&s);
            let x = g.input(t.clone());
            let o = a.forward(&mut g, x, 2).unwrap();
            g.value(o.features).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn linear_vs_quadratic_growth() {
        let c = CostModel::reference();
        let p: Vec<f64> = [2, 3, 5, 9].iter().map(|&n| flops_estimate(AggregatorKind::Perceiver, n, 16, &c, FlopsConvention::Macs) as f64).collect();
        let s: Vec<f64> = [2, 3, 5, 9].iter().map(|&n| flops_estimate(AggregatorKind::SelfAttention, n, 16, &c, FlopsConvention::Macs) as f64).collect();
        for (a, b) in p.iter().zip(&s) {
            assert!(a < b);
        }
        assert!(s[3] / p[3] > s[0] / p[0] * 0.9);
        assert_eq!(flops_estimate(AggregatorKind::Perceiver, 2, 16, &c, FlopsConvention::TwoPerMac), 2 * p[0] as u64);
    }

    #[test]
    fn agent_count_is_structural_only() {
        for n in 1..5 {
            let (_, a) = setup(AggregatorKind::Perceiver, n, 2);
            assert_eq!(a.joint_len(), n * 3);
        }
    }
}
