//! Diagnostics over trained models: multi-step prediction error, attention
//! maps, aggregation cost tables and ablation plumbing.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::aggregator::{flops_estimate, AggregatorKind, CostModel, FlopsConvention};
use crate::buffer::ReplayBuffer;
use crate::config::{RunConfig, TokenizerKind};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imagination::{imagine, ActionSource, ImagineConfig};
use crate::math;
use crate::rng::{self, Rng};
use crate::tokenizer::ObsTokenizer;
use crate::world_model::{WmBatch, WorldModel};

/// Mean and standard deviation of `|ô − o|` per prediction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    /// Number of predicted steps; row 0 is the tokenizer reconstruction of the start.
    pub horizon: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub segments: usize,
    /// `[step][agent][dim]`, averaged over segments.
    pub per_dim: Vec<f64>,
    /// `[step][agent]`, averaged over segments and dimensions.
    pub mean: Vec<f64>,
    /// `[step][agent]`, spread across segments of the per-segment dimension mean.
    pub std: Vec<f64>,
}

impl ErrorCurve {
    /// Error at `step` averaged over agents.
    pub fn at(&self, step: usize) -> f64 {
        let n = self.n_agents;
        self.mean[step * n..(step + 1) * n].iter().sum::<f64>() / n as f64
    }
}

/// Windows of exactly `len` real steps, as `(episode, start)`.
fn full_windows(buffer: &ReplayBuffer, len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (e, ep) in buffer.episodes().enumerate() {
        if ep.steps.len() >= len {
            out.extend((0..=ep.steps.len() - len).map(|s| (e, s)));
        }
    }
    out
}

/// Rolls the world model `horizon` steps from sampled real states with the
/// recorded actions and compares the decoded predictions with what happened.
pub fn compounding_error(
    wm: &WorldModel,
    tokenizer: &ObsTokenizer,
    episodes: &ReplayBuffer,
    horizon: usize,
    segments: usize,
    rng: &mut Rng,
) -> Result<ErrorCurve> {
    let len = horizon + 1;
    if len > wm.config.horizon {
        return Err(Error::HorizonTooLong { horizon, window: wm.config.horizon.saturating_sub(1) });
    }
    let windows = full_windows(episodes, len);
    if windows.is_empty() || segments == 0 {
        return Err(Error::EmptyBuffer);
    }
    let (n, od) = (wm.config.n_agents, tokenizer.obs_dim());
    let picks: Vec<(usize, usize)> = (0..segments).map(|_| windows[rng::below(rng, windows.len())]).collect();
    let segs: Vec<_> = picks.iter().map(|&(e, s)| episodes.segment(e, s, len)).collect();

    let mut init_obs = Vec::with_capacity(segments * n * od);
    let mut init_avail = Vec::new();
    let mut actions = vec![0; len * segments * n];
    for (r, s) in segs.iter().enumerate() {
        init_obs.extend(s.obs[0].iter().flatten());
        init_avail.extend(s.avail[0].iter().flatten());
        for t in 0..len {
            for i in 0..n {
                actions[(t * segments + r) * n + i] = s.actions[t][i];
            }
        }
    }
    let cfg = ImagineConfig { horizon: len, rollouts: segments, greedy_tokens: true, stack: 1, ..Default::default() };
    let out = imagine(wm, tokenizer, ActionSource::Recorded(&actions), &init_obs, &init_avail, &cfg, rng)?;

    let mut per_dim = vec![0.0; len * n * od];
    let mut mean = vec![0.0; len * n];
    let mut sq = vec![0.0; len * n];
    for t in 0..len {
        for (r, s) in segs.iter().enumerate() {
            for i in 0..n {
                let pred = out.obs_at(t, r, i);
                let mut seg_mean = 0.0;
                for (j, (p, o)) in pred.iter().zip(&s.obs[t][i]).enumerate() {
                    let e = (p - o).abs();
                    per_dim[(t * n + i) * od + j] += e / segments as f64;
                    seg_mean += e / od as f64;
                }
                mean[t * n + i] += seg_mean / segments as f64;
                sq[t * n + i] += seg_mean * seg_mean / segments as f64;
            }
        }
    }
    let std = mean.iter().zip(&sq).map(|(m, s)| math::sqrt((s - m * m).max(0.0))).collect();
    Ok(ErrorCurve { horizon, n_agents: n, obs_dim: od, segments, per_dim, mean, std })
}

/// One attention map, `rows × cols`, row-stochastic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub source: String,
    pub layer: usize,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Per-layer, per-head maps for the first sequence of `batch` (eval mode).
/// Aggregator maps are taken at timestep `agg_step` of that sequence.
pub fn attention_maps(wm: &WorldModel, batch: &WmBatch, agg_step: usize) -> Result<Vec<AttentionMap>> {
    let mut g = Graph::new(&wm.store);
    let f = wm.forward(&mut g, batch)?;
    let mut maps = Vec::new();
    let mut push = |source: &str, layer: usize, item: usize, probs: &[f64], dims: crate::kernels::AttnDims| {
        let sz = dims.q_len * dims.k_len;
        for h in 0..dims.heads {
            let o = (item * dims.heads + h) * sz;
            maps.push(AttentionMap { source: source.into(), layer, head: h, rows: dims.q_len, cols: dims.k_len, data: probs[o..o + sz].to_vec() });
        }
    };
    for (l, v) in f.dynamics_attention.iter().enumerate() {
        let (p, d) = g.attention_probs(*v).ok_or_else(|| Error::LengthMismatch("not an attention node".into()))?;
        push("dynamics", l, 0, p, d);
    }
    for (l, v) in f.aggregator_attention.iter().enumerate() {
        let (p, d) = g.attention_probs(*v).ok_or_else(|| Error::LengthMismatch("not an attention node".into()))?;
        let step = agg_step.min(d.batch.saturating_sub(1));
        let name = match (wm.config.aggregator.kind, l) {
            (AggregatorKind::Perceiver, 0) => "perceiver_cross",
            (AggregatorKind::Perceiver, _) => "perceiver_inner",
            _ => "aggregator_self",
        };
        push(name, l, step, p, d);
    }
    Ok(maps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub n_agents: usize,
    pub perceiver: u64,
    pub self_attention: u64,
}

pub fn flops_report(n_list: &[usize], tokens: usize, cost: &CostModel, convention: FlopsConvention) -> Vec<FlopsRow> {
    n_list
        .iter()
        .map(|&n| FlopsRow {
            n_agents: n,
            perceiver: flops_estimate(AggregatorKind::Perceiver, n, tokens, cost, convention),
            self_attention: flops_estimate(AggregatorKind::SelfAttention, n, tokens, cost, convention),
        })
        .collect()
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    (slope, intercept, if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot })
}

/// Controlled comparisons between model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    CentralizedVsDecentralized,
    AggregationOnOff,
    VqVsBins,
    PerceiverVsSelfattn,
}

impl AblationAxis {
    pub const ALL: [Self; 4] = [Self::CentralizedVsDecentralized, Self::AggregationOnOff, Self::VqVsBins, Self::PerceiverVsSelfattn];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::InvalidConfig(format!("unknown ablation axis {s}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CentralizedVsDecentralized => "centralized_vs_decentralized",
            Self::AggregationOnOff => "aggregation_on_off",
            Self::VqVsBins => "vq_vs_bins",
            Self::PerceiverVsSelfattn => "perceiver_vs_selfattn",
        }
    }

    /// Names of the two arms; the first is the standard model.
    pub fn arms(self) -> [&'static str; 2] {
        match self {
            Self::CentralizedVsDecentralized => ["decentralized", "centralized"],
            Self::AggregationOnOff => ["aggregation_on", "aggregation_off"],
            Self::VqVsBins => ["vq", "bins"],
            Self::PerceiverVsSelfattn => ["perceiver", "self_attention"],
        }
    }

    /// The two configurations, identical except along this axis.
    pub fn variants(self, base: &RunConfig) -> [RunConfig; 2] {
        let mut a = base.clone();
        a.dynamics.centralized = false;
        a.tokenizer.kind = TokenizerKind::Vq;
        a.aggregator.kind = AggregatorKind::Perceiver;
        let mut b = a.clone();
        match self {
            Self::CentralizedVsDecentralized => {
                b.dynamics.centralized = true;
                b.aggregator.kind = AggregatorKind::None;
            }
            Self::AggregationOnOff => b.aggregator.kind = AggregatorKind::None,
            Self::VqVsBins => b.tokenizer.kind = TokenizerKind::Bins,
            Self::PerceiverVsSelfattn => b.aggregator.kind = AggregatorKind::SelfAttention,
        }
        [a, b]
    }
}

/// Arms of a comparison must share env, seed and sample budget.
pub fn check_matched(configs: &[RunConfig]) -> Result<()> {
    let Some(first) = configs.first() else { return Ok(()) };
    for c in configs {
        let s = &c.schedule;
        let f = &first.schedule;
        if s.total_env_steps != f.total_env_steps || s.transitions_per_epoch != f.transitions_per_epoch || c.env != first.env {
            return Err(Error::MismatchedBudgets(format!("{} vs {} env steps", s.total_env_steps, f.total_env_steps)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorConfig;
    use crate::buffer::Transition;
    use crate::tokenizer::BinsTokenizer;
    use crate::world_model::WorldModelConfig;

    fn const_model(centralized: bool, kind: AggregatorKind) -> WorldModel {
        let cfg = WorldModelConfig {
            n_agents: 2,
            vocab: 4,
            tokens_per_obs: 2,
            n_actions: 3,
            d_model: 16,
            layers: 1,
            heads: 2,
            horizon: 6,
            dropout: 0.0,
            centralized,
            aggregator: AggregatorConfig { kind, cross_heads: 2, inner_layers: 1, inner_heads: 2, head_dim: 4, self_attention_layers: 1, dropout: 0.0 },
        };
        let mut wm = WorldModel::new(cfg, &mut rng::seeded(1)).unwrap();
        // token 2 always, everything available
        let d = wm.dynamics.clone();
        for (head, bias) in [(&d.token_head, vec![0.0, 0.0, 50.0, 0.0]), (&d.avail_head, vec![5.0; d.avail_head.d_out()]), (&d.discount_head, vec![5.0])] {
            let last = head.layers.last().unwrap();
            wm.store.value_mut(last.w).data.iter_mut().for_each(|x| *x = 0.0);
            wm.store.value_mut(last.b.unwrap()).data.copy_from_slice(&bias);
        }
        wm
    }

    fn constant_episodes(obs: f64, len: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(1000);
        for _ in 0..2 {
            let steps = (0..len)
                .map(|t| Transition { obs: vec![vec![obs; 2]; 2], avail: vec![vec![true; 3]; 2], action: vec![t % 3, (t + 1) % 3], reward: 0.0, continuation: 0.99 })
                .collect();
            b.append_episode(steps);
        }
        b
    }

    #[test]
    fn oracle_model_has_zero_error() {
        // 4 bins on [0, 1]: token 2 decodes to 0.625
        let tok = ObsTokenizer::Bins(BinsTokenizer::new(4, vec![0.0; 2], vec![1.0; 2]));
        for (c, kind) in [(false, AggregatorKind::Perceiver), (true, AggregatorKind::None)] {
            let wm = const_model(c, kind);
            let curve = compounding_error(&wm, &tok, &constant_episodes(0.625, 10), 5, 20, &mut rng::seeded(2)).unwrap();
            assert_eq!(curve.mean.len(), 6 * 2);
            assert!(curve.mean.iter().all(|&e| e == 0.0));
            let off = compounding_error(&wm, &tok, &constant_episodes(0.6, 10), 5, 20, &mut rng::seeded(2)).unwrap();
            assert!((off.at(3) - 0.025).abs() < 1e-12);
        }
    }

    #[test]
    fn error_horizon_bounded_by_window() {
        let tok = ObsTokenizer::Bins(BinsTokenizer::new(4, vec![0.0; 2], vec![1.0; 2]));
        let wm = const_model(false, AggregatorKind::Perceiver);
        assert!(matches!(compounding_error(&wm, &tok, &constant_episodes(0.5, 10), 6, 5, &mut rng::seeded(0)), Err(Error::HorizonTooLong { .. })));
    }

    #[test]
    fn attention_maps_are_stochastic_and_shaped() {
        let wm = const_model(false, AggregatorKind::Perceiver);
        let batch = WmBatch {
            batch: 1,
            horizon: 3,
            n_agents: 2,
            tokens_per_obs: 2,
            n_actions: 3,
            obs_tokens: (0..12).map(|j| j % 4).collect(),
            actions: vec![0, 1, 2, 0, 1, 2],
            rewards: vec![0.0; 3],
            continuations: vec![0.99; 3],
            pad: vec![false; 3],
            avail: vec![true; 18],
        };
        let maps = attention_maps(&wm, &batch, 1).unwrap();
        let dynm: Vec<_> = maps.iter().filter(|m| m.source == "dynamics").collect();
        assert_eq!(dynm.len(), 2);
        assert_eq!(dynm[0].rows, 3 * 4);
        for m in &maps {
            for r in 0..m.rows {
                let s: f64 = (0..m.cols).map(|c| m.get(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
        for m in dynm {
            for r in 0..m.rows {
                assert!((r + 1..m.cols).all(|c| m.get(r, c) == 0.0));
            }
        }
        let cross = maps.iter().find(|m| m.source == "perceiver_cross").unwrap();
        assert_eq!((cross.rows, cross.cols), (2, 2 * 3));
    }

    #[test]
    fn perceiver_cost_is_linear_in_agents() {
        let rows = flops_report(&[2, 3, 5, 9], 16, &CostModel::reference(), FlopsConvention::Macs);
        let x: Vec<f64> = rows.iter().map(|r| r.n_agents as f64).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.perceiver as f64).collect();
        assert!(linear_fit(&x, &y).2 > 0.99);
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ablation_arms_differ_only_on_axis() {
        let base = RunConfig::desk_coupled_chain(3, 0);
        for axis in AblationAxis::ALL {
            let [a, b] = axis.variants(&base);
            assert_ne!(a, b);
            assert!(a.validate().is_ok() && b.validate().is_ok());
            assert!(check_matched(&[a.clone(), b]).is_ok());
            assert_eq!(AblationAxis::parse(axis.name()).unwrap(), axis);
        }
        let mut other = base.clone();
        other.schedule.total_env_steps += 1;
        assert!(matches!(check_matched(&[base, other]), Err(Error::MismatchedBudgets(_))));
    }
}
