//! Matched training runs along one ablation axis, with wall-clock accounting.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use mawm_core::analysis::{self, AblationAxis, ErrorCurve};
use mawm_core::behavior::ActMode;
use mawm_core::config::RunConfig;
use mawm_core::rng;
use mawm_core::trainer::{Metric, Trainer};
use serde::{Deserialize, Serialize};

use crate::plot;

#[derive(Clone, Debug)]
pub struct Options {
    /// Steps of the compounding-error measurement; 0 skips it.
    pub error_horizon: usize,
    pub error_segments: usize,
    /// Episodes sampled from the final policy for the error measurement.
    pub error_episodes: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self { error_horizon: 5, error_segments: 1000, error_episodes: 20 }
    }
}

/// State of one arm after an outer epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub env_steps: u64,
    /// Cumulative wall-clock of the whole loop.
    pub wall_s: f64,
    /// Cumulative wall-clock of tokenizer and world-model updates.
    pub model_wall_s: f64,
    pub dynamics_total: f64,
    pub dynamics_tokens: f64,
    pub dynamics_reward: f64,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub tokens_per_obs: usize,
    pub sequence_len: usize,
    pub rows: Vec<EpochRow>,
    /// Mean wall-clock of one world-model update.
    pub update_s: f64,
    pub error: Option<ErrorCurve>,
}

impl ArmRun {
    /// First cumulative wall-clock at which `metric` drops to `threshold`.
    pub fn time_to(&self, threshold: f64, metric: impl Fn(&EpochRow) -> f64) -> Option<f64> {
        self.rows.iter().find(|r| metric(r) <= threshold).map(|r| r.wall_s)
    }

    pub fn best(&self, metric: impl Fn(&EpochRow) -> f64) -> f64 {
        self.rows.iter().map(metric).fold(f64::INFINITY, f64::min)
    }

    pub fn error_at(&self, step: usize) -> Option<f64> {
        self.error.as_ref().map(|e| e.at(step))
    }
}

/// Trains one configuration, timing each phase.
pub fn run_arm(arm: &str, cfg: RunConfig, opts: &Options) -> anyhow::Result<ArmRun> {
    let seed = cfg.seed;
    let mut t = Trainer::new(cfg)?;
    let s = t.config.schedule.clone();
    let start = Instant::now();
    let mut model_wall = 0.0;
    let mut rows = Vec::new();
    while !t.done() {
        let remaining = s.total_env_steps.saturating_sub(t.state.env_steps) as usize;
        t.collect_experience(s.transitions_per_epoch.min(remaining))?;
        let m0 = Instant::now();
        t.train_world_model(s.tokenizer_epochs, s.world_model_epochs)?;
        model_wall += m0.elapsed().as_secs_f64();
        t.train_agents(s.policy_updates)?;
        t.state.epoch += 1;
        let success = if s.eval_every > 0 && t.state.env_steps >= t.state.last_eval_step + s.eval_every {
            t.state.last_eval_step = t.state.env_steps;
            Some(t.evaluate(s.eval_episodes)?.success_rate)
        } else {
            None
        };
        let wall = start.elapsed().as_secs_f64();
        let Some(Metric::WorldModel { total, tokens, reward, .. }) = t.state.metrics.iter().rev().find(|m| matches!(m, Metric::WorldModel { .. })).cloned() else {
            anyhow::bail!("no world-model metrics recorded");
        };
        rows.push(EpochRow { env_steps: t.state.env_steps, wall_s: wall, model_wall_s: model_wall, dynamics_total: total, dynamics_tokens: tokens, dynamics_reward: reward, success_rate: success });
    }
    let update_s = time_updates(&mut t, 5)?;
    let error = if opts.error_horizon > 0 {
        let eps = t.policy_episodes(opts.error_episodes, ActMode::Sample)?;
        Some(analysis::compounding_error(&t.world_model, &t.tokenizer, &eps, opts.error_horizon, opts.error_segments, &mut rng::seeded(seed))?)
    } else {
        None
    };
    let layout = t.world_model.layout();
    Ok(ArmRun {
        arm: arm.to_string(),
        seed,
        tokens_per_obs: t.tokenizer.tokens_per_obs(),
        sequence_len: layout.len() * t.world_model.seqs_per_item(),
        rows,
        update_s,
        error,
    })
}

/// Median wall-clock of `n` world-model updates on the trained model.
pub fn time_updates(t: &mut Trainer, n: usize) -> anyhow::Result<f64> {
    let mut times = Vec::with_capacity(n);
    let saved = (t.world_model.clone(), t.world_model_opt.clone());
    for _ in 0..n {
        let s = Instant::now();
        t.world_model_step()?;
        times.push(s.elapsed().as_secs_f64());
    }
    (t.world_model, t.world_model_opt) = saved;
    times.sort_by(f64::total_cmp);
    Ok(times[n / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub axis: AblationAxis,
    pub arms: [String; 2],
    pub runs: Vec<ArmRun>,
}

impl Report {
    pub fn arm_runs(&self, arm: usize) -> impl Iterator<Item = &ArmRun> {
        let name = self.arms[arm].clone();
        self.runs.iter().filter(move |r| r.arm == name)
    }

    fn mean_std(xs: &[f64]) -> (f64, f64) {
        let n = xs.len().max(1) as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "axis: {}", self.axis.name());
        for a in 0..2 {
            let runs: Vec<&ArmRun> = self.arm_runs(a).collect();
            let Some(first) = runs.first() else { continue };
            let last = |f: &dyn Fn(&EpochRow) -> f64| Self::mean_std(&runs.iter().map(|r| f(r.rows.last().unwrap())).collect::<Vec<_>>());
            let (loss, loss_sd) = last(&|r| r.dynamics_total);
            let (wall, _) = last(&|r| r.wall_s);
            let (upd, _) = Self::mean_std(&runs.iter().map(|r| r.update_s).collect::<Vec<_>>());
            let _ = write!(
                s,
                "{:<16} tokens/obs {:>3} seq len {:>4} | final dynamics loss {loss:.4} ± {loss_sd:.4} | wall {wall:.1}s | update {:.1}ms",
                self.arms[a],
                first.tokens_per_obs,
                first.sequence_len,
                upd * 1e3
            );
            let errs: Vec<f64> = runs.iter().filter_map(|r| r.error.as_ref().map(|e| e.at(e.horizon))).collect();
            if !errs.is_empty() {
                let (e, sd) = Self::mean_std(&errs);
                let _ = write!(s, " | {}-step L1 {e:.4} ± {sd:.4}", runs[0].error.as_ref().unwrap().horizon);
            }
            s.push('\n');
        }
        s
    }

    /// Learning curves, final table and plots.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join("summary.txt"), self.summary())?;
        let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
        w.write_record(["arm", "seed", "env_steps", "wall_s", "model_wall_s", "dynamics_total", "dynamics_tokens", "dynamics_reward", "success_rate"])?;
        for r in &self.runs {
            for row in &r.rows {
                w.write_record([
                    r.arm.clone(),
                    r.seed.to_string(),
                    row.env_steps.to_string(),
                    format!("{:.4}", row.wall_s),
                    format!("{:.4}", row.model_wall_s),
                    format!("{:.6}", row.dynamics_total),
                    format!("{:.6}", row.dynamics_tokens),
                    format!("{:.6}", row.dynamics_reward),
                    row.success_rate.map(|x| format!("{x:.3}")).unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("final.csv"))?;
        w.write_record(["arm", "seed", "tokens_per_obs", "sequence_len", "final_dynamics_total", "wall_s", "update_s", "error_last_step"])?;
        for r in &self.runs {
            let last = r.rows.last();
            w.write_record([
                r.arm.clone(),
                r.seed.to_string(),
                r.tokens_per_obs.to_string(),
                r.sequence_len.to_string(),
                last.map(|l| format!("{:.6}", l.dynamics_total)).unwrap_or_default(),
                last.map(|l| format!("{:.3}", l.wall_s)).unwrap_or_default(),
                format!("{:.6}", r.update_s),
                r.error.as_ref().map(|e| format!("{:.6}", e.at(e.horizon))).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        let curves: Vec<(String, Vec<(f64, f64)>)> =
            self.runs.iter().map(|r| (format!("{} s{}", r.arm, r.seed), r.rows.iter().map(|x| (x.wall_s, x.dynamics_total)).collect())).collect();
        plot::line_svg(&dir.join("loss_vs_wall.svg"), "Dynamics loss", "wall-clock (s)", "loss", &curves)?;
        let errs: Vec<(&str, &ErrorCurve)> = self.runs.iter().filter_map(|r| r.error.as_ref().map(|e| (r.arm.as_str(), e))).collect();
        if !errs.is_empty() {
            plot::error_svg(&dir.join("error.svg"), &errs)?;
        }
        Ok(())
    }
}

/// Both arms for seeds `0..seeds`, offset by the base config's seed.
pub fn run(axis: AblationAxis, base: &RunConfig, seeds: u64, opts: &Options) -> anyhow::Result<Report> {
    let arms = axis.arms();
    let mut runs = Vec::new();
    for s in 0..seeds {
        let mut b = base.clone();
        b.seed = base.seed + s;
        let variants = axis.variants(&b);
        analysis::check_matched(&variants)?;
        for (name, cfg) in arms.iter().zip(variants) {
            runs.push(run_arm(name, cfg, opts)?);
        }
    }
    Ok(Report { axis, arms: arms.map(String::from), runs })
}
