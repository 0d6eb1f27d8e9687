use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mawm::checkpoint;
use mawm::config_file;
use mawm::episode_log;
use mawm::metrics::MetricsWriter;
use mawm::{ablation, plot};
use mawm_core::aggregator::{CostModel, FlopsConvention};
use mawm_core::analysis::{self, AblationAxis};
use mawm_core::behavior::ActMode;
use mawm_core::env::{EnvKind, EnvSpec};
use mawm_core::imagination::{imagine, ActionSource};
use mawm_core::rng;
use mawm_core::trainer::{Metric, Trainer};

#[derive(Parser)]
#[command(name = "mawm", version, about = "Multi-agent token world model: training, imagination and analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out a random policy and write an episode log.
    EnvRollout {
        #[arg(long, default_value = "coop-switch")]
        env: String,
        #[arg(long, default_value_t = 2)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit only the observation tokenizer on an episode log.
    TokenizerTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Episode log written by `env-rollout`.
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full training loop.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.cbor`.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out imagined trajectories from a checkpoint.
    Imagine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config; `preset = "desk-coop-switch"` selects a base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file is given.
    #[arg(long, default_value = "desk-coop-switch")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<mawm_core::config::RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => config_file::load(p)?,
            None => config_file::preset(&self.preset, 0)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Multi-step prediction error of a trained model against fresh real episodes.
    Error {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
        #[arg(long, default_value_t = 1000)]
        segments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched runs differing along one axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        axis: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention maps of the dynamics Transformer and the aggregator.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregator cost table.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "2,3,5,9")]
        agents: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        /// Count two operations per multiply-accumulate.
        #[arg(long)]
        two_per_mac: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::EnvRollout { env, agents, episodes, seed, out } => {
            mkdir(&out)?;
            let spec = match EnvKind::parse(&env)? {
                EnvKind::CoopSwitch => EnvSpec::coop_switch(agents, seed),
                EnvKind::CoupledChain => EnvSpec::coupled_chain(agents, seed),
            };
            let eps = episode_log::seeded_rollouts(spec, episodes, seed)?;
            let path = out.join("episodes.jsonl");
            episode_log::write(&path, &eps)?;
            let steps: usize = eps.iter().map(|e| e.len()).sum();
            println!("wrote {episodes} episodes ({steps} steps) to {}", path.display());
        }
        Cmd::TokenizerTrain { cfg, episodes, epochs, out } => {
            mkdir(&out)?;
            let cfg = cfg.load()?;
            let mut t = Trainer::new(cfg)?;
            t.buffer = episode_log::into_buffer(episode_log::read(&episodes)?, t.config.schedule.buffer_capacity);
            let mut log = MetricsWriter::open(&out.join("metrics.jsonl"))?;
            for e in 0..epochs {
                if let Some((rec, commit, util)) = t.tokenizer_step()? {
                    log.write(&Metric::Tokenizer { step: 0, epoch: e as u64, reconstruction: rec, commitment: commit, utilization: util })?;
                }
            }
            let bytes = ciborium_bytes(&t.tokenizer)?;
            std::fs::write(out.join("tokenizer.cbor"), bytes)?;
            println!("tokenizer trained for {epochs} epochs; written to {}", out.display());
        }
        Cmd::Train { cfg, out, resume } => {
            mkdir(&out)?;
            let ckpt = out.join("checkpoint.cbor");
            let mut t = if resume {
                checkpoint::load(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?
            } else {
                let cfg = cfg.load()?;
                std::fs::write(out.join("config.toml"), config_file::to_toml(&cfg))?;
                Trainer::new(cfg)?
            };
            let mut log = MetricsWriter::open(&out.join("metrics.jsonl"))?;
            let start = Instant::now();
            let mut written = t.state.metrics.len();
            let res = t.run(|t| {
                for m in &t.state.metrics[written..] {
                    log.write(m).map_err(|e| mawm_core::Error::InvalidConfig(e.to_string()))?;
                    if let Metric::Eval { step, success_rate, mean_return, .. } = m {
                        println!("[{:>7.1}s] step {step:>6} success {success_rate:.2} return {mean_return:.3}", start.elapsed().as_secs_f64());
                    }
                }
                written = t.state.metrics.len();
                checkpoint::save(&ckpt, t).map_err(|e| mawm_core::Error::InvalidConfig(e.to_string()))
            });
            if let Err(e) = res {
                // the last checkpoint on disk predates the failing epoch
                bail!("training stopped: {e}; last good checkpoint at {}", ckpt.display());
            }
            println!("done: {} env steps in {:.1}s", t.state.env_steps, start.elapsed().as_secs_f64());
        }
        Cmd::Imagine { checkpoint: path, rollouts, seed, out } => {
            mkdir(&out)?;
            let t = checkpoint::load(&path)?;
            let mut r = rng::seeded(seed);
            let mut cfg = t.config.imagine_config();
            cfg.rollouts = rollouts;
            let mut obs = Vec::new();
            let mut avail = Vec::new();
            for _ in 0..rollouts {
                let (o, a) = t.buffer.sample_step(&mut r)?;
                obs.extend(o.into_iter().flatten());
                avail.extend(a.into_iter().flatten());
            }
            let src = ActionSource::Policy { actor: &t.behavior.actor, mode: ActMode::Sample };
            let roll = imagine(&t.world_model, &t.tokenizer, src, &obs, &avail, &cfg, &mut r)?;
            std::fs::write(out.join("rollout.json"), serde_json::to_vec_pretty(&roll)?)?;
            plot::write_rollout_csv(&out.join("rollout.csv"), &roll)?;
            println!("imagined {rollouts} rollouts of {} steps into {}", roll.horizon, out.display());
        }
        Cmd::Eval { checkpoint: path, episodes } => {
            let mut t = checkpoint::load(&path)?;
            let r = t.evaluate(episodes)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Cmd::Analyze(a) => analyze(a)?,
    }
    Ok(())
}

fn ciborium_bytes<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ciborium::into_writer(v, &mut buf).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    Ok(buf)
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Error { checkpoint: path, episodes, horizon, segments, seed, out } => {
            mkdir(&out)?;
            let mut t = checkpoint::load(&path)?;
            let buf = t.policy_episodes(episodes, ActMode::Sample)?;
            let curve = analysis::compounding_error(&t.world_model, &t.tokenizer, &buf, horizon, segments, &mut rng::seeded(seed))?;
            plot::write_error_csv(&out.join("error.csv"), &curve)?;
            plot::error_svg(&out.join("error.svg"), &[("model", &curve)])?;
            for s in 0..=horizon {
                println!("step {s}: {:.5}", curve.at(s));
            }
        }
        Analyze::Ablate { cfg, axis, seeds, out } => {
            mkdir(&out)?;
            let axis = AblationAxis::parse(&axis)?;
            let base = cfg.load()?;
            let report = ablation::run(axis, &base, seeds, &ablation::Options::default())?;
            report.write(&out)?;
            print!("{}", report.summary());
        }
        Analyze::Attention { checkpoint: path, out } => {
            mkdir(&out)?;
            let mut t = checkpoint::load(&path)?;
            let batch = t.sample_wm_batch(1)?;
            let maps = analysis::attention_maps(&t.world_model, &batch, 0)?;
            plot::write_attention(&out, &maps)?;
            println!("wrote {} attention maps to {}", maps.len(), out.display());
        }
        Analyze::Flops { agents, tokens, two_per_mac, out } => {
            mkdir(&out)?;
            let conv = if two_per_mac { FlopsConvention::TwoPerMac } else { FlopsConvention::Macs };
            let rows = analysis::flops_report(&agents, tokens, &CostModel::reference(), conv);
            plot::write_flops(&out, &rows)?;
            println!("| agents | perceiver (G) | self-attention (G) |");
            println!("|---|---|---|");
            for r in &rows {
                println!("| {} | {:.3} | {:.3} |", r.n_agents, r.perceiver as f64 / 1e9, r.self_attention as f64 / 1e9);
            }
        }
    }
    Ok(())
}
