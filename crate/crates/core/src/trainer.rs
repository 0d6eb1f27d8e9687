//! The outer training loop: collect real experience, fit the tokenizer and the
//! world model, then improve the policy inside imagination.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::behavior::{ActMode, Behavior, BehaviorStats, ObsStack};
use crate::buffer::{ReplayBuffer, Segment, Transition};
use crate::config::{RunConfig, TokenizerKind, WindowSampling};
use crate::env::{make_env, Env, Environment, Observation};
use crate::error::{Error, Result};
use crate::imagination::{imagine, ActionSource, ImaginedRollout};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng, Stream};
use crate::tensor::Tensor;
use crate::tokenizer::{BinsTokenizer, ObsTokenizer, VqTokenizer};
use crate::world_model::{DynamicsLoss, WmBatch, WorldModel};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Metric {
    Tokenizer { step: u64, epoch: u64, reconstruction: f64, commitment: f64, utilization: f64 },
    WorldModel { step: u64, epoch: u64, tokens: f64, reward: f64, discount: f64, avail: f64, total: f64, token_accuracy: f64 },
    Behavior { step: u64, epoch: u64, critic_loss: f64, actor_objective: f64, entropy: f64, mean_return: f64, mean_reward: f64 },
    Eval { step: u64, epoch: u64, success_rate: f64, mean_return: f64, episodes: usize },
    /// Episodes finished during collection since the previous record.
    Collect { step: u64, epoch: u64, episodes: u64, successes: u64, reward: f64 },
}

/// Counters and the metrics produced so far.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Real environment steps taken by `collect_experience`.
    pub env_steps: u64,
    pub epoch: u64,
    pub tokenizer_updates: u64,
    pub world_model_updates: u64,
    pub behavior_updates: u64,
    pub imagined_steps: u64,
    pub last_eval_step: u64,
    pub metrics: Vec<Metric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
}

/// Episode in progress on the training environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Live {
    obs: Observation,
    stack: ObsStack,
}

/// Every piece of mutable training state; serializing it is a full checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: RunConfig,
    pub env: Env,
    pub eval_env: Env,
    pub buffer: ReplayBuffer,
    pub tokenizer: ObsTokenizer,
    pub tokenizer_opt: Option<Adam>,
    /// Bin ranges are refit once from buffered data.
    pub bins_fitted: bool,
    pub world_model: WorldModel,
    pub world_model_opt: Adam,
    pub behavior: Behavior,
    pub state: RunState,
    live: Option<Live>,
    act_rng: Rng,
    sample_rng: Rng,
    dropout_rng: Rng,
    eval_rng: Rng,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

fn flat_mask(rows: &[Vec<bool>]) -> Vec<bool> {
    rows.iter().flatten().copied().collect()
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.env_spec();
        let env = make_env(spec.clone())?;
        let eval_env = make_env(spec.clone())?.reseeded(rng::derive_seed(config.seed, Stream::EvalEnv));
        let obs_dim = spec.obs_dim();
        let n_actions = spec.n_actions();
        let mut init = rng::stream(config.seed, Stream::Init);
        let (tokenizer, tokenizer_opt) = match config.tokenizer.kind {
            TokenizerKind::Vq => {
                let vq = VqTokenizer::new(config.vq_config(obs_dim), &mut init);
                let t = &config.tokenizer;
                let opt = Adam::new(AdamConfig::adamw(t.lr, t.weight_decay, t.grad_clip), &vq.store);
                (ObsTokenizer::Vq(vq), Some(opt))
            }
            TokenizerKind::Bins => (ObsTokenizer::Bins(BinsTokenizer::new(config.tokenizer.codebook_size, vec![-1.0; obs_dim], vec![1.0; obs_dim])), None),
        };
        let wm_cfg = config.world_model_config(tokenizer.vocab(), tokenizer.tokens_per_obs(), n_actions);
        let world_model = WorldModel::new(wm_cfg, &mut init)?;
        let d = &config.dynamics;
        let world_model_opt = Adam::new(AdamConfig::adamw(d.lr, d.weight_decay, d.grad_clip), &world_model.store);
        let behavior = Behavior::new(config.behavior.clone(), obs_dim, spec.n_agents, n_actions, &mut init);
        Ok(Self {
            buffer: ReplayBuffer::new(config.schedule.buffer_capacity),
            act_rng: rng::stream(config.seed, Stream::Sampling),
            sample_rng: rng::stream(config.seed, Stream::Buffer),
            dropout_rng: rng::stream(config.seed, Stream::Dropout),
            eval_rng: rng::stream(config.seed, Stream::EvalEnv),
            config,
            env,
            eval_env,
            tokenizer,
            tokenizer_opt,
            bins_fitted: false,
            world_model,
            world_model_opt,
            behavior,
            state: RunState::default(),
            live: None,
        })
    }

    fn n_agents(&self) -> usize {
        self.config.env.n_agents
    }

    fn obs_dim(&self) -> usize {
        self.tokenizer.obs_dim()
    }

    fn start_episode(tokenizer: &ObsTokenizer, env: &mut Env, stack: usize) -> Result<Live> {
        let obs = env.reset();
        let recon = tokenizer.reconstruct(&flat(&obs.joint_obs))?;
        let stack = ObsStack::new(stack, tokenizer.obs_dim(), &recon);
        Ok(Live { obs, stack })
    }

    /// Steps the training environment `n` times with the current policy acting
    /// on tokenizer reconstructions, resetting whenever an episode ends.
    pub fn collect_experience(&mut self, n: usize) -> Result<()> {
        let stack = self.config.behavior.stack;
        let (mut episodes, mut successes, mut reward) = (0, 0, 0.0);
        for _ in 0..n {
            let mut live = match self.live.take() {
                Some(l) => l,
                None => Self::start_episode(&self.tokenizer, &mut self.env, stack)?,
            };
            let joint: Vec<usize> = if self.state.env_steps < self.config.schedule.warmup_steps {
                live.obs.avail.iter().map(|m| Self::uniform_action(m, &mut self.act_rng)).collect()
            } else {
                let masks = flat_mask(&live.obs.avail);
                let acts = self.behavior.actor.act_batch(&live.stack.data, &masks, ActMode::Sample, &mut self.act_rng)?;
                acts.iter().map(|a| a.0).collect()
            };
            let rec = self.env.step(&joint)?;
            self.state.env_steps += 1;
            let done = rec.done();
            reward += rec.team_reward;
            episodes += done as u64;
            successes += rec.success as u64;
            self.buffer.push(
                Transition { obs: live.obs.joint_obs, avail: live.obs.avail, action: joint, reward: rec.team_reward, continuation: rec.continuation },
                done,
            );
            if !done {
                let recon = self.tokenizer.reconstruct(&flat(&rec.joint_obs))?;
                live.stack.push(&recon);
                self.live = Some(Live { obs: Observation { joint_obs: rec.joint_obs, avail: rec.avail }, stack: live.stack });
            }
        }
        if n > 0 {
            self.state.metrics.push(Metric::Collect { step: self.state.env_steps, epoch: self.state.epoch, episodes, successes, reward });
        }
        Ok(())
    }

    fn uniform_action(mask: &[bool], rng: &mut Rng) -> usize {
        let ok: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
        ok[rng::below(rng, ok.len())]
    }

    fn sample_observations(&mut self, rows: usize) -> Result<Tensor> {
        let n = self.n_agents();
        let d = self.obs_dim();
        let mut data = Vec::with_capacity(rows * d);
        while data.len() < rows * d {
            let (obs, _) = self.buffer.sample_step(&mut self.sample_rng)?;
            for o in obs.iter().take(rows - data.len() / d) {
                data.extend_from_slice(o);
            }
        }
        debug_assert!(n > 0);
        Ok(Tensor::from_vec(&[rows, d], data))
    }

    /// One tokenizer update; a no-op for the bins tokenizer beyond the one-time range fit.
    pub fn tokenizer_step(&mut self) -> Result<Option<(f64, f64, f64)>> {
        if let ObsTokenizer::Bins(b) = &mut self.tokenizer {
            if !self.bins_fitted {
                let limit = self.config.tokenizer.bins_fit_limit;
                *b = BinsTokenizer::fit(b.bins, b.obs_dim(), self.buffer.observations(), limit);
                self.bins_fitted = true;
            }
            return Ok(None);
        }
        let obs = self.sample_observations(self.config.tokenizer.batch_size)?;
        let ObsTokenizer::Vq(vq) = &mut self.tokenizer else { unreachable!() };
        let (loss, mut grads) = vq.loss_and_grads(&obs, &mut self.sample_rng);
        let beta = vq.config.beta;
        if !loss.value(beta).is_finite() || !grads.all_finite() {
            return Err(Error::NanLoss { phase: "tokenizer".to_string(), detail: alloc::format!("reconstruction {} commitment {}", loss.reconstruction, loss.commitment) });
        }
        vq.ema_update(&loss.latents, &loss.assignments);
        if let Some(opt) = self.tokenizer_opt.as_mut() {
            opt.step(&mut vq.store, &mut grads);
        }
        self.state.tokenizer_updates += 1;
        Ok(Some((loss.reconstruction, loss.commitment, vq.codebook.utilization())))
    }

    /// Teacher-forced batch of `batch` segments of the training horizon.
    pub fn sample_wm_batch(&mut self, batch: usize) -> Result<WmBatch> {
        let h = self.config.dynamics.horizon;
        let draw = |b: &ReplayBuffer, r: &mut Rng| match self.config.dynamics.windows {
            WindowSampling::Valid => b.sample_segment(h, r),
            WindowSampling::TailPadded => b.sample_tail_padded(h, r),
        };
        let segs: Vec<Segment> = (0..batch).map(|_| draw(&self.buffer, &mut self.sample_rng)).collect::<Result<_>>()?;
        WmBatch::from_segments(&segs, &self.tokenizer)
    }

    /// One joint update of dynamics and aggregator. Parameters are untouched on a non-finite loss.
    pub fn world_model_step(&mut self) -> Result<DynamicsLoss> {
        let batch = self.sample_wm_batch(self.config.dynamics.batch_size)?;
        let seed = (self.config.dynamics.dropout > 0.0).then(|| rand::Rng::random::<u64>(&mut self.dropout_rng));
        let (loss, mut grads) = self.world_model.loss_and_grads(&batch, seed)?;
        if !grads.all_finite() {
            return Err(Error::NanLoss { phase: "dynamics".to_string(), detail: "non-finite gradient".to_string() });
        }
        self.world_model_opt.step(&mut self.world_model.store, &mut grads);
        self.state.world_model_updates += 1;
        Ok(loss)
    }

    /// Tokenizer epochs followed by world-model epochs, so dynamics never trains on an untrained codebook.
    pub fn train_world_model(&mut self, tokenizer_epochs: usize, world_model_epochs: usize) -> Result<()> {
        if self.buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let (step, epoch) = (self.state.env_steps, self.state.epoch);
        let mut tok = Vec::new();
        for _ in 0..tokenizer_epochs.max(self.bins_pending() as usize) {
            if let Some(t) = self.tokenizer_step()? {
                tok.push(t);
            }
        }
        if !tok.is_empty() {
            self.state.metrics.push(Metric::Tokenizer {
                step,
                epoch,
                reconstruction: mean(tok.iter().map(|t| t.0)),
                commitment: mean(tok.iter().map(|t| t.1)),
                utilization: tok.last().unwrap().2,
            });
            if let ObsTokenizer::Vq(vq) = &mut self.tokenizer {
                vq.codebook.reset_usage();
            }
        }
        let mut wm = Vec::with_capacity(world_model_epochs);
        for _ in 0..world_model_epochs {
            wm.push(self.world_model_step()?);
        }
        if !wm.is_empty() {
            self.state.metrics.push(Metric::WorldModel {
                step,
                epoch,
                tokens: mean(wm.iter().map(|l| l.tokens)),
                reward: mean(wm.iter().map(|l| l.reward)),
                discount: mean(wm.iter().map(|l| l.discount)),
                avail: mean(wm.iter().map(|l| l.avail)),
                total: mean(wm.iter().map(|l| l.total)),
                token_accuracy: mean(wm.iter().map(|l| l.token_accuracy)),
            });
        }
        Ok(())
    }

    fn bins_pending(&self) -> bool {
        matches!(self.tokenizer, ObsTokenizer::Bins(_)) && !self.bins_fitted
    }

    /// Imagined rollouts from `rollouts` uniformly drawn buffer states.
    pub fn imagine_batch(&mut self) -> Result<ImaginedRollout> {
        let cfg = self.config.imagine_config();
        let mut obs = Vec::with_capacity(cfg.rollouts * self.n_agents() * self.obs_dim());
        let mut avail = Vec::new();
        for _ in 0..cfg.rollouts {
            let (o, a) = self.buffer.sample_step(&mut self.sample_rng)?;
            obs.extend(flat(&o));
            avail.extend(flat_mask(&a));
        }
        let source = ActionSource::Policy { actor: &self.behavior.actor, mode: ActMode::Sample };
        imagine(&self.world_model, &self.tokenizer, source, &obs, &avail, &cfg, &mut self.act_rng)
    }

    /// Policy improvement purely inside the world model; touches no environment.
    pub fn train_agents(&mut self, updates: usize) -> Result<()> {
        if self.state.world_model_updates == 0 {
            return Err(Error::InvalidConfig("train the world model before the agents".to_string()));
        }
        let mut stats: Vec<BehaviorStats> = Vec::with_capacity(updates);
        for _ in 0..updates {
            let rollout = self.imagine_batch()?;
            self.state.imagined_steps += (rollout.rollouts * rollout.horizon) as u64;
            stats.push(self.behavior.update(&rollout.to_behavior_batch()?)?);
            self.state.behavior_updates += 1;
        }
        if !stats.is_empty() {
            self.state.metrics.push(Metric::Behavior {
                step: self.state.env_steps,
                epoch: self.state.epoch,
                critic_loss: mean(stats.iter().map(|s| s.critic_loss)),
                actor_objective: mean(stats.iter().map(|s| s.actor_objective)),
                entropy: mean(stats.iter().map(|s| s.entropy)),
                mean_return: mean(stats.iter().map(|s| s.mean_return)),
                mean_reward: mean(stats.iter().map(|s| s.mean_reward)),
            });
        }
        Ok(())
    }

    /// Greedy policy on the separate evaluation environment.
    pub fn evaluate(&mut self, episodes: usize) -> Result<EvalReport> {
        let (eps, wins) = self.play(episodes, ActMode::Greedy)?;
        let total: f64 = eps.iter().flat_map(|e| e.iter().map(|t| t.reward)).sum();
        let n = episodes.max(1) as f64;
        Ok(EvalReport { success_rate: wins as f64 / n, mean_return: total / n, episodes })
    }

    /// Episodes of the current policy on the evaluation environment, as a buffer.
    pub fn policy_episodes(&mut self, episodes: usize, mode: ActMode) -> Result<ReplayBuffer> {
        let (eps, _) = self.play(episodes, mode)?;
        let mut b = ReplayBuffer::new(eps.iter().map(|e| e.len()).sum::<usize>().max(1));
        for e in eps {
            b.append_episode(e);
        }
        Ok(b)
    }

    fn play(&mut self, episodes: usize, mode: ActMode) -> Result<(Vec<Vec<Transition>>, usize)> {
        let stack = self.config.behavior.stack;
        let mut wins = 0;
        let mut out = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut live = Self::start_episode(&self.tokenizer, &mut self.eval_env, stack)?;
            let mut steps = Vec::new();
            loop {
                let masks = flat_mask(&live.obs.avail);
                let acts = self.behavior.actor.act_batch(&live.stack.data, &masks, mode, &mut self.eval_rng)?;
                let joint: Vec<usize> = acts.iter().map(|a| a.0).collect();
                let rec = self.eval_env.step(&joint)?;
                steps.push(Transition { obs: live.obs.joint_obs, avail: live.obs.avail, action: joint, reward: rec.team_reward, continuation: rec.continuation });
                if rec.done() {
                    wins += rec.success as usize;
                    break;
                }
                live.stack.push(&self.tokenizer.reconstruct(&flat(&rec.joint_obs))?);
                live.obs = Observation { joint_obs: rec.joint_obs, avail: rec.avail };
            }
            out.push(steps);
        }
        Ok((out, wins))
    }

    pub fn done(&self) -> bool {
        self.state.env_steps >= self.config.schedule.total_env_steps || self.reached_target()
    }

    fn reached_target(&self) -> bool {
        let Some(target) = self.config.schedule.target_success else { return false };
        matches!(self.state.metrics.iter().rev().find(|m| matches!(m, Metric::Eval { .. })), Some(Metric::Eval { success_rate, .. }) if *success_rate >= target)
    }

    /// One outer epoch: collect, fit the world model, then learn behavior.
    /// Returns the evaluation if one was due.
    pub fn run_epoch(&mut self) -> Result<Option<EvalReport>> {
        let s = self.config.schedule.clone();
        let remaining = s.total_env_steps.saturating_sub(self.state.env_steps) as usize;
        self.collect_experience(s.transitions_per_epoch.min(remaining))?;
        self.train_world_model(s.tokenizer_epochs, s.world_model_epochs)?;
        self.train_agents(s.policy_updates)?;
        self.state.epoch += 1;
        let due = if s.eval_every == 0 {
            self.state.env_steps >= s.total_env_steps
        } else {
            self.state.env_steps >= self.state.last_eval_step + s.eval_every || self.state.env_steps >= s.total_env_steps
        };
        if !due {
            return Ok(None);
        }
        let report = self.evaluate(s.eval_episodes)?;
        self.state.last_eval_step = self.state.env_steps;
        self.state.metrics.push(Metric::Eval {
            step: self.state.env_steps,
            epoch: self.state.epoch,
            success_rate: report.success_rate,
            mean_return: report.mean_return,
            episodes: report.episodes,
        });
        Ok(Some(report))
    }

    /// Epochs until the budget (or the target success rate) is reached.
    /// `after_epoch` sees the trainer after every epoch, e.g. to checkpoint.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.done() {
            self.run_epoch()?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::AggregatorKind;

    fn tiny(seed: u64) -> RunConfig {
        let mut c = RunConfig::desk_coop_switch(seed);
        c.tokenizer.hidden = 16;
        c.tokenizer.batch_size = 16;
        c.dynamics.d_model = 16;
        c.dynamics.layers = 1;
        c.dynamics.horizon = 4;
        c.dynamics.batch_size = 4;
        c.aggregator.head_dim = 8;
        c.imagination.horizon = 4;
        c.imagination.rollouts = 4;
        c.behavior.hidden = 16;
        c.schedule = crate::config::Schedule { total_env_steps: 60, transitions_per_epoch: 30, tokenizer_epochs: 2, world_model_epochs: 2, policy_updates: 1, eval_every: 30, eval_episodes: 1, ..Default::default() };
        c
    }

    #[test]
    fn collection_counts_steps_and_resets() {
        let mut t = Trainer::new(tiny(0)).unwrap();
        t.collect_experience(100).unwrap();
        assert_eq!(t.buffer.len(), 100);
        assert_eq!(t.state.env_steps, 100);
        assert_eq!(t.env.steps_taken(), 100);
        // 50-step limit forces at least one reset
        assert!(t.buffer.n_episodes() >= 2);
        let last_of_first = t.buffer.episodes().next().unwrap().steps.last().unwrap().continuation;
        assert_eq!(last_of_first, 0.0);
    }

    #[test]
    fn agents_phase_takes_no_env_steps() {
        let mut t = Trainer::new(tiny(1)).unwrap();
        t.collect_experience(40).unwrap();
        t.train_world_model(1, 1).unwrap();
        let before = (t.state.env_steps, t.env.steps_taken(), t.eval_env.steps_taken());
        t.train_agents(2).unwrap();
        assert_eq!(before, (t.state.env_steps, t.env.steps_taken(), t.eval_env.steps_taken()));
        assert_eq!(t.state.imagined_steps, 2 * 4 * 4);
    }

    #[test]
    fn run_respects_budget_and_logs_evals() {
        let mut t = Trainer::new(tiny(2)).unwrap();
        let mut epochs = 0;
        t.run(|_| {
            epochs += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs, 2);
        assert_eq!(t.state.env_steps, 60);
        assert_eq!(t.env.steps_taken(), 60);
        assert_eq!(t.state.metrics.iter().filter(|m| matches!(m, Metric::Eval { .. })).count(), 2);
    }

    #[test]
    fn resumed_copy_continues_identically() {
        let mut a = Trainer::new(tiny(3)).unwrap();
        a.run_epoch().unwrap();
        let mut b = a.clone();
        a.run_epoch().unwrap();
        b.run_epoch().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bins_and_centralized_variants_run() {
        let mut c = tiny(4);
        c.tokenizer.kind = TokenizerKind::Bins;
        c.tokenizer.codebook_size = 16;
        let mut t = Trainer::new(c).unwrap();
        t.run_epoch().unwrap();
        assert!(t.bins_fitted);
        let mut c = tiny(5);
        c.dynamics.centralized = true;
        c.aggregator.kind = AggregatorKind::None;
        Trainer::new(c).unwrap().run_epoch().unwrap();
    }

    #[test]
    fn world_model_overfits_fixed_batch() {
        let mut t = Trainer::new(tiny(6)).unwrap();
        t.collect_experience(60).unwrap();
        t.train_world_model(20, 0).unwrap();
        let batch = t.sample_wm_batch(4).unwrap();
        let first = t.world_model.loss(&batch).unwrap().total;
        for _ in 0..100 {
            let (_, mut g) = t.world_model.loss_and_grads(&batch, None).unwrap();
            t.world_model_opt.step(&mut t.world_model.store, &mut g);
        }
        let last = t.world_model.loss(&batch).unwrap().total;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }
}
