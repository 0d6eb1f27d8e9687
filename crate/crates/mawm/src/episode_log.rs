//! Line-delimited JSON episode logs.
//!
//! One record per environment step:
//! `{"episode": e, "t": t, "obs": [[f64; obs_dim]; n], "actions": [usize; n],
//!   "reward": f64, "continuation": f64, "avail": ["10110", ...]}`
//! where `obs` and `avail` describe the state the actions were taken in and
//! each mask is a bit string over the action set.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mawm_core::behavior::{act, ActMode};
use mawm_core::buffer::{ReplayBuffer, Transition};
use mawm_core::env::{make_env, EnvSpec, Environment};
use mawm_core::rng::{self, Rng};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub episode: usize,
    pub t: usize,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub continuation: f64,
    pub avail: Vec<String>,
}

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn unbits(s: &str) -> anyhow::Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(anyhow::anyhow!("bad mask character {other:?}")),
        })
        .collect()
}

impl StepLine {
    pub fn new(episode: usize, t: usize, tr: &Transition) -> Self {
        Self {
            episode,
            t,
            obs: tr.obs.clone(),
            actions: tr.action.clone(),
            reward: tr.reward,
            continuation: tr.continuation,
            avail: tr.avail.iter().map(|m| bits(m)).collect(),
        }
    }

    pub fn transition(&self) -> anyhow::Result<Transition> {
        Ok(Transition {
            obs: self.obs.clone(),
            avail: self.avail.iter().map(|s| unbits(s)).collect::<anyhow::Result<_>>()?,
            action: self.actions.clone(),
            reward: self.reward,
            continuation: self.continuation,
        })
    }
}

/// Runs `episodes` episodes with uniformly random available actions.
pub fn random_rollouts(spec: EnvSpec, episodes: usize, rng: &mut Rng) -> mawm_core::Result<Vec<Vec<Transition>>> {
    let mut env = make_env(spec)?;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut o = env.reset();
        let mut steps = Vec::new();
        loop {
            let joint: Vec<usize> = o
                .avail
                .iter()
                .map(|m| act(&vec![0.0; m.len()], m, ActMode::Sample, rng).map(|a| a.0))
                .collect::<mawm_core::Result<_>>()?;
            let rec = env.step(&joint)?;
            steps.push(Transition { obs: o.joint_obs, avail: o.avail, action: joint, reward: rec.team_reward, continuation: rec.continuation });
            if rec.done() {
                break;
            }
            o = mawm_core::env::Observation { joint_obs: rec.joint_obs, avail: rec.avail };
        }
        out.push(steps);
    }
    Ok(out)
}

pub fn write(path: &Path, episodes: &[Vec<Transition>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (e, ep) in episodes.iter().enumerate() {
        for (t, tr) in ep.iter().enumerate() {
            serde_json::to_writer(&mut w, &StepLine::new(e, t, tr))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()
}

/// Reads a log back into episodes, split on the `episode` field.
pub fn read(path: &Path) -> anyhow::Result<Vec<Vec<Transition>>> {
    let r = BufReader::new(File::open(path)?);
    let mut out: Vec<Vec<Transition>> = Vec::new();
    let mut current = None;
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: StepLine = serde_json::from_str(&line)?;
        if current != Some(s.episode) {
            out.push(Vec::new());
            current = Some(s.episode);
        }
        out.last_mut().unwrap().push(s.transition()?);
    }
    Ok(out)
}

pub fn into_buffer(episodes: Vec<Vec<Transition>>, capacity: usize) -> ReplayBuffer {
    let mut b = ReplayBuffer::new(capacity);
    for ep in episodes {
        b.append_episode(ep);
    }
    b
}

/// Convenience for tests and the CLI: random episodes under a fixed seed.
pub fn seeded_rollouts(spec: EnvSpec, episodes: usize, seed: u64) -> mawm_core::Result<Vec<Vec<Transition>>> {
    random_rollouts(spec, episodes, &mut rng::seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_preserves_episode_boundaries_and_masks() {
        let eps = seeded_rollouts(EnvSpec::coop_switch(2, 0), 3, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("episodes.jsonl");
        write(&p, &eps).unwrap();
        let back = read(&p).unwrap();
        assert_eq!(back, eps);
        assert!(back.iter().all(|e| e.last().unwrap().continuation == 0.0));
    }
}
