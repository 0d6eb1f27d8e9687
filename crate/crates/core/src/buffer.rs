//! Replay buffer of real transitions grouped by episode.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// One joint step: observation at `t`, the action taken there and its outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub avail: Vec<Vec<bool>>,
    pub action: Vec<usize>,
    pub reward: f64,
    pub continuation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
}

/// Fixed-length window of one episode, right-padded when the episode is short.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// `[t][agent][dim]`
    pub obs: Vec<Vec<Vec<f64>>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub continuations: Vec<f64>,
    /// `true` on padded steps, which carry no loss.
    pub pad: Vec<bool>,
}

impl Segment {
    pub fn horizon(&self) -> usize {
        self.pad.len()
    }

    pub fn n_agents(&self) -> usize {
        self.obs[0].len()
    }

    pub fn valid_len(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    open: bool,
    size: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), episodes: VecDeque::new(), open: false, size: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Appends a step to the current episode; `done` closes it.
    pub fn push(&mut self, step: Transition, done: bool) {
        if !self.open {
            self.episodes.push_back(Episode::default());
            self.open = true;
        }
        self.episodes.back_mut().unwrap().steps.push(step);
        self.size += 1;
        if done {
            self.open = false;
        }
        while self.size > self.capacity && self.episodes.len() > 1 {
            let old = self.episodes.pop_front().unwrap();
            self.size -= old.steps.len();
        }
    }

    /// Appends a complete episode.
    pub fn append_episode(&mut self, steps: Vec<Transition>) {
        let n = steps.len();
        for (i, s) in steps.into_iter().enumerate() {
            self.push(s, i + 1 == n);
        }
    }

    fn windows(len: usize, h: usize) -> usize {
        if len >= h {
            len - h + 1
        } else {
            1
        }
    }

    /// Number of distinct windows of length `h`.
    pub fn n_windows(&self, h: usize) -> usize {
        self.episodes.iter().filter(|e| !e.steps.is_empty()).map(|e| Self::windows(e.steps.len(), h)).sum()
    }

    /// `(episode, start)` of window number `w` in enumeration order.
    pub fn window_at(&self, mut w: usize, h: usize) -> (usize, usize) {
        for (i, e) in self.episodes.iter().enumerate() {
            if e.steps.is_empty() {
                continue;
            }
            let n = Self::windows(e.steps.len(), h);
            if w < n {
                return (i, w);
            }
            w -= n;
        }
        panic!("window index out of range");
    }

    /// Uniform draw over all valid windows.
    pub fn sample_segment(&self, h: usize, rng: &mut Rng) -> Result<Segment> {
        let total = self.n_windows(h);
        if total == 0 {
            return Err(Error::EmptyBuffer);
        }
        let (e, s) = self.window_at(rng::below(rng, total), h);
        Ok(self.segment(e, s, h))
    }

    /// Window starting at a uniformly drawn stored step, right-padded past the
    /// episode end. Every step, terminal ones included, then appears at each
    /// window offset equally often.
    pub fn sample_tail_padded(&self, h: usize, rng: &mut Rng) -> Result<Segment> {
        if self.size == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut k = rng::below(rng, self.size);
        for (i, e) in self.episodes.iter().enumerate() {
            if k < e.steps.len() {
                return Ok(self.segment(i, k, h));
            }
            k -= e.steps.len();
        }
        unreachable!()
    }

    /// Window of `h` steps from `start` in episode `e`, padded past its end.
    pub fn segment(&self, e: usize, start: usize, h: usize) -> Segment {
        let steps = &self.episodes[e].steps;
        let n_agents = steps[0].obs.len();
        let dim = steps[0].obs[0].len();
        let n_act = steps[0].avail[0].len();
        let mut seg = Segment {
            obs: Vec::with_capacity(h),
            avail: Vec::with_capacity(h),
            actions: Vec::with_capacity(h),
            rewards: Vec::with_capacity(h),
            continuations: Vec::with_capacity(h),
            pad: Vec::with_capacity(h),
        };
        for t in start..start + h {
            match steps.get(t) {
                Some(s) => {
                    seg.obs.push(s.obs.clone());
                    seg.avail.push(s.avail.clone());
                    seg.actions.push(s.action.clone());
                    seg.rewards.push(s.reward);
                    seg.continuations.push(s.continuation);
                    seg.pad.push(false);
                }
                None => {
                    seg.obs.push(vec![vec![0.0; dim]; n_agents]);
                    seg.avail.push(vec![vec![true; n_act]; n_agents]);
                    seg.actions.push(vec![0; n_agents]);
                    seg.rewards.push(0.0);
                    seg.continuations.push(0.0);
                    seg.pad.push(true);
                }
            }
        }
        seg
    }

    /// Uniform draw of a stored step; returns `(joint obs, joint avail)`.
    pub fn sample_step(&self, rng: &mut Rng) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
        if self.size == 0 {
            return Err(Error::EmptyBuffer);
        }
        let mut k = rng::below(rng, self.size);
        for e in &self.episodes {
            if k < e.steps.len() {
                let s = &e.steps[k];
                return Ok((s.obs.clone(), s.avail.clone()));
            }
            k -= e.steps.len();
        }
        unreachable!()
    }

    /// Every stored per-agent observation, oldest first.
    pub fn observations(&self) -> impl Iterator<Item = &[f64]> {
        self.episodes.iter().flat_map(|e| e.steps.iter().flat_map(|s| s.obs.iter().map(|o| &o[..])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(v: f64) -> Transition {
        Transition { obs: vec![vec![v], vec![-v]], avail: vec![vec![true, true]; 2], action: vec![0, 1], reward: v, continuation: 0.99 }
    }

    fn episode(tag: f64, len: usize) -> Vec<Transition> {
        (0..len).map(|i| step(tag + i as f64)).collect()
    }

    #[test]
    fn window_counts_and_padding() {
        let mut b = ReplayBuffer::new(1000);
        assert_eq!(b.sample_segment(8, &mut rng::seeded(0)).unwrap_err(), Error::EmptyBuffer);
        b.append_episode(episode(0.0, 20));
        assert_eq!(b.n_windows(8), 13);
        let mut b = ReplayBuffer::new(1000);
        b.append_episode(episode(0.0, 5));
        let s = b.sample_segment(8, &mut rng::seeded(0)).unwrap();
        assert_eq!(s.horizon(), 8);
        assert_eq!(s.pad, vec![false, false, false, false, false, true, true, true]);
    }

    #[test]
    fn segments_never_mix_episodes() {
        let mut b = ReplayBuffer::new(1000);
        b.append_episode(episode(100.0, 6));
        b.append_episode(episode(200.0, 9));
        let mut r = rng::seeded(1);
        for _ in 0..200 {
            let s = b.sample_segment(4, &mut r).unwrap();
            let tags: Vec<f64> = s.rewards.iter().zip(&s.pad).filter(|(_, p)| !**p).map(|(x, _)| (x / 100.0).floor()).collect();
            assert!(tags.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn eviction_drops_whole_oldest_episodes() {
        let mut b = ReplayBuffer::new(10);
        b.append_episode(episode(0.0, 6));
        b.append_episode(episode(100.0, 6));
        assert_eq!(b.len(), 6);
        assert_eq!(b.n_episodes(), 1);
        assert!(b.len() <= b.capacity());
    }

    #[test]
    fn tail_padded_windows_reach_the_last_step() {
        let mut b = ReplayBuffer::new(1000);
        b.append_episode(episode(0.0, 6));
        let mut r = rng::seeded(3);
        let mut starts = [0usize; 6];
        for _ in 0..600 {
            let s = b.sample_tail_padded(4, &mut r).unwrap();
            starts[s.rewards[0] as usize] += 1;
            assert_eq!(s.valid_len(), (6 - s.rewards[0] as usize).min(4));
        }
        assert!(starts.iter().all(|&c| c > 60));
    }

    #[test]
    fn window_sampling_is_uniform() {
        let mut b = ReplayBuffer::new(1000);
        b.append_episode(episode(0.0, 7));
        b.append_episode(episode(100.0, 3));
        b.append_episode(episode(200.0, 10));
        let h = 4;
        let w = b.n_windows(h);
        assert_eq!(w, 4 + 1 + 7);
        let mut counts = vec![0usize; w];
        let mut r = rng::seeded(2);
        let draws = 24_000;
        for _ in 0..draws {
            let s = b.sample_segment(h, &mut r).unwrap();
            let first = s.rewards[0];
            let (e, off) = ((first / 100.0) as usize, (first % 100.0) as usize);
            let idx = match e {
                0 => off,
                1 => 4,
                _ => 5 + off,
            };
            counts[idx] += 1;
        }
        let exp = draws as f64 / w as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - exp).powi(2) / exp).sum();
        // 11 dof, p = 0.001 critical value
        assert!(chi2 < 31.26, "chi2 {chi2}");
    }
}
