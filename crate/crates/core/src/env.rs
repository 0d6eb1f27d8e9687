//! Built-in cooperative environments.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, Rng};

/// Discount label recorded on non-terminal steps.
pub const CONTINUATION: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CoopSwitch,
    CoupledChain,
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coop-switch" | "coop_switch" => Ok(Self::CoopSwitch),
            "coupled-chain" | "coupled_chain" => Ok(Self::CoupledChain),
            other => Err(Error::UnknownEnv(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CoopSwitch => "coop-switch",
            Self::CoupledChain => "coupled-chain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Grid side for coop-switch; latent state size for coupled-chain.
    pub size: usize,
    pub episode_limit: usize,
    pub seed: u64,
}

impl EnvSpec {
    pub fn coop_switch(n_agents: usize, seed: u64) -> Self {
        Self { kind: EnvKind::CoopSwitch, n_agents, size: 5, episode_limit: 50, seed }
    }

    pub fn coupled_chain(n_agents: usize, seed: u64) -> Self {
        Self { kind: EnvKind::CoupledChain, n_agents, size: 4, episode_limit: 50, seed }
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::CoopSwitch => 8 + 4 * (self.n_agents - 1),
            EnvKind::CoupledChain => self.size,
        }
    }

    pub fn n_actions(&self) -> usize {
        5
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::TooFewAgents(self.n_agents));
        }
        if self.episode_limit == 0 {
            return Err(Error::InvalidConfig("episode_limit must be >= 1".to_string()));
        }
        let min_size = match self.kind {
            EnvKind::CoopSwitch => 2,
            EnvKind::CoupledChain => 1,
        };
        if self.size < min_size {
            return Err(Error::InvalidConfig("environment size too small".to_string()));
        }
        Ok(())
    }
}

/// Observation and masks after a reset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub joint_obs: Vec<Vec<f64>>,
    pub avail: Vec<Vec<bool>>,
}

/// Result of one joint step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub joint_obs: Vec<Vec<f64>>,
    pub joint_action: Vec<usize>,
    pub team_reward: f64,
    pub continuation: f64,
    pub avail: Vec<Vec<bool>>,
    /// Goal reached (as opposed to time-limit or no termination).
    pub success: bool,
}

impl StepRecord {
    pub fn done(&self) -> bool {
        self.continuation == 0.0
    }
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self) -> Observation;
    fn step(&mut self, joint_action: &[usize]) -> Result<StepRecord>;
    /// Total `step` calls over the instance lifetime.
    fn steps_taken(&self) -> u64;
}

const MOVES: [(i64, i64); 5] = [(0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)];

/// Grid where each agent must stand on its own switch at the same time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoopSwitch {
    spec: EnvSpec,
    rng: Rng,
    switches: Vec<(i64, i64)>,
    pos: Vec<(i64, i64)>,
    t: usize,
    done: bool,
    steps: u64,
}

impl CoopSwitch {
    fn new(spec: EnvSpec) -> Self {
        let mut rng = rng::seeded(spec.seed);
        let w = spec.size as i64;
        let mut switches = Vec::new();
        while switches.len() < spec.n_agents {
            let c = (rng::below(&mut rng, w as usize) as i64, rng::below(&mut rng, w as usize) as i64);
            if !switches.contains(&c) {
                switches.push(c);
            }
        }
        let pos = switches.clone();
        Self { spec, rng, switches, pos, t: 0, done: true, steps: 0 }
    }

    pub fn switches(&self) -> &[(i64, i64)] {
        &self.switches
    }

    pub fn positions(&self) -> &[(i64, i64)] {
        &self.pos
    }

    fn norm(&self, v: i64) -> f64 {
        v as f64 / (self.spec.size as f64 - 1.0)
    }

    fn avail_for(&self, i: usize) -> Vec<bool> {
        let w = self.spec.size as i64;
        let (x, y) = self.pos[i];
        MOVES.iter().map(|&(dx, dy)| (0..w).contains(&(x + dx)) && (0..w).contains(&(y + dy))).collect()
    }

    fn obs_for(&self, i: usize) -> Vec<f64> {
        let (x, y) = self.pos[i];
        let (sx, sy) = self.switches[i];
        let mut o = vec![self.norm(x), self.norm(y), self.norm(sx - x), self.norm(sy - y)];
        for ok in self.avail_for(i).iter().skip(1) {
            o.push(if *ok { 0.0 } else { 1.0 });
        }
        for j in (0..self.spec.n_agents).filter(|&j| j != i) {
            let (xj, yj) = self.pos[j];
            let (sxj, syj) = self.switches[j];
            o.extend_from_slice(&[self.norm(xj - x), self.norm(yj - y), self.norm(sxj - xj), self.norm(syj - yj)]);
        }
        o
    }

    fn observe(&self) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let n = self.spec.n_agents;
        ((0..n).map(|i| self.obs_for(i)).collect(), (0..n).map(|i| self.avail_for(i)).collect())
    }

    fn all_on_switch(&self) -> bool {
        self.pos.iter().zip(&self.switches).all(|(p, s)| p == s)
    }
}

impl Environment for CoopSwitch {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Observation {
        let w = self.spec.size;
        loop {
            self.pos = (0..self.spec.n_agents).map(|_| (rng::below(&mut self.rng, w) as i64, rng::below(&mut self.rng, w) as i64)).collect();
            if !self.all_on_switch() {
                break;
            }
        }
        self.t = 0;
        self.done = false;
        let (joint_obs, avail) = self.observe();
        Observation { joint_obs, avail }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepRecord> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        check_actions(joint_action, self.spec.n_agents, |i| self.avail_for(i))?;
        self.steps += 1;
        for (p, &a) in self.pos.iter_mut().zip(joint_action) {
            p.0 += MOVES[a].0;
            p.1 += MOVES[a].1;
        }
        self.t += 1;
        let success = self.all_on_switch();
        let timeout = self.t >= self.spec.episode_limit;
        self.done = success || timeout;
        let (joint_obs, avail) = self.observe();
        Ok(StepRecord {
            joint_obs,
            joint_action: joint_action.to_vec(),
            team_reward: if success { 1.0 } else { 0.0 },
            continuation: if self.done { 0.0 } else { CONTINUATION },
            avail,
            success,
        })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}

fn check_actions(joint_action: &[usize], n: usize, avail: impl Fn(usize) -> Vec<bool>) -> Result<()> {
    if joint_action.len() != n {
        return Err(Error::ActionCount { expected: n, got: joint_action.len() });
    }
    for (i, &a) in joint_action.iter().enumerate() {
        if !avail(i).get(a).copied().unwrap_or(false) {
            return Err(Error::UnavailableAction { agent: i, action: a });
        }
    }
    Ok(())
}

/// Linear agents whose states are driven by everyone else's mean action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledChain {
    spec: EnvSpec,
    rng: Rng,
    /// Own-action input direction.
    b: Vec<f64>,
    /// Coupling direction for the others' mean action.
    c: Vec<f64>,
    state: Vec<Vec<f64>>,
    t: usize,
    done: bool,
    steps: u64,
}

impl CoupledChain {
    pub const DECAY: f64 = 0.9;
    pub const NOISE: f64 = 0.01;

    fn new(spec: EnvSpec) -> Self {
        let mut rng = rng::seeded(spec.seed);
        let d = spec.size;
        let unit = |rng: &mut Rng| {
            let v: Vec<f64> = (0..d).map(|_| rng::normal(rng)).collect();
            let n = math::sqrt(v.iter().map(|x| x * x).sum());
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let b: Vec<f64> = unit(&mut rng).into_iter().map(|x| 0.3 * x).collect();
        let c: Vec<f64> = unit(&mut rng).into_iter().map(|x| 0.6 * x).collect();
        Self { spec, rng, b, c, state: Vec::new(), t: 0, done: true, steps: 0 }
    }

    /// Centre of action bin `a` in `[-1, 1]`.
    pub fn action_value(a: usize) -> f64 {
        -1.0 + 0.5 * a as f64
    }

    pub fn state(&self) -> &[Vec<f64>] {
        &self.state
    }

    fn avail(&self) -> Vec<Vec<bool>> {
        vec![vec![true; 5]; self.spec.n_agents]
    }

    /// Noise-free part of the transition, exposed for tests.
    pub fn mean_next(&self, joint_action: &[usize]) -> Vec<Vec<f64>> {
        let n = self.spec.n_agents;
        let u: Vec<f64> = joint_action.iter().map(|&a| Self::action_value(a)).collect();
        let total: f64 = u.iter().sum();
        (0..n)
            .map(|i| {
                let others = (total - u[i]) / (n - 1) as f64;
                self.state[i].iter().enumerate().map(|(k, &s)| Self::DECAY * s + self.b[k] * u[i] + self.c[k] * others).collect()
            })
            .collect()
    }
}

impl Environment for CoupledChain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self) -> Observation {
        let d = self.spec.size;
        self.state = (0..self.spec.n_agents).map(|_| (0..d).map(|_| 2.0 * rng::uniform(&mut self.rng) - 1.0).collect()).collect();
        self.t = 0;
        self.done = false;
        Observation { joint_obs: self.state.clone(), avail: self.avail() }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepRecord> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let avail = self.avail();
        check_actions(joint_action, self.spec.n_agents, |i| avail[i].clone())?;
        self.steps += 1;
        let mut next = self.mean_next(joint_action);
        for s in next.iter_mut().flatten() {
            *s += Self::NOISE * rng::normal(&mut self.rng);
        }
        self.state = next;
        self.t += 1;
        self.done = self.t >= self.spec.episode_limit;
        let n = self.spec.n_agents as f64;
        let reward = -self.state.iter().map(|s| math::sqrt(s.iter().map(|x| x * x).sum())).sum::<f64>() / n;
        Ok(StepRecord {
            joint_obs: self.state.clone(),
            joint_action: joint_action.to_vec(),
            team_reward: reward,
            continuation: if self.done { 0.0 } else { CONTINUATION },
            avail,
            success: false,
        })
    }

    fn steps_taken(&self) -> u64 {
        self.steps
    }
}

/// Any built-in environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Env {
    CoopSwitch(CoopSwitch),
    CoupledChain(CoupledChain),
}

pub fn make_env(spec: EnvSpec) -> Result<Env> {
    spec.validate()?;
    Ok(match spec.kind {
        EnvKind::CoopSwitch => Env::CoopSwitch(CoopSwitch::new(spec)),
        EnvKind::CoupledChain => Env::CoupledChain(CoupledChain::new(spec)),
    })
}

impl Env {
    /// Same layout and dynamics constants, fresh stream for starts and noise.
    pub fn reseeded(mut self, seed: u64) -> Self {
        match &mut self {
            Env::CoopSwitch(e) => e.rng = rng::seeded(seed),
            Env::CoupledChain(e) => e.rng = rng::seeded(seed),
        }
        self
    }
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::CoopSwitch(e) => e.spec(),
            Env::CoupledChain(e) => e.spec(),
        }
    }

    fn reset(&mut self) -> Observation {
        match self {
            Env::CoopSwitch(e) => e.reset(),
            Env::CoupledChain(e) => e.reset(),
        }
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<StepRecord> {
        match self {
            Env::CoopSwitch(e) => e.step(joint_action),
            Env::CoupledChain(e) => e.step(joint_action),
        }
    }

    fn steps_taken(&self) -> u64 {
        match self {
            Env::CoopSwitch(e) => e.steps_taken(),
            Env::CoupledChain(e) => e.steps_taken(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dimensions() {
        let e = make_env(EnvSpec::coop_switch(2, 0)).unwrap();
        assert_eq!(e.spec().obs_dim(), 12);
        assert_eq!(e.spec().n_actions(), 5);
        let mut e = make_env(EnvSpec::coupled_chain(3, 0)).unwrap();
        assert_eq!(e.spec().obs_dim(), 4);
        assert_eq!(e.reset().joint_obs[0].len(), 4);
        assert_eq!(make_env(EnvSpec::coop_switch(1, 0)).unwrap_err(), Error::TooFewAgents(1));
        assert!(matches!(EnvKind::parse("smac"), Err(Error::UnknownEnv(_))));
    }

    fn greedy_toward(pos: (i64, i64), goal: (i64, i64)) -> usize {
        if pos.0 < goal.0 {
            3
        } else if pos.0 > goal.0 {
            4
        } else if pos.1 < goal.1 {
            1
        } else if pos.1 > goal.1 {
            2
        } else {
            0
        }
    }

    #[test]
    fn coop_switch_success_and_continuation() {
        let Env::CoopSwitch(mut e) = make_env(EnvSpec::coop_switch(2, 7)).unwrap() else { unreachable!() };
        e.reset();
        loop {
            let acts: Vec<usize> = (0..2).map(|i| greedy_toward(e.positions()[i], e.switches()[i])).collect();
            let r = e.step(&acts).unwrap();
            if r.done() {
                assert_eq!(r.team_reward, 1.0);
                assert_eq!(r.continuation, 0.0);
                assert!(r.success);
                break;
            }
            assert_eq!(r.team_reward, 0.0);
            assert_eq!(r.continuation, CONTINUATION);
        }
        assert!(e.step(&[0, 0]).is_err());
    }

    #[test]
    fn time_limit_terminates() {
        let mut spec = EnvSpec::coop_switch(2, 1);
        spec.episode_limit = 3;
        let mut e = make_env(spec).unwrap();
        let o = e.reset();
        let mut avail = o.avail;
        for t in 1..=3 {
            // stay is always available; succeed only by accident, which stay cannot cause
            let r = e.step(&[0, 0]).unwrap();
            avail = r.avail.clone();
            assert_eq!(r.continuation, if t == 3 { 0.0 } else { CONTINUATION });
        }
        assert!(avail.iter().all(|m| m[0]));
    }

    #[test]
    fn unavailable_action_rejected() {
        let Env::CoopSwitch(mut e) = make_env(EnvSpec::coop_switch(2, 2)).unwrap() else { unreachable!() };
        let o = e.reset();
        let (agent, action) = (0..2).flat_map(|i| (0..5).map(move |a| (i, a))).find(|&(i, a)| !o.avail[i][a]).unwrap_or((0, 9));
        let mut acts = vec![0, 0];
        acts[agent] = action;
        assert!(matches!(e.step(&acts), Err(Error::UnavailableAction { .. })));
        assert_eq!(e.steps_taken(), 0);
    }

    #[test]
    fn coupled_chain_depends_on_other_agents() {
        let Env::CoupledChain(mut e) = make_env(EnvSpec::coupled_chain(3, 4)).unwrap() else { unreachable!() };
        e.reset();
        let a = e.mean_next(&[2, 2, 2]);
        let b = e.mean_next(&[2, 0, 2]);
        assert!(a[0].iter().zip(&b[0]).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn deterministic_and_masks_nonempty(seed in 0u64..1000, acts in proptest::collection::vec(0usize..5, 1..40)) {
            let run = || {
                let mut e = make_env(EnvSpec::coop_switch(2, seed)).unwrap();
                let mut o = e.reset();
                let mut out = Vec::new();
                for &a in &acts {
                    prop_assert!(o.avail.iter().all(|m| m.iter().any(|&x| x)));
                    let joint: Vec<usize> = o.avail.iter().map(|m| if m[a] { a } else { 0 }).collect();
                    let r = e.step(&joint).unwrap();
                    o = if r.done() { e.reset() } else { Observation { joint_obs: r.joint_obs.clone(), avail: r.avail.clone() } };
                    out.push(r);
                }
                Ok(out)
            };
            prop_assert_eq!(run()?, run()?);
        }
    }
}
