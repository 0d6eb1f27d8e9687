use mawm_core::buffer::Transition;
use mawm_core::config::{RunConfig, Schedule};
use mawm_core::trainer::{Metric, Trainer};

fn small(seed: u64, warmup: u64) -> RunConfig {
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
    c.schedule = Schedule {
        total_env_steps: 80,
        transitions_per_epoch: 40,
        tokenizer_epochs: 2,
        world_model_epochs: 2,
        policy_updates: 1,
        eval_every: 40,
        eval_episodes: 1,
        warmup_steps: warmup,
        ..Default::default()
    };
    c
}

fn transitions(t: &Trainer) -> Vec<Transition> {
    t.buffer.episodes().flat_map(|e| e.steps.iter().cloned()).collect()
}

#[test]
fn same_seed_gives_the_same_run() {
    let mut a = Trainer::new(small(4, 0)).unwrap();
    let mut b = Trainer::new(small(4, 0)).unwrap();
    a.run(|_| Ok(())).unwrap();
    b.run(|_| Ok(())).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(transitions(&a), transitions(&b));
}

#[test]
fn warmup_actions_ignore_the_actor() {
    // a different actor width changes the initial policy but not the warm-up draws
    let mut wide = small(5, 40);
    wide.behavior.hidden = 32;
    let mut a = Trainer::new(small(5, 40)).unwrap();
    let mut b = Trainer::new(wide).unwrap();
    a.collect_experience(40).unwrap();
    b.collect_experience(40).unwrap();
    assert_eq!(transitions(&a), transitions(&b));
    for s in transitions(&a) {
        for (act, avail) in s.action.iter().zip(&s.avail) {
            assert!(avail[*act]);
        }
    }
}

#[test]
fn warmup_steps_count_toward_the_budget() {
    let mut t = Trainer::new(small(6, 40)).unwrap();
    t.run(|_| Ok(())).unwrap();
    assert_eq!(t.state.env_steps, 80);
    assert_eq!(t.state.metrics.iter().filter(|m| matches!(m, Metric::Collect { .. })).count(), 2);
    assert_eq!(t.state.metrics.iter().filter(|m| matches!(m, Metric::Eval { .. })).count(), 2);
}
