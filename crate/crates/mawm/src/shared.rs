//! Replay buffer shared between one writer and concurrent readers.

use std::sync::{Arc, RwLock};

use mawm_core::buffer::{ReplayBuffer, Segment, Transition};
use mawm_core::rng::Rng;

#[derive(Clone)]
pub struct SharedBuffer {
    inner: Arc<RwLock<ReplayBuffer>>,
}

impl SharedBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { inner: Arc::new(RwLock::new(ReplayBuffer::new(capacity))) }
    }

    pub fn push(&self, step: Transition, done: bool) {
        self.inner.write().expect("buffer lock").push(step, done);
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("buffer lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `count` segments under one read lock, so they share a snapshot.
    pub fn sample_segments(&self, count: usize, h: usize, rng: &mut Rng) -> mawm_core::Result<Vec<Segment>> {
        let b = self.inner.read().expect("buffer lock");
        (0..count).map(|_| b.sample_segment(h, rng)).collect()
    }

    pub fn snapshot(&self) -> ReplayBuffer {
        self.inner.read().expect("buffer lock").clone()
    }
}
