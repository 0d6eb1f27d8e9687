//! Multi-agent token world model.
//!
//! Each agent's local observation is tokenized by a shared VQ-VAE, a shared
//! causal Transformer models every agent's own token trajectory, and a
//! Perceiver compresses the joint (observation, action) tokens of all agents
//! into one global feature per agent that is spliced back into each local
//! sequence. Policies are learned with an attention-augmented actor-critic
//! purely inside imagined rollouts.
//!
//! The crate is `no_std` + `alloc`; file formats, the CLI and wall-clock
//! measurements live in the companion `mawm` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod aggregator;
pub mod analysis;
pub mod behavior;
pub mod buffer;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod graph;
pub mod imagination;
pub mod kernels;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
pub use tensor::Tensor;
