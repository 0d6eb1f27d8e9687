//! File formats, artifacts and experiment drivers around `mawm-core`.

pub mod ablation;
pub mod checkpoint;
pub mod config_file;
pub mod episode_log;
pub mod metrics;
pub mod plot;
pub mod shared;

pub use mawm_core as core;
