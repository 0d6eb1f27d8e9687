//! CBOR checkpoints of the complete trainer state.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use mawm_core::config::RunConfig;
use mawm_core::trainer::Trainer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding checkpoint: {0}")]
    Encode(String),
    #[error("decoding checkpoint: {0}")]
    Decode(String),
    #[error("checkpoint format {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint config hash does not match its contents")]
    Corrupt,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: u32,
    config_hash: String,
    trainer: Trainer,
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes atomically: a temporary sibling is renamed over `path`.
pub fn save(path: &Path, trainer: &Trainer) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let env = Envelope { format: FORMAT_VERSION, config_hash: config_hash(&trainer.config), trainer: trainer.clone() };
        let w = BufWriter::new(File::create(&tmp)?);
        ciborium::into_writer(&env, w).map_err(|e| CheckpointError::Encode(e.to_string()))?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    let r = BufReader::new(File::open(path)?);
    let env: Envelope = ciborium::from_reader(r).map_err(|e| CheckpointError::Decode(e.to_string()))?;
    if env.format != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: env.format });
    }
    if env.config_hash != config_hash(&env.trainer.config) {
        return Err(CheckpointError::Corrupt);
    }
    Ok(env.trainer)
}
