//! TOML run configuration, optionally starting from a named preset.

use std::path::Path;

use mawm_core::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset {0:?} (expected reference, desk-coop-switch or desk-coupled-chain)")]
    Preset(String),
    #[error(transparent)]
    Invalid(#[from] mawm_core::Error),
}

/// Starting point before file overrides.
pub fn preset(name: &str, seed: u64) -> Result<RunConfig, ConfigError> {
    match name {
        "reference" => Ok(RunConfig { seed, ..Default::default() }),
        "desk-coop-switch" => Ok(RunConfig::desk_coop_switch(seed)),
        "desk-coupled-chain" => Ok(RunConfig::desk_coupled_chain(3, seed)),
        other => Err(ConfigError::Preset(other.to_string())),
    }
}

/// Parses a config document. Keys missing from the document take the
/// preset's values; unknown keys are errors.
pub fn parse(text: &str, base: &RunConfig) -> Result<RunConfig, ConfigError> {
    let mut doc: toml::Table = text.parse()?;
    let mut merged = toml::Table::try_from(base).expect("config serializes");
    // `preset` and `seed` may appear at top level
    doc.remove("preset");
    merge(&mut merged, doc);
    let cfg: RunConfig = toml::Value::Table(merged).try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Reads a config file; a top-level `preset = "..."` selects the base.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let doc: toml::Table = text.parse()?;
    let seed = doc.get("seed").and_then(|v| v.as_integer()).unwrap_or(0) as u64;
    let base = match doc.get("preset").and_then(|v| v.as_str()) {
        Some(p) => preset(p, seed)?,
        None => RunConfig { seed, ..Default::default() },
    };
    parse(&text, &base)
}

/// Canonical text form of a config.
pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
