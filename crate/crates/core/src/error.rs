use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("at least two agents are required, got {0}")]
    TooFewAgents(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("agent {agent} chose unavailable action {action}")]
    UnavailableAction { agent: usize, action: usize },
    #[error("expected {expected} joint actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("empty replay buffer")]
    EmptyBuffer,
    #[error("non-finite input")]
    NonFinite,
    #[error("all-false availability mask")]
    EmptyMask,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("context overflow: {steps} steps exceed window of {window}")]
    ContextOverflow { steps: usize, window: usize },
    #[error("horizon {horizon} exceeds model window {window}")]
    HorizonTooLong { horizon: usize, window: usize },
    #[error("non-finite loss in {phase}: {detail}")]
    NanLoss { phase: String, detail: String },
    #[error("mismatched budgets: {0}")]
    MismatchedBudgets(String),
    #[error("episode already finished; call reset")]
    EpisodeDone,
}

pub type Result<T> = core::result::Result<T, Error>;
