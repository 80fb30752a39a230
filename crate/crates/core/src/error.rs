use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Every hypothesis assigns (numerically) zero probability to the observation.
    #[error("belief update failed: evidence {evidence:e} ({context})")]
    ZeroEvidence { evidence: f64, context: String },

    #[error("episode is over: step {step} reached horizon {horizon}")]
    EpisodeOver { step: usize, horizon: usize },

    #[error("training diverged at episode {episode}: {reason}")]
    Divergence { episode: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("search tree too large: {leaves} leaves exceeds limit {limit}")]
    OracleGuard { leaves: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
