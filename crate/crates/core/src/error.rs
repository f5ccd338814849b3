use std::io;

/// Errors produced anywhere in the toolkit.
///
/// The display strings are stable: tests and the CLI match on them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("invalid temperature: {0}")]
    InvalidTemperature(f64),
    #[error("vocab mismatch: expected {expected} entries, got {actual}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error("lattice/label mismatch: {0}")]
    LatticeLabelMismatch(String),
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("oracle limit exceeded: T + U = {0} (limit 20)")]
    OracleLimitExceeded(usize),
    #[error("invalid label {label} (vocabulary size {vocab_size})")]
    InvalidLabel { label: usize, vocab_size: usize },
    #[error("empty N-best")]
    EmptyNBest,
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("search failure")]
    SearchFailure,
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("paired list mismatch: {hyps} hypotheses vs {refs} references")]
    PairedListMismatch { hyps: usize, refs: usize },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("MWER requires a seed model")]
    MissingSeedModel,
    #[error("internal error: {0}")]
    Internal(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
