use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid length: {0}")]
    InvalidLength(String),
    #[error("invalid head split: {channels} channels over {heads} heads")]
    InvalidHeadSplit { channels: usize, heads: usize },
    #[error("gradient shape error: {0}")]
    GradientShape(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("bad label {label} (classes: {n_classes})")]
    BadLabel { label: usize, n_classes: usize },
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid exponential schedule: start margin must be positive")]
    InvalidExponentialSchedule,
    #[error("diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("inconsistent K: {0}")]
    InconsistentK(String),
    #[error("nothing to add: {0}")]
    NothingToAdd(String),
    #[error("genre unavailable for {0}")]
    GenreUnavailable(String),
    #[error("unknown genre {0:?}")]
    UnknownGenre(String),
    #[error("degenerate cohort: {0}")]
    DegenerateCohort(String),
    #[error("cohort too small: {have} speakers, top-k is {top_k}")]
    CohortTooSmall { have: usize, top_k: usize },
    #[error("unaligned score sets: {0}")]
    UnalignedScoreSets(String),
    #[error("unlabeled trials: {0}")]
    UnlabeledTrials(String),
    #[error("degenerate score set: {0}")]
    DegenerateScoreSet(String),
    #[error("undefined AP for target {0}: no relevant items")]
    UndefinedAp(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("dim mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Stable, machine-parseable error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InputTooShort { .. } => "input-too-short",
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidLength(_) => "invalid-length",
            Error::InvalidHeadSplit { .. } => "invalid-head-split",
            Error::GradientShape(_) => "gradient-shape",
            Error::DegenerateEmbedding(_) => "degenerate-embedding",
            Error::BadLabel { .. } => "bad-label",
            Error::NonFinite(_) => "non-finite-input",
            Error::InvalidExponentialSchedule => "invalid-exponential-schedule",
            Error::Diverged { .. } => "diverged",
            Error::InconsistentK(_) => "inconsistent-k",
            Error::NothingToAdd(_) => "nothing-to-add",
            Error::GenreUnavailable(_) => "genre-unavailable",
            Error::UnknownGenre(_) => "unknown-genre",
            Error::DegenerateCohort(_) => "degenerate-cohort",
            Error::CohortTooSmall { .. } => "cohort-too-small",
            Error::UnalignedScoreSets(_) => "unaligned-score-sets",
            Error::UnlabeledTrials(_) => "unlabeled-trials",
            Error::DegenerateScoreSet(_) => "degenerate-score-set",
            Error::UndefinedAp(_) => "undefined-ap",
            Error::NoData(_) => "no-data",
            Error::CorpusTooSmall(_) => "corpus-too-small",
            Error::BadMagic { .. } => "bad-magic",
            Error::Truncated(_) => "truncated",
            Error::DimMismatch { .. } => "dim-mismatch",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::DuplicateId(_) => "duplicate-id",
            Error::Parse(_) => "parse",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Wav(_) => "wav",
        }
    }

    /// True for errors that signal a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Internal(_) | Error::GradientShape(_))
    }
}
