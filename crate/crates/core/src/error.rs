use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("unparsable row at line {line}: {reason}")]
    UnparsableRow { line: usize, reason: String },
    #[error("non-positive price for {ticker} on {date}")]
    NonPositivePrice { ticker: String, date: NaiveDate },
    #[error("no dates common to all requested tickers")]
    EmptyIntersection,
    #[error("slot {slot} out of range 1..={max}")]
    SlotOutOfRange { slot: usize, max: usize },
    #[error("insufficient history at slot {slot}: need {needed} relatives, have {available}")]
    InsufficientHistory {
        slot: usize,
        needed: usize,
        available: usize,
    },
    #[error("series too short: need more than {needed} points, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("feature `{feature}` undefined at slot {slot}")]
    FeatureUndefined { feature: String, slot: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("design matrix is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },
    #[error("smoothing window {window} longer than series of length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient cache does not belong to the current parameters")]
    StaleCache,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weights not on the simplex (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },
    #[error("episode finished")]
    EpisodeFinished,
    #[error("non-finite loss during {phase}: {detail}")]
    NaNLoss { phase: String, detail: String },
    #[error("too few samples: {0}")]
    TooFewSamples(usize),
    #[error("target has zero variance")]
    DegenerateTarget,
    #[error("model has not been fitted")]
    ModelNotFitted,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("series do not overlap")]
    NoOverlap,
    #[error("sample has zero variance")]
    ZeroVariance,
    #[error("slot {slot}: {source}")]
    AtSlot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("artifact {0} does not match the manifest; rerun the producing stage")]
    StaleArtifact(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_slot(self, slot: usize) -> Self {
        match self {
            e @ Error::AtSlot { .. } => e,
            e => Error::AtSlot {
                slot,
                source: Box::new(e),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            AtSlot { source, .. } => source.class(),
            Config(_) | BadArchitecture(_) | WindowTooLong { .. } => ErrorClass::Config,
            MissingFile(_)
            | MissingColumn(_)
            | UnparsableRow { .. }
            | NonPositivePrice { .. }
            | EmptyIntersection
            | SlotOutOfRange { .. }
            | InsufficientHistory { .. }
            | SeriesTooShort { .. }
            | FeatureUndefined { .. }
            | NoOverlap
            | StaleArtifact(_)
            | TooFewSamples(_)
            | Io(_)
            | Csv(_)
            | Json(_) => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }
}
