use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("NonFiniteInput: {0}")]
    NonFiniteInput(String),

    #[error("EmptyAttentionRow: query row {0} has no visible keys")]
    EmptyAttentionRow(usize),

    #[error("EvenKernel: kernel size {0} must be odd")]
    EvenKernel(usize),

    #[error("BlankInTarget: utterance {utterance} position {position}")]
    BlankInTarget { utterance: usize, position: usize },

    #[error("ImpossibleLattice: {0}")]
    ImpossibleLattice(String),

    #[error("OracleTooLarge: T={t}, U={u} exceeds the enumeration bound (T<=6, U<=4)")]
    OracleTooLarge { t: usize, u: usize },

    #[error("ModeShapeMismatch: {0}")]
    ModeShapeMismatch(String),

    #[error("EmptyContextSet: {0} set is empty")]
    EmptyContextSet(&'static str),

    #[error("InvalidContext: {0}")]
    InvalidContext(String),

    #[error("InputTooShort: {frames} input frames, need at least {needed}")]
    InputTooShort { frames: usize, needed: usize },

    #[error("BadToken: {token} not in [0, {vocab})")]
    BadToken { token: usize, vocab: usize },

    #[error("EmptyBatch")]
    EmptyBatch,

    #[error("VersionMismatch: {0}")]
    VersionMismatch(String),

    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("ManifestMismatch: utterance {id}: {detail}")]
    ManifestMismatch { id: String, detail: String },

    #[error("MissingFeatureFile: {0}")]
    MissingFeatureFile(PathBuf),

    #[error("Config: {0}")]
    Config(String),

    #[error("NonFiniteLoss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("ShapeError: {0}")]
    Shape(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
