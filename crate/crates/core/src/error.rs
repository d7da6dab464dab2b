use std::path::PathBuf;

use crate::Label;

/// Errors produced by the index library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {format} file: {reason}")]
    Malformed { format: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label file has {got} lines but dataset has {expected} vectors")]
    LabelCountMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("identifier overflow: {0}")]
    IdOverflow(String),

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("k = {k} exceeds number of points {n}")]
    TooFewPoints { k: usize, n: usize },

    #[error("duplicate external key {0}")]
    DuplicateKey(u64),

    #[error("unknown external key {0}")]
    UnknownKey(u64),

    #[error("label {label} already present on key {key}")]
    DuplicateLabel { key: u64, label: Label },

    #[error("label {label} not present on key {key}")]
    LabelAbsent { key: u64, label: Label },

    #[error("label {0} is in the reserved virtual range")]
    ReservedLabel(Label),

    #[error("leaf slot budget exhausted at node depth {depth}")]
    SlotsExhausted { depth: usize },

    #[error("virtual label ids exhausted")]
    VirtualLabelsExhausted,

    #[error("predicate parse error at {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("predicate qualifies no vectors")]
    EmptyPredicate,

    #[error("qualified id list is invalid: {0}")]
    InvalidIdList(String),

    #[error("temporary index built at generation {built} but index is at {current}")]
    StaleTempIndex { built: u64, current: u64 },

    #[error("bad snapshot: {0}")]
    Snapshot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
