use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BendError> = std::result::Result<T, E>;

/// Coarse failure classes. Each maps onto one process exit code in the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    MissingEndpoint,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::MissingEndpoint => 4,
            ErrorClass::Data => 5,
            ErrorClass::Numeric => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum BendError {
    // vector arithmetic
    #[error("zero vector: norm {norm:e} is below {eps:e}")]
    ZeroVector { norm: f64, eps: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    // attribute augmentation
    #[error("empty query text")]
    EmptyQuery,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider unavailable at {endpoint}: {reason}")]
    ProviderUnavailable { endpoint: String, reason: String },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("no embedding endpoint configured; text queries need --embed-endpoint or BEND_EMBED_ENDPOINT")]
    MissingEmbedder,

    // subspace projection and equalization
    #[error("degenerate attribute subspace: all {columns} columns were dropped")]
    DegenerateSubspace { columns: usize },
    #[error("query lies inside the attribute subspace (residual norm {residual:e})")]
    QueryInsideSubspace { residual: f64 },
    #[error("query lies inside the constraint span (residual norm {residual:e})")]
    QueryInsideConstraintSpan { residual: f64 },
    #[error("degenerate group means: {0}")]
    DegenerateMeans(String),
    #[error("equalized vector collapsed (norm {norm:e})")]
    ZeroResult { norm: f64 },
    #[error("numeric solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    // reference index
    #[error("table is empty")]
    EmptyTable,
    #[error("unknown label {label:?} for attribute {attribute:?}")]
    UnknownLabel { attribute: String, label: String },
    #[error("attribute value {0:?} has no reference records")]
    EmptyGroup(String),
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),

    // metrics
    #[error("support violation: value {0:?} is retrieved but has zero prior probability")]
    SupportViolation(String),
    #[error("group {0:?} has only one class label")]
    DegenerateGroup(String),
    #[error("empty retrieval")]
    EmptyRetrieval,
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    // dataset io
    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("size mismatch in {path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("metadata error in {path} line {line}: {reason}")]
    Metadata {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("too small: {0}")]
    TooSmall(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists (use --force to overwrite)")]
    AlreadyExists(PathBuf),

    // embedding client
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite value in embedding {index}")]
    NonFiniteValue { index: usize },

    // pipeline
    #[error("duplicate query id {0:?}")]
    DuplicateId(String),
    #[error("invalid query record: {0}")]
    InvalidQuery(String),
}

impl BendError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BendError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        use BendError::*;
        match self {
            Config(_) | EmptyQuery | Spec(_) | UnknownAttribute(_) => ErrorClass::Config,
            Io { .. } | AlreadyExists(_) => ErrorClass::Io,
            MissingEmbedder | ProviderUnavailable { .. } => ErrorClass::MissingEndpoint,
            ZeroVector { .. }
            | DegenerateSubspace { .. }
            | QueryInsideSubspace { .. }
            | QueryInsideConstraintSpan { .. }
            | DegenerateMeans(_)
            | ZeroResult { .. }
            | NoConvergence { .. } => ErrorClass::Numeric,
            DimensionMismatch { .. }
            | EmptySet(_)
            | InvalidEmbedding(_)
            | MalformedResponse(_)
            | EmptyTable
            | UnknownLabel { .. }
            | EmptyGroup(_)
            | TooFewPoints { .. }
            | SupportViolation(_)
            | DegenerateGroup(_)
            | EmptyRetrieval
            | InvalidDistribution(_)
            | Manifest { .. }
            | SizeMismatch { .. }
            | Metadata { .. }
            | TooSmall(_)
            | DimMismatch { .. }
            | NonFiniteValue { .. }
            | DuplicateId(_)
            | InvalidQuery(_) => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}
