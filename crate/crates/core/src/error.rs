//! Crate-wide error type shared by all modules.

use std::fmt;

/// Errors produced by library operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed numeric input: empty data, shape mismatch, non-finite values.
    InvalidInput(String),
    /// Requested rank exceeds what a matrix can support.
    RankTooLarge { rank: usize, max: usize },
    /// A probability vector is negative or does not sum to one.
    InvalidDistribution(String),
    /// A preference vector fails simplex validation.
    NotOnSimplex(String),
    /// A grid step does not divide the simplex evenly.
    InvalidStep(f64),
    /// An operation over experts was given an empty registry.
    EmptyRegistry,
    /// Selected expert preferences are affinely dependent; coordinates are ambiguous.
    DegenerateSimplex(String),
    /// Two models or weight maps do not share module names and shapes.
    IncompatibleModels(String),
    /// An expert id is already present in the registry.
    DuplicateExpert(String),
    /// A module path is absent from a network or expert.
    UnknownModule(String),
    /// Training produced a non-finite loss or weight.
    TrainingDiverged(String),
    /// A checkpoint file is truncated, malformed, or inconsistent.
    CorruptCheckpoint(String),
    /// Configuration file is missing, unparsable, or fails validation.
    InvalidConfig(String),
    /// A quality gate was not met (e.g. a trained policy below its oracle bar).
    GateFailed(String),
    /// Underlying I/O failure with the path in context.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Self::RankTooLarge { rank, max } => {
                write!(f, "rank {rank} exceeds maximum usable rank {max}")
            }
            Self::InvalidDistribution(msg) => write!(f, "invalid distribution: {msg}"),
            Self::NotOnSimplex(msg) => write!(f, "not on simplex: {msg}"),
            Self::InvalidStep(step) => {
                write!(f, "grid step {step} does not divide the simplex evenly")
            }
            Self::EmptyRegistry => write!(f, "expert registry is empty"),
            Self::DegenerateSimplex(msg) => write!(f, "degenerate simplex: {msg}"),
            Self::IncompatibleModels(msg) => write!(f, "incompatible models: {msg}"),
            Self::DuplicateExpert(id) => write!(f, "duplicate expert id: {id}"),
            Self::UnknownModule(path) => write!(f, "unknown module path: {path}"),
            Self::TrainingDiverged(msg) => write!(f, "training diverged: {msg}"),
            Self::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Self::GateFailed(msg) => write!(f, "gate failed: {msg}"),
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl Error {
    /// Stable machine-readable variant name, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidInput(_) => "InvalidInput",
            Self::RankTooLarge { .. } => "RankTooLarge",
            Self::InvalidDistribution(_) => "InvalidDistribution",
            Self::NotOnSimplex(_) => "NotOnSimplex",
            Self::InvalidStep(_) => "InvalidStep",
            Self::EmptyRegistry => "EmptyRegistry",
            Self::DegenerateSimplex(_) => "DegenerateSimplex",
            Self::IncompatibleModels(_) => "IncompatibleModels",
            Self::DuplicateExpert(_) => "DuplicateExpert",
            Self::UnknownModule(_) => "UnknownModule",
            Self::TrainingDiverged(_) => "TrainingDiverged",
            Self::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::GateFailed(_) => "GateFailed",
            Self::Io(_) => "Io",
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Convenient result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
