use std::path::PathBuf;

use crate::geometry::Joint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): width and height must be positive and finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("mixture component {component} collapsed (responsibility mass {mass:.3e} below floor {floor:.3e})")]
    DegenerateComponent { component: usize, mass: f64, floor: f64 },

    #[error("no joint candidates to select from")]
    NoCandidates,

    #[error("selected joint {0} is missing from the pose")]
    MissingJoint(Joint),

    #[error("class `{0}` has no positive or no negative training samples")]
    EmptyClass(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("no {kind} model for class `{class}`")]
    MissingModel { kind: &'static str, class: String },

    #[error("image `{image}`: {proposals} proposals but {features} feature rows")]
    Alignment { image: String, proposals: usize, features: usize },

    #[error("label id {0} is not in the legend")]
    UnknownLabel(u32),

    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),

    #[error("class `{0}` has no ground truth; AP is undefined")]
    NoGroundTruth(String),

    #[error("no class has a defined AP")]
    AllUndefined,

    #[error("{0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: unsupported {schema} version {found} (expected {expected})")]
    Version { path: PathBuf, schema: String, found: u64, expected: u64 },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 input validation, 3 numerical failure,
    /// 4 format or version mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteInput(_)
            | Error::DegenerateComponent { .. }
            | Error::Numerical(_)
            | Error::AllUndefined => 3,
            Error::Format { .. } | Error::Version { .. } => 4,
            _ => 2,
        }
    }
}
