use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: cannot broadcast {lhs:?} with {rhs:?}")]
    Broadcast {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward called on a tape that was already consumed; re-run the forward pass")]
    StaleTape,

    #[error("reduction over an empty axis")]
    EmptyAxis,

    #[error("unregistered encoder family `{0}`")]
    UnknownFamily(String),

    #[error("scenario generation failed: could not satisfy `{constraint}` after {attempts} attempts")]
    Placement {
        constraint: &'static str,
        attempts: usize,
    },

    #[error("degenerate box (zero area)")]
    DegenerateBox,

    #[error(
        "channel mismatch: feature from family `{family}` has {got} channels but the ego expects \
         {expected}; apply the collaborator's adapter before fusion"
    )]
    ChannelMismatch {
        family: String,
        expected: usize,
        got: usize,
    },

    #[error("adapter for collaborator {id} already exists with dims {existing:?}, requested {requested:?}")]
    AdapterDims {
        id: u32,
        existing: (usize, usize),
        requested: (usize, usize),
    },

    #[error("collaborator {0} is homogeneous with the ego; no adapter is needed")]
    HomogeneousCollaborator(u32),

    #[error("support set is empty")]
    EmptySupport,

    #[error("non-finite loss at epoch {epoch}, step {step} (seed {seed})")]
    NonFiniteLoss { epoch: usize, step: usize, seed: u64 },

    #[error("collaboration session is not established")]
    SessionNotEstablished,

    #[error("no frozen weights for family `{0}`")]
    MissingWeights(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `{command}` first")]
    MissingPrerequisite { path: PathBuf, command: &'static str },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("degenerate scenario {0}: zero diagonal entry in the cross-scenario matrix")]
    DegenerateDiagonal(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 missing prerequisite, 4 numerical
    /// failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            // an unsatisfiable world is a configuration problem
            Error::Config(_) | Error::UnknownFamily(_) | Error::Placement { .. } => 2,
            Error::MissingPrerequisite { .. } | Error::MissingWeights(_) => 3,
            Error::NonFiniteLoss { .. } | Error::DegenerateDiagonal(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
