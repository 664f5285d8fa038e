use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CcfError>;

#[derive(Debug, Error)]
pub enum CcfError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("interactions reference items missing from the catalog: {0:?}")]
    MissingItems(Vec<u32>),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config: {0}")]
    Config(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("base at or below chance (AUC {0})")]
    BaseAtChance(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CcfError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        CcfError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        CcfError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CcfError::Config(_) => 1,
            CcfError::NonFinite { .. } | CcfError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
