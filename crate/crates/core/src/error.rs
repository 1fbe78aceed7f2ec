use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate triangle (twice-area {0:e})")]
    DegenerateTriangle(f64),

    #[error("point ({x}, {y}) is not covered by the mesh")]
    OutsideMesh { x: f64, y: f64 },

    #[error("could not place occluder inside the face region after {0} attempts")]
    Placement(usize),

    #[error("filter {filter} has a zero-norm column at kernel position {position}")]
    ZeroFilterColumn { filter: usize, position: usize },

    #[error("non-finite loss in term `{term}`: {detail}")]
    NonFinite { term: String, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
