use std::fmt;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    N = 0,
    C = 1,
    H = 2,
    W = 3,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::N, Axis::C, Axis::H, Axis::W];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::N => "batch (N)",
            Axis::C => "channel (C)",
            Axis::H => "height (H)",
            Axis::W => "width (W)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axis} axis: expected {expected}, got {actual}")]
    Dimension { op: &'static str, axis: Axis, expected: usize, actual: usize },

    #[error("data length {actual} does not match shape volume {expected}")]
    Length { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{what} {index:?} out of range (bound {bound:?})")]
    Range { what: &'static str, index: (usize, usize, usize), bound: (usize, usize, usize) },

    #[error("non-finite {what} at level {level}, batch {n}, position ({i}, {j})")]
    Numeric { what: &'static str, level: usize, n: usize, i: usize, j: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("evaluation undefined: no ground-truth boxes")]
    NoGroundTruth,

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
