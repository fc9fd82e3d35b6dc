use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("degenerate penalty: {0}")]
    DegeneratePenalty(String),
    #[error("ill-posed system: {0}")]
    IllPosed(String),
    #[error("no feasible smoothing parameter: {0}")]
    NoFeasibleH(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("no solution in bracket [{lo:e}, {hi:e}]: {reason}")]
    NoSolution { lo: f64, hi: f64, reason: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
