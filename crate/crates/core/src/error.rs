use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("infeasible attack: {0}")]
    Infeasible(String),

    #[error("singular projection: {0}")]
    SingularProjection(String),

    #[error("covariance is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no records for hypothesis {0}")]
    EmptyHypothesis(&'static str),

    #[error("epoch {epoch}, repetition {rep}: {source}")]
    Trial {
        epoch: usize,
        rep: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Strips any (epoch, repetition) tagging and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::Trial { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors meaning the requested attack cannot be built for the
    /// given geometry or signal partition.
    pub fn is_infeasible_attack(&self) -> bool {
        matches!(self.root(), Error::Infeasible(_) | Error::RankDeficient(_) | Error::SingularProjection(_))
    }
}
