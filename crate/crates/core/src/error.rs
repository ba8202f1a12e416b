use std::path::PathBuf;

/// Errors produced by the calibration toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid end-effector index {index} (model has {count})")]
    InvalidEndEffector { index: usize, count: usize },

    #[error("invalid body pair ({k}, {l}) for {count} end-effectors")]
    InvalidPair { k: usize, l: usize, count: usize },

    #[error("non-finite objective at iteration {iteration}")]
    NonFiniteObjective { iteration: usize, theta: Vec<f64> },

    #[error("information matrix is numerically singular")]
    SingularInformation,

    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("empty scope: {0}")]
    EmptyScope(String),

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("budget {budget} exceeds pool size {pool}")]
    BudgetTooLarge { budget: usize, pool: usize },

    #[error("degenerate workspace: {0}")]
    DegenerateWorkspace(String),

    #[error("finger workspaces do not intersect for pair ({0}, {1})")]
    EmptyIntersection(usize, usize),

    #[error("trajectory generation failed: {0}")]
    TrajectoryGeneration(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("malformed dataset record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
