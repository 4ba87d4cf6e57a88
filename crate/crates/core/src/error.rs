use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("divisibility violated: {0}")]
    Divisibility(String),

    #[error("dimension violated: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Value(String),

    #[error("sequence length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("SVD did not converge within {0} iterations")]
    ConvergenceFailure(usize),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("index {index} outside 1..={max}")]
    Index { index: usize, max: usize },

    #[error("delay {delay_s:e} s outside [0, {max_s:e}] s")]
    DelayOutOfRange { delay_s: f64, max_s: f64 },

    #[error("unsupported ADC resolution: {0} bits")]
    UnsupportedResolution(u32),

    #[error("all-zero input cannot be gain-normalized")]
    ZeroInput,

    #[error("dictionary has {grid} atoms but {needed} RF chains were requested")]
    GridTooSmall { grid: usize, needed: usize },

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("effective noise covariance at bin {0} is not positive definite")]
    SingularNoise(usize),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Stable machine-readable tag for the outermost non-context error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Divisibility(_) => "divisibility",
            Error::Dimension(_) => "dimension",
            Error::Value(_) => "value",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ConvergenceFailure(_) => "convergence_failure",
            Error::NotPositiveDefinite => "not_positive_definite",
            Error::Index { .. } => "index",
            Error::DelayOutOfRange { .. } => "delay_out_of_range",
            Error::UnsupportedResolution(_) => "unsupported_resolution",
            Error::ZeroInput => "zero_input",
            Error::GridTooSmall { .. } => "grid_too_small",
            Error::RankDeficient(_) => "rank_deficient",
            Error::SingularNoise(_) => "singular_noise",
            Error::Context { source, .. } => source.kind(),
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Value(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
