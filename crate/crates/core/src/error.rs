use std::path::PathBuf;

/// Errors raised anywhere in the training, aggregation and I/O stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no contributions")]
    NoContributions,

    #[error("non-finite value produced at index {index}")]
    NonFinite { index: usize },

    #[error("interpolation factor {0} outside [0, 1]")]
    InvalidAlpha(f64),

    #[error("fixed-point overflow: |{value}| exceeds headroom bound {bound}")]
    FixedPointOverflow { value: f64, bound: f64 },

    #[error("invalid fixed-point parameters: frac_bits={frac_bits}, modulus_bits={modulus_bits}")]
    InvalidFixedPoint { frac_bits: u32, modulus_bits: u32 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("silo {0} has no training data")]
    EmptySilo(u32),

    #[error("non-finite loss on silo {silo_id}, local batch {batch}")]
    NonFiniteLoss { silo_id: u32, batch: usize },

    #[error("all sample counts are zero")]
    ZeroSampleCount,

    #[error("aggregation set mismatch: {0}")]
    AggregationSetMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", .path.display())]
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
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
