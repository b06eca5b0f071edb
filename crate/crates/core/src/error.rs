use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("lens mapping is not strictly increasing over the required radius range: {0}")]
    NonMonotonicLens(String),

    #[error("invalid lens parameters: {0}")]
    InvalidLens(String),

    #[error("iteration did not converge: {0}")]
    NoConvergence(String),

    #[error("invalid flow field: {0}")]
    InvalidFlow(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("no correction target: {0}")]
    MissingTarget(String),

    #[error("face box does not overlap the image")]
    EmptyBox,

    #[error("degenerate line: {0}")]
    DegenerateLine(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("flow file has a bad magic number")]
    BadMagic,

    #[error("flow file is truncated: {0}")]
    TruncatedFile(String),

    #[error("dataset contains no evaluable items")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable code used in JSON error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonMonotonicLens(_) => "NonMonotonicLens",
            Error::InvalidLens(_) => "InvalidLens",
            Error::NoConvergence(_) => "NoConvergence",
            Error::InvalidFlow(_) => "InvalidFlow",
            Error::InvalidImage(_) => "InvalidImage",
            Error::Diverged(_) => "Diverged",
            Error::MissingTarget(_) => "MissingTarget",
            Error::EmptyBox => "EmptyBox",
            Error::DegenerateLine(_) => "DegenerateLine",
            Error::DegenerateLandmarks(_) => "DegenerateLandmarks",
            Error::BadMagic => "BadMagic",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::EmptyDataset => "EmptyDataset",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
            Error::Codec(_) => "Codec",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dims_mismatch(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::DimensionMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}
