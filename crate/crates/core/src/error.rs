use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error(
        "propagation over {distance} m would alias: grid extent {extent} m is below the required {required} m"
    )]
    Aliasing {
        distance: f64,
        extent: f64,
        required: f64,
    },
    #[error("zero-power field: {0}")]
    ZeroPower(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infinite r0: Cn2 must be positive")]
    InfiniteR0,
    #[error("no measurable wander in centroid series")]
    NoWander,
    #[error("degenerate pupil: {0}")]
    DegeneratePupil(String),
    #[error("all Shack-Hartmann subapertures are invalid")]
    NoValidSubapertures,
    #[error("rank-deficient reconstruction: {0}")]
    RankDeficient(String),
    #[error("crosstalk rows {0:?} received no power")]
    FlaggedRows(Vec<usize>),
    #[error("fit did not converge: {0}")]
    FitDiverged(String),
    #[error("incompatible strategy: {0}")]
    IncompatibleStrategy(String),
    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),
    #[error("realization {realization}, frame {frame}: {source}")]
    Frame {
        realization: usize,
        frame: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
