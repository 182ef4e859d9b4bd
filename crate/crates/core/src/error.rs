use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion is antipodal to identity; logarithm is undefined")]
    AntipodalInput,

    #[error("time {t} outside the interpolable span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("measurement at t = {0} has no support inside the current window")]
    OutOfWindow(f64),

    #[error("unknown anchor `{0}`")]
    UnknownAnchor(String),

    #[error("tag coincides with anchor `{0}`; range gradient undefined")]
    DegenerateGeometry(String),

    #[error("covariance for {0} is not symmetric positive definite")]
    NonSpdCovariance(&'static str),

    #[error("normal equations could not be factorized")]
    SingularSystem,

    #[error("no measurements to fit")]
    NoMeasurements,

    #[error("non-monotonic timestamp {t} after {last} in {stream} stream")]
    NonMonotonicTimestamp { stream: &'static str, t: f64, last: f64 },

    #[error("trajectories do not overlap in time")]
    NoOverlap,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{file}:{line}: {message}")]
    Schema { file: String, line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
