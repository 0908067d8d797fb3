use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the toolkit.
///
/// Variants fall into three classes (see [`Error::class`]) so front ends can
/// map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("power cap {cap} W outside platform range [{min}, {max}] W")]
    CapOutOfRange { cap: f64, min: f64, max: f64 },

    #[error("tensor-parallel degree {tp} has no communication cost entry in profile {profile}")]
    UnsupportedTp { profile: String, tp: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model profile `{0}`")]
    UnknownProfile(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("calibration did not converge: worst relative residual {worst:.4} (tolerance {tolerance}); residuals {residuals:?}")]
    Calibration {
        worst: f64,
        tolerance: f64,
        residuals: Vec<f64>,
    },

    #[error("calibration underdetermined: {anchors} anchors for {params} free coefficients")]
    Underdetermined { anchors: usize, params: usize },

    #[error("cluster budget {budget} W below the sum of node minimums {minimums:?}")]
    InfeasibleBudget { budget: f64, minimums: Vec<f64> },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse error class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::CapOutOfRange { .. }
            | Error::UnsupportedTp { .. }
            | Error::Config(_)
            | Error::UnknownProfile(_)
            | Error::InfeasibleBudget { .. }
            | Error::Underdetermined { .. } => ErrorClass::Config,
            Error::Data(_) | Error::Json(_) | Error::Csv(_) => ErrorClass::Data,
            Error::Calibration { .. } | Error::Backend(_) | Error::Io(_) => ErrorClass::Runtime,
        }
    }
}
