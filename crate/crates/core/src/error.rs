use thiserror::Error;

/// Failure modes of the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("no detectable bunching (excess mass B = {b})")]
    NoDetectableBunching { b: f64 },
    #[error("excess bunching B = {b} exceeds the counterfactual mass {available} beyond the threshold")]
    BunchingExceedsMass { b: f64, available: f64 },
    #[error("elasticity unidentified at 100% marginal rate")]
    ElasticityUnidentified,
    #[error("mu unidentified: marginal response is zero")]
    MuUnidentified,
    #[error("lambda unidentified: the slope coefficient of the calibration system vanishes")]
    LambdaUnidentified,
    #[error("empty shifter region: no bins beyond the relocated threshold")]
    EmptyShifterRegion,
    #[error("buncher mass too thin: {0}")]
    ThinBuncherMass(String),
    #[error("{failed} of {total} bootstrap replicates failed, exceeding the 20% limit")]
    TooManyBootstrapFailures { failed: usize, total: usize },
    #[error("estimation failed: {0}")]
    Estimation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
