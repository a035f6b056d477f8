use thiserror::Error;

use crate::data::Arm;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no observations supplied")]
    EmptyInput,

    #[error("study count must be at least 1, got {0}")]
    InvalidStudyCount(usize),

    #[error("row {row}: study id {study} outside 0..={m}")]
    StudyOutOfRange { row: usize, study: usize, m: usize },

    #[error("row {row}: study unit is missing its arm or outcome")]
    MissingArm { row: usize },

    #[error("row {row}: target-population unit carries an arm or outcome")]
    TargetHasOutcome { row: usize },

    #[error("study {study} has no {arm} units")]
    EmptyArm { study: usize, arm: Arm },

    #[error("target population sample is empty")]
    EmptyTarget,

    #[error("row {row}: expected {expected} covariates, found {found}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },

    #[error("row {row}: non-finite value in {field}")]
    NonFinite { row: usize, field: &'static str },

    #[error("unknown study {study} (valid ids are 1..={m})")]
    UnknownStudy { study: usize, m: usize },

    #[error("covariate index {index} out of range for dimension {p}")]
    IndexOutOfRange { index: usize, p: usize },

    #[error("invalid model specification: {0}")]
    InvalidModelSpec(String),

    #[error("model fit did not converge after {iterations} iterations: {reason}")]
    Nonconvergence { iterations: usize, reason: String },

    #[error("Hessian is singular even after ridge regularization")]
    SingularHessian,

    #[error("category {0} has no observations")]
    MissingCategory(usize),

    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },

    #[error("fitted propensity models do not match the dataset: {0}")]
    PropensityMismatch(String),

    #[error("total {arm} weight is zero{}", study.map(|s| format!(" in study {s}")).unwrap_or_default())]
    ZeroArmWeight { arm: Arm, study: Option<usize> },

    #[error("study weight for study {study} must be strictly positive, got {value}")]
    NonpositiveStudyWeight { study: usize, value: f64 },

    #[error("study {study}: {source}")]
    StudyFailed { study: usize, source: Box<Error> },

    #[error("need at least {needed} finite values, got {found}")]
    TooFewEstimates { needed: usize, found: usize },

    #[error("all {0} bootstrap replicates failed")]
    AllReplicatesFailed(usize),

    #[error("intercept solver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}
