//! Estimating target-population average treatment effects from a collection
//! of randomized trials.

pub mod bootstrap;
pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod oracle;
pub mod propensity;
pub mod rng;
pub mod simlab;

pub use data::{arm_sizes, validate_dataset, Arm, Dataset, Observation};
pub use design::{build_design, DesignMatrix, ModelSpec, Term};
pub use error::{Error, Result};
