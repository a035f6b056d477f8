//! TOML configuration for `analyze` and scenario files for `simulate`.
//!
//! ```toml
//! [models]
//! treatment = "1 + age + sex"
//! membership = "1 + age + age^2 + sex"
//!
//! [estimators]
//! run = ["unadjusted", "pooled", "two_stage"]
//! study_weights = [1.0, 1.0, 2.0]
//!
//! [bootstrap]
//! replicates = 1000
//! alpha = 0.05
//! seed = 7
//!
//! [report]
//! positivity = true
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tate_core::bootstrap::BootstrapConfig;
use tate_core::estimators::EstimatorKind;
use tate_core::propensity::PropensitySpecs;
use tate_core::simlab::{Scenario, TruthSource};
use tate_core::{Error as CoreError, ModelSpec};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub estimators: EstimatorsSection,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSection>,
    #[serde(default)]
    pub report: ReportSection,
}

/// Model formulas; a missing formula means intercept plus every covariate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    pub treatment: Option<String>,
    pub membership: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorsSection {
    #[serde(default = "all_estimators")]
    pub run: Vec<EstimatorKind>,
    /// Two-stage study weights; even weights when absent.
    #[serde(default)]
    pub study_weights: Option<Vec<f64>>,
}

fn all_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

impl Default for EstimatorsSection {
    fn default() -> Self {
        Self { run: all_estimators(), study_weights: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Overridden by `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn default_alpha() -> f64 {
    0.05
}

fn yes() -> bool {
    true
}

impl BootstrapSection {
    pub fn to_config(self, seed: u64) -> BootstrapConfig {
        BootstrapConfig { replicates: self.replicates, alpha: self.alpha, seed, warm_start: self.warm_start }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Summaries of fitted participation probabilities over the target sample.
    #[serde(default = "yes")]
    pub positivity: bool,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { positivity: true }
    }
}

fn check_estimators(section: &EstimatorsSection) -> std::result::Result<(), String> {
    if section.run.is_empty() {
        return Err("`estimators.run` is empty".into());
    }
    if let Some(w) = &section.study_weights {
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("study weights must be finite and positive".into());
        }
    }
    Ok(())
}

fn check_bootstrap(b: &Option<BootstrapSection>) -> std::result::Result<(), String> {
    match b {
        Some(b) if b.replicates < 2 => Err(format!("bootstrap needs at least 2 replicates, got {}", b.replicates)),
        Some(b) if !(b.alpha > 0.0 && b.alpha < 1.0) => Err(format!("alpha must lie in (0, 1), got {}", b.alpha)),
        _ => Ok(()),
    }
}

impl AnalysisConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let cfg: AnalysisConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        check_estimators(&self.estimators)?;
        check_bootstrap(&self.bootstrap)
    }

    /// Model specs with covariate names resolved against the data columns.
    pub fn specs(&self, names: &[String]) -> Result<PropensitySpecs> {
        let resolve = |text: &Option<String>| -> Result<ModelSpec> {
            let spec = match text {
                Some(t) => ModelSpec::parse_with_names(t, names)?,
                None => ModelSpec::main_effects(names.len()),
            };
            spec.check_dimension(names.len())?;
            Ok(spec)
        };
        Ok(PropensitySpecs { treatment: resolve(&self.models.treatment)?, membership: resolve(&self.models.membership)? })
    }
}

/// A `simulate --scenario` file: the data-generating setting plus optional
/// estimator, bootstrap and truth choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    #[serde(default)]
    pub estimators: Option<EstimatorsSection>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapSection>,
    #[serde(default)]
    pub truth: Option<TruthSource>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let f: ScenarioFile = toml::from_str(text).map_err(|e| e.to_string())?;
        if let Some(e) = &f.estimators {
            check_estimators(e)?;
        }
        check_bootstrap(&f.bootstrap)?;
        f.scenario.validate().map_err(|e: CoreError| e.to_string())?;
        Ok(f)
    }
}

/// Reads a file and parses it, returning the raw text for hashing.
pub fn read_with<T>(path: &Path, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value = parse(&text).map_err(|message| CliError::Config { path: path.to_path_buf(), message })?;
    Ok((value, text))
}

/// Plain TOML document of any deserializable type, unknown fields handled by
/// the type itself.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> std::result::Result<T, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}
