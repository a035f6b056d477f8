//! Versioned JSON reports.
//!
//! Every document carries `schema_version`, a `kind` tag and a provenance
//! block. Unknown fields are rejected on reading. Apart from
//! `provenance.timestamp` a report is a pure function of its inputs and seed.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tate_core::bootstrap::{BootstrapConfig, BootstrapResult};
use tate_core::estimators::{EstimateReport, EstimatorKind, PositivitySummary};
use tate_core::oracle::TheoremSuite;
use tate_core::simlab::{Scenario, SimMetrics, TruthSource};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL: &str = "tate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// SHA-256 of the configuration text (or of the canonical argument string
    /// when no file was given).
    pub config_sha256: String,
    #[serde(default)]
    pub data_sha256: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl Provenance {
    pub fn new(seed: u64, config: &[u8], data: Option<&[u8]>) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: sha256_hex(config),
            data_sha256: data.map(sha256_hex),
            timestamp,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySummary {
    pub study: usize,
    pub size: usize,
    pub treated: usize,
    pub control: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSummary {
    pub n: usize,
    pub m: usize,
    pub target_size: usize,
    pub covariates: Vec<String>,
    pub studies: Vec<StudySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFit {
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub treatment: String,
    pub membership: String,
    /// Entry `s - 1` belongs to study `s`.
    pub treatment_fits: Vec<ModelFit>,
    pub membership_fit: ModelFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateEntry {
    pub estimator: EstimatorKind,
    pub estimate: EstimateReport,
    #[serde(default)]
    pub bootstrap: Option<BootstrapResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub data: DataSummary,
    #[serde(default)]
    pub models: Option<ModelSummary>,
    pub estimates: Vec<EstimateEntry>,
    #[serde(default)]
    pub positivity: Option<Vec<PositivitySummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub scenario: Scenario,
    pub intercepts: Vec<f64>,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    pub truth_source: TruthSource,
    pub metrics: SimMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureStatus {
    Pass,
    /// The heterogeneity condition fails and the identity does not hold.
    ExpectedFail,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureCheck {
    pub condition_gap: f64,
    pub condition_holds: bool,
    pub direct: f64,
    pub via_identification: f64,
    pub study_effects: Vec<f64>,
    pub status: FixtureStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleReport {
    pub schema_version: u32,
    pub kind: String,
    pub provenance: Provenance,
    pub suite: TheoremSuite,
    #[serde(default)]
    pub fixture: Option<FixtureCheck>,
}

pub const ANALYSIS: &str = "analysis";
pub const SIMULATION: &str = "simulation";
pub const ORACLE: &str = "oracle_check";

pub fn to_json<T: Serialize>(doc: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(doc).map_err(|e| CliError::Report(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses a report of the given kind, checking the schema version.
pub fn from_json<T: DeserializeOwned>(text: &str, kind: &str) -> Result<T> {
    let head: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))?;
    let version = head.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(SCHEMA_VERSION)) {
        return Err(CliError::Report(format!("unsupported schema version {version:?}")));
    }
    let found = head.get("kind").and_then(|v| v.as_str());
    if found != Some(kind) {
        return Err(CliError::Report(format!("expected a `{kind}` report, found {found:?}")));
    }
    serde_json::from_value(head).map_err(|e| CliError::Report(e.to_string()))
}

/// The report with `provenance.timestamp` removed, for comparing reruns.
pub fn without_timestamp(text: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Report(e.to_string()))?;
    if let Some(p) = v.get_mut("provenance").and_then(|p| p.as_object_mut()) {
        p.remove("timestamp");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_doc() -> OracleReport {
        OracleReport {
            schema_version: SCHEMA_VERSION,
            kind: ORACLE.into(),
            provenance: Provenance::new(4, b"n=3", None),
            suite: tate_core::oracle::run_theorem_suite(3, 4).unwrap(),
            fixture: None,
        }
    }

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn round_trip_and_kind_check() {
        let doc = oracle_doc();
        let text = to_json(&doc).unwrap();
        assert_eq!(from_json::<OracleReport>(&text, ORACLE).unwrap(), doc);
        assert!(from_json::<OracleReport>(&text, ANALYSIS).is_err());
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        let text = to_json(&oracle_doc()).unwrap();
        let extra = text.replacen("\"kind\"", "\"colour\": 1,\n  \"kind\"", 1);
        assert!(from_json::<OracleReport>(&extra, ORACLE).is_err());
        let newer = text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(from_json::<OracleReport>(&newer, ORACLE).is_err());
    }

    #[test]
    fn timestamp_ignored_in_comparison() {
        let a = oracle_doc();
        let mut b = a.clone();
        b.provenance.timestamp += 100;
        let (ta, tb) = (to_json(&a).unwrap(), to_json(&b).unwrap());
        assert_ne!(ta, tb);
        assert_eq!(without_timestamp(&ta).unwrap(), without_timestamp(&tb).unwrap());
    }
}
