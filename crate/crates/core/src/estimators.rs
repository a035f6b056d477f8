//! Weighted (Hajek) estimators of the target-population average treatment
//! effect: unadjusted, pooled, and the two-stage combination of
//! study-specific estimates.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::error::{Error, Result};
use crate::propensity::{fit_propensities, FittedPropensities, PropensitySpecs, UnitScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Unadjusted,
    Pooled,
    TwoStage,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Unadjusted, EstimatorKind::Pooled, EstimatorKind::TwoStage];

    pub fn needs_propensities(self) -> bool {
        self != EstimatorKind::Unadjusted
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Unadjusted => "Unadjusted",
            EstimatorKind::Pooled => "Pooled",
            EstimatorKind::TwoStage => "Two-Stage",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Unadjusted => "unadjusted",
            EstimatorKind::Pooled => "pooled",
            EstimatorKind::TwoStage => "two_stage",
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unadjusted" => Ok(EstimatorKind::Unadjusted),
            "pooled" => Ok(EstimatorKind::Pooled),
            "two_stage" | "two-stage" => Ok(EstimatorKind::TwoStage),
            other => Err(Error::InvalidParameter(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Unadjusted,
    Pooled,
    StudySpecific(usize),
}

/// Per-unit arm weights. The weight for the arm a unit did not receive is
/// zero, and target units carry no weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub scheme: WeightScheme,
    pub treat: Vec<f64>,
    pub control: Vec<f64>,
    /// Units whose weight used a clamped probability.
    pub clamped: Vec<usize>,
}

impl WeightSet {
    fn zeros(scheme: WeightScheme, n: usize) -> Self {
        Self { scheme, treat: vec![0.0; n], control: vec![0.0; n], clamped: Vec::new() }
    }

    fn set(&mut self, i: usize, arm: Arm, w: f64) {
        match arm {
            Arm::Treat => self.treat[i] = w,
            Arm::Control => self.control[i] = w,
        }
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.treat[i], self.control[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub delta_hat: f64,
    pub mu_treat: f64,
    pub mu_control: f64,
    /// Study-specific estimates (two-stage only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_study: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub study_weights: BTreeMap<usize, f64>,
    /// Units whose weights hit the probability clamp.
    pub clamped_units: usize,
}

pub fn unadjusted_weights(ds: &Dataset) -> WeightSet {
    let mut w = WeightSet::zeros(WeightScheme::Unadjusted, ds.n());
    for i in 0..ds.n() {
        if let Some(arm) = ds.arm_of(i) {
            w.set(i, arm, 1.0);
        }
    }
    w
}

pub fn pooled_weights(ds: &Dataset, props: &FittedPropensities) -> Result<WeightSet> {
    Ok(pooled_weights_from(ds, &props.score(ds)?))
}

/// `[1 / e_a(x, s)] * [p(x, 0) / (1 - p(x, 0))]` for each trial unit.
pub fn pooled_weights_from(ds: &Dataset, scores: &UnitScores) -> WeightSet {
    let mut w = WeightSet::zeros(WeightScheme::Pooled, ds.n());
    for i in 0..ds.n() {
        let Some(arm) = ds.arm_of(i) else { continue };
        let (e, c1) = scores.arm_probability(i, arm);
        let (odds, c2) = scores.target_vs_any_study(i);
        w.set(i, arm, odds / e);
        if c1 || c2 {
            w.clamped.push(i);
        }
    }
    w
}

pub fn study_specific_weights(ds: &Dataset, s: usize, props: &FittedPropensities) -> Result<WeightSet> {
    ds.check_study(s)?;
    Ok(study_specific_weights_from(ds, s, &props.score(ds)?))
}

/// `[1 / e_a(x, s)] * [p(x, 0) / p(x, s)]` for units of study `s`, zero elsewhere.
pub fn study_specific_weights_from(ds: &Dataset, s: usize, scores: &UnitScores) -> WeightSet {
    let mut w = WeightSet::zeros(WeightScheme::StudySpecific(s), ds.n());
    for i in 0..ds.n() {
        if ds.study_of(i) != s {
            continue;
        }
        let arm = ds.arm_of(i).expect("trial unit has an arm");
        let (e, c1) = scores.arm_probability(i, arm);
        let (ratio, c2) = scores.target_vs_study(i, s);
        w.set(i, arm, ratio / e);
        if c1 || c2 {
            w.clamped.push(i);
        }
    }
    w
}

/// Weighted arm means over `units`.
fn hajek_means(ds: &Dataset, w: &WeightSet, units: impl Iterator<Item = usize>, study: Option<usize>) -> Result<(f64, f64)> {
    let (mut st, mut sc, mut yt, mut yc) = (0.0, 0.0, 0.0, 0.0);
    for i in units {
        let (wt, wc) = w.get(i);
        if wt == 0.0 && wc == 0.0 {
            continue;
        }
        let y = ds.outcome_of(i).unwrap_or(0.0);
        st += wt;
        yt += wt * y;
        sc += wc;
        yc += wc * y;
    }
    if !(st > 0.0) {
        return Err(Error::ZeroArmWeight { arm: Arm::Treat, study });
    }
    if !(sc > 0.0) {
        return Err(Error::ZeroArmWeight { arm: Arm::Control, study });
    }
    Ok((yt / st, yc / sc))
}

/// Difference of normalized weighted arm means.
pub fn hajek_contrast(ds: &Dataset, w: &WeightSet) -> Result<EstimateReport> {
    if w.treat.len() != ds.n() || w.control.len() != ds.n() {
        return Err(Error::LengthMismatch { what: "weights", expected: ds.n(), found: w.treat.len() });
    }
    let study = match w.scheme {
        WeightScheme::StudySpecific(s) => Some(s),
        _ => None,
    };
    let (mu_treat, mu_control) = hajek_means(ds, w, 0..ds.n(), study)?;
    let estimator = match w.scheme {
        WeightScheme::Unadjusted => EstimatorKind::Unadjusted,
        _ => EstimatorKind::Pooled,
    };
    Ok(EstimateReport {
        estimator,
        delta_hat: mu_treat - mu_control,
        mu_treat,
        mu_control,
        per_study: BTreeMap::new(),
        study_weights: BTreeMap::new(),
        clamped_units: w.clamped.len(),
    })
}

pub fn estimate_unadjusted(ds: &Dataset) -> Result<EstimateReport> {
    hajek_contrast(ds, &unadjusted_weights(ds))
}

/// Refits the nuisance models from `specs` and applies the pooled weights.
pub fn estimate_pooled(ds: &Dataset, specs: &PropensitySpecs) -> Result<EstimateReport> {
    estimate_pooled_with(ds, &fit_propensities(ds, specs)?)
}

pub fn estimate_pooled_with(ds: &Dataset, props: &FittedPropensities) -> Result<EstimateReport> {
    let mut r = hajek_contrast(ds, &pooled_weights(ds, props)?)?;
    r.estimator = EstimatorKind::Pooled;
    Ok(r)
}

pub fn estimate_study_specific_tate(ds: &Dataset, s: usize, props: &FittedPropensities) -> Result<f64> {
    ds.check_study(s)?;
    let scores = props.score(ds)?;
    let (mt, mc, _) = study_specific_means(ds, s, &scores, &ds.indices_of(s))?;
    Ok(mt - mc)
}

fn study_specific_means(ds: &Dataset, s: usize, scores: &UnitScores, idx: &[usize]) -> Result<(f64, f64, usize)> {
    let w = study_specific_weights_from(ds, s, scores);
    let (mt, mc) = hajek_means(ds, &w, idx.iter().copied(), Some(s))?;
    Ok((mt, mc, w.clamped.len()))
}

fn check_study_weights(m: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0; m]),
        Some(w) if w.len() != m => Err(Error::LengthMismatch { what: "study weights", expected: m, found: w.len() }),
        Some(w) => {
            for (k, &v) in w.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::NonpositiveStudyWeight { study: k + 1, value: v });
                }
            }
            Ok(w.to_vec())
        }
    }
}

/// Two-stage estimate with study weights `w_s` (even when `None`).
pub fn estimate_two_stage(ds: &Dataset, specs: &PropensitySpecs, study_weights: Option<&[f64]>) -> Result<EstimateReport> {
    check_study_weights(ds.m(), study_weights)?;
    estimate_two_stage_with(ds, &fit_propensities(ds, specs)?, study_weights)
}

pub fn estimate_two_stage_with(
    ds: &Dataset,
    props: &FittedPropensities,
    study_weights: Option<&[f64]>,
) -> Result<EstimateReport> {
    let scores = props.score(ds)?;
    two_stage_from(ds, &scores, study_weights)
}

fn two_stage_from(ds: &Dataset, scores: &UnitScores, study_weights: Option<&[f64]>) -> Result<EstimateReport> {
    let m = ds.m();
    let weights = check_study_weights(m, study_weights)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for i in 0..ds.n() {
        groups[ds.study_of(i)].push(i);
    }
    let total: f64 = weights.iter().sum();
    let mut per_study = BTreeMap::new();
    let mut study_weights = BTreeMap::new();
    let (mut mu_t, mut mu_c, mut clamped) = (0.0, 0.0, 0);
    for s in 1..=m {
        let (mt, mc, k) = study_specific_means(ds, s, scores, &groups[s])
            .map_err(|e| Error::StudyFailed { study: s, source: Box::new(e) })?;
        let w = weights[s - 1];
        mu_t += w * mt / total;
        mu_c += w * mc / total;
        clamped += k;
        per_study.insert(s, mt - mc);
        study_weights.insert(s, w);
    }
    let delta_hat = per_study.iter().map(|(s, d)| weights[s - 1] * d).sum::<f64>() / total;
    Ok(EstimateReport {
        estimator: EstimatorKind::TwoStage,
        delta_hat,
        mu_treat: mu_t,
        mu_control: mu_c,
        per_study,
        study_weights,
        clamped_units: clamped,
    })
}

/// Runs several estimators on one dataset, sharing a single set of fitted
/// nuisance models. `props` may be `None` only if no requested estimator
/// needs propensities.
pub fn estimate_many(
    ds: &Dataset,
    props: Option<&FittedPropensities>,
    kinds: &[EstimatorKind],
    study_weights: Option<&[f64]>,
) -> Vec<Result<EstimateReport>> {
    let scores = match props.map(|p| p.score(ds)) {
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => return kinds.iter().map(|_| Err(e.clone())).collect(),
        None => None,
    };
    kinds
        .iter()
        .map(|&kind| match (kind, &scores) {
            (EstimatorKind::Unadjusted, _) => estimate_unadjusted(ds),
            (EstimatorKind::Pooled, Some(sc)) => {
                let mut r = hajek_contrast(ds, &pooled_weights_from(ds, sc))?;
                r.estimator = EstimatorKind::Pooled;
                Ok(r)
            }
            (EstimatorKind::TwoStage, Some(sc)) => two_stage_from(ds, sc, study_weights),
            (_, None) => Err(Error::InvalidParameter(format!("{kind} needs fitted propensities"))),
        })
        .collect()
}

/// Distribution of fitted participation probabilities `p(x, s)` over the
/// target-population sample, one row per study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositivitySummary {
    pub study: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub sd: f64,
    /// Target units whose probability for this study is below the clamp.
    pub clamped: usize,
}

pub fn positivity_summaries(ds: &Dataset, props: &FittedPropensities) -> Result<Vec<PositivitySummary>> {
    let scores = props.score(ds)?;
    let target = ds.indices_of(0);
    let n0 = target.len() as f64;
    Ok((1..=ds.m())
        .map(|s| {
            let vals: Vec<f64> = target.iter().map(|&i| scores.membership(i)[s]).collect();
            let mean = vals.iter().sum::<f64>() / n0;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n0 - 1.0)
            } else {
                0.0
            };
            PositivitySummary {
                study: s,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                mean,
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                sd: var.sqrt(),
                clamped: vals.iter().filter(|&&v| v < crate::propensity::PROB_CLAMP).count(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{validate_dataset, Observation};

    fn toy() -> Dataset {
        let raw = vec![
            Observation::target(vec![0.0]),
            Observation::trial(1, Arm::Treat, 2.0, vec![0.0]),
            Observation::trial(1, Arm::Treat, 4.0, vec![0.0]),
            Observation::trial(1, Arm::Control, 1.0, vec![0.0]),
            Observation::trial(1, Arm::Control, 3.0, vec![0.0]),
        ];
        validate_dataset(raw, 1).unwrap()
    }

    fn weights(t: &[f64], c: &[f64]) -> WeightSet {
        WeightSet { scheme: WeightScheme::Pooled, treat: t.to_vec(), control: c.to_vec(), clamped: vec![] }
    }

    #[test]
    fn unadjusted_structure() {
        let ds = toy();
        let w = unadjusted_weights(&ds);
        assert_eq!(w.get(0), (0.0, 0.0));
        assert_eq!(w.get(1), (1.0, 0.0));
        assert_eq!(w.get(3), (0.0, 1.0));
    }

    #[test]
    fn hand_computed_contrast() {
        let ds = toy();
        let w = weights(&[0.0, 1.0, 1.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 3.0, 1.0]);
        let r = hajek_contrast(&ds, &w).unwrap();
        assert!((r.delta_hat - 1.5).abs() < 1e-15);
        assert_eq!((r.mu_treat, r.mu_control), (3.0, 1.5));

        let scaled = weights(&[0.0, 10.0, 10.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 3.0, 1.0]);
        assert!((hajek_contrast(&ds, &scaled).unwrap().delta_hat - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_arm_weight_detected() {
        let ds = toy();
        let w = weights(&[0.0; 5], &[0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(hajek_contrast(&ds, &w).unwrap_err(), Error::ZeroArmWeight { arm: Arm::Treat, study: None });
    }

    #[test]
    fn constant_outcomes_give_zero() {
        let raw = vec![
            Observation::target(vec![0.0]),
            Observation::trial(1, Arm::Treat, 7.0, vec![0.0]),
            Observation::trial(1, Arm::Control, 7.0, vec![1.0]),
        ];
        let ds = validate_dataset(raw, 1).unwrap();
        assert_eq!(estimate_unadjusted(&ds).unwrap().delta_hat, 0.0);
    }

    #[test]
    fn study_weight_validation() {
        assert_eq!(check_study_weights(2, None).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(
            check_study_weights(2, Some(&[1.0, 0.0])),
            Err(Error::NonpositiveStudyWeight { study: 2, .. })
        ));
        assert!(check_study_weights(2, Some(&[1.0])).is_err());
    }

    #[test]
    fn kind_parsing() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.to_string().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("aipw".parse::<EstimatorKind>().is_err());
    }
}
