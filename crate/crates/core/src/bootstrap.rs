//! Stratified two-level bootstrap with percentile intervals.
//!
//! Each replicate resamples the target sample, then a set of `m` studies with
//! replacement, then units within each arm of every drawn study. All nuisance
//! models are refit on the resample. Replicate `b` draws only from the stream
//! derived from `(seed, "bootstrap", b)`, so results do not depend on the
//! order or the thread in which replicates run.

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, DatasetBuilder};
use crate::error::{Error, Result};
use crate::estimators::{estimate_many, EstimatorKind};
use crate::propensity::{fit_propensities_with, FitOptions, FittedPropensities, PropensitySpecs, StartValues};
use crate::rng::{SeedTree, Stream};

/// What to estimate on each (re)sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub specs: PropensitySpecs,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub study_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub fit_options: FitOptions,
}

impl EstimatorConfig {
    pub fn new(specs: PropensitySpecs, estimators: Vec<EstimatorKind>) -> Self {
        Self { specs, estimators, study_weights: None, fit_options: FitOptions::default() }
    }

    fn needs_propensities(&self) -> bool {
        self.estimators.iter().any(|k| k.needs_propensities())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Start each replicate's model fits from the full-sample coefficients of
    /// the studies it drew. The converged fits are the same maxima; only the
    /// iteration count changes.
    #[serde(default = "default_warm_start")]
    pub warm_start: bool,
}

fn default_warm_start() -> bool {
    true
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { replicates: 1000, alpha: 0.05, seed: 0, warm_start: true }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 bootstrap replicates, got {}", self.replicates)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityIntervals {
    /// Missing replicates placed below every observed estimate.
    pub low: (f64, f64),
    /// Missing replicates placed at the mean estimate.
    pub mean: (f64, f64),
    /// Missing replicates placed above every observed estimate.
    pub high: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapResult {
    pub estimator: EstimatorKind,
    /// `None` marks a failed replicate.
    pub replicate_estimates: Vec<Option<f64>>,
    pub replicates: usize,
    pub alpha: f64,
    pub se_hat: f64,
    pub interval: (f64, f64),
    pub missing_count: usize,
    pub missing_rate: f64,
    pub sensitivity: SensitivityIntervals,
}

/// Unit indices of each resampling stratum.
struct Strata {
    target: Vec<usize>,
    treat: Vec<Vec<usize>>,
    control: Vec<Vec<usize>>,
}

impl Strata {
    fn new(ds: &Dataset) -> Self {
        let m = ds.m();
        let mut s = Strata { target: Vec::new(), treat: vec![Vec::new(); m + 1], control: vec![Vec::new(); m + 1] };
        for i in 0..ds.n() {
            match (ds.study_of(i), ds.arm_of(i)) {
                (0, _) => s.target.push(i),
                (k, Some(Arm::Treat)) => s.treat[k].push(i),
                (k, _) => s.control[k].push(i),
            }
        }
        s
    }
}

/// Resample plus the original study behind each bootstrapped study.
fn resample_with_sources(ds: &Dataset, strata: &Strata, rng: &mut Stream) -> (Dataset, Vec<usize>) {
    let m = ds.m();
    let mut b = DatasetBuilder::with_capacity(m, ds.p(), ds.n());
    let mut row = 0;
    let mut push = |b: &mut DatasetBuilder, i: usize, study: usize| {
        b.push(row, study, ds.arm_of(i), ds.outcome_of(i), ds.covariates_of(i))
            .expect("resampled unit is valid");
        row += 1;
    };
    for _ in 0..strata.target.len() {
        let i = strata.target[rng.index(strata.target.len())];
        push(&mut b, i, 0);
    }
    let sources: Vec<usize> = (0..m).map(|_| 1 + rng.index(m)).collect();
    for (j, &src) in sources.iter().enumerate() {
        for pool in [&strata.treat[src], &strata.control[src]] {
            for _ in 0..pool.len() {
                let i = pool[rng.index(pool.len())];
                push(&mut b, i, j + 1);
            }
        }
    }
    (b.finish().expect("resample keeps every stratum non-empty"), sources)
}

/// Draws one stratified bootstrap sample. Bootstrapped studies are relabeled
/// `1..=m` as distinct strata even when the same study is drawn twice; each
/// keeps the arm sizes of the study it was drawn from.
pub fn stratified_resample(ds: &Dataset, rng: &mut Stream) -> Dataset {
    resample_with_sources(ds, &Strata::new(ds), rng).0
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `(k - 1) * q` in the sorted sample, zero-based).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(alpha / 2, 1 - alpha / 2)` quantiles of the finite estimates.
pub fn percentile_interval(estimates: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted: Vec<f64> = estimates.iter().copied().filter(|x| x.is_finite()).collect();
    if sorted.len() < 2 {
        return Err(Error::TooFewEstimates { needed: 2, found: sorted.len() });
    }
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&sorted, alpha / 2.0), quantile_sorted(&sorted, 1.0 - alpha / 2.0)))
}

/// Percentile intervals recomputed with `missing_count` failed replicates
/// imputed below the minimum, at the mean, and above the maximum.
pub fn sensitivity_intervals(estimates: &[f64], missing_count: usize, alpha: f64) -> Result<SensitivityIntervals> {
    let base = percentile_interval(estimates, alpha)?;
    if missing_count == 0 {
        return Ok(SensitivityIntervals { low: base, mean: base, high: base });
    }
    let finite: Vec<f64> = estimates.iter().copied().filter(|x| x.is_finite()).collect();
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    let with = |fill: f64| {
        let mut v = finite.clone();
        v.extend(std::iter::repeat(fill).take(missing_count));
        percentile_interval(&v, alpha)
    };
    Ok(SensitivityIntervals { low: with(min - 1.0)?, mean: with(mean)?, high: with(max + 1.0)? })
}

pub(crate) fn sample_sd(values: &[f64]) -> f64 {
    let k = values.len();
    if k < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
}

fn summarize(kind: EstimatorKind, estimates: Vec<Option<f64>>, alpha: f64) -> Result<BootstrapResult> {
    let replicates = estimates.len();
    let ok: Vec<f64> = estimates.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::AllReplicatesFailed(replicates));
    }
    let missing_count = replicates - ok.len();
    Ok(BootstrapResult {
        estimator: kind,
        se_hat: sample_sd(&ok),
        interval: percentile_interval(&ok, alpha)?,
        missing_count,
        missing_rate: missing_count as f64 / replicates as f64,
        sensitivity: sensitivity_intervals(&ok, missing_count, alpha)?,
        replicate_estimates: estimates,
        replicates,
        alpha,
    })
}

fn warm_start_for(base: &FittedPropensities, sources: &[usize]) -> StartValues {
    let full = base.start_values();
    StartValues {
        treatment: sources.iter().map(|&s| full.treatment[s - 1].clone()).collect(),
        membership: sources.iter().map(|&s| full.membership[s - 1].clone()).collect(),
    }
}

/// One replicate: resample, refit, estimate every configured estimator.
fn run_replicate(
    ds: &Dataset,
    strata: &Strata,
    cfg: &EstimatorConfig,
    tree: &SeedTree,
    index: usize,
    base: Option<&FittedPropensities>,
) -> Vec<Option<f64>> {
    let mut rng = tree.derive("bootstrap", index as u64);
    let (sample, sources) = resample_with_sources(ds, strata, &mut rng);
    let props = if cfg.needs_propensities() {
        let start = base.map(|b| warm_start_for(b, &sources));
        fit_propensities_with(&sample, &cfg.specs, &cfg.fit_options, start.as_ref()).ok()
    } else {
        None
    };
    let kinds: Vec<EstimatorKind> =
        cfg.estimators.iter().copied().filter(|k| props.is_some() || !k.needs_propensities()).collect();
    let mut reports = estimate_many(&sample, props.as_ref(), &kinds, cfg.study_weights.as_deref()).into_iter();
    cfg.estimators
        .iter()
        .map(|kind| {
            if kind.needs_propensities() && props.is_none() {
                return None;
            }
            reports.next()?.ok().map(|r| r.delta_hat).filter(|d| d.is_finite())
        })
        .collect()
}

fn map_replicates<F>(count: usize, f: F) -> Vec<Vec<Option<f64>>>
where
    F: Fn(usize) -> Vec<Option<f64>> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Bootstraps every estimator in `cfg`, sharing resamples and model fits.
/// Results come back in the order of `cfg.estimators`.
pub fn bootstrap_estimates(ds: &Dataset, cfg: &EstimatorConfig, boot: &BootstrapConfig) -> Result<Vec<BootstrapResult>> {
    let base = if boot.warm_start && cfg.needs_propensities() {
        Some(fit_propensities_with(ds, &cfg.specs, &cfg.fit_options, None)?)
    } else {
        None
    };
    bootstrap_estimates_from(ds, cfg, boot, base.as_ref())
}

/// As [`bootstrap_estimates`], warm-starting from `base` when given and
/// `boot.warm_start` is set.
pub fn bootstrap_estimates_from(
    ds: &Dataset,
    cfg: &EstimatorConfig,
    boot: &BootstrapConfig,
    base: Option<&FittedPropensities>,
) -> Result<Vec<BootstrapResult>> {
    boot.validate()?;
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidParameter("no estimators requested".into()));
    }
    let strata = Strata::new(ds);
    let tree = SeedTree::new(boot.seed);
    let base = if boot.warm_start { base } else { None };
    let rows = map_replicates(boot.replicates, |b| run_replicate(ds, &strata, cfg, &tree, b, base));
    cfg.estimators
        .iter()
        .enumerate()
        .map(|(k, &kind)| summarize(kind, rows.iter().map(|r| r[k]).collect(), boot.alpha))
        .collect()
}

pub fn bootstrap_estimate(
    ds: &Dataset,
    specs: &PropensitySpecs,
    kind: EstimatorKind,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let cfg = EstimatorConfig::new(specs.clone(), vec![kind]);
    Ok(bootstrap_estimates(ds, &cfg, boot)?.remove(0))
}
