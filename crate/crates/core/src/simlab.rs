//! Simulation laboratory: the trial-collection data-generating process, the
//! membership intercept solver, true-effect approximation, and Monte Carlo
//! performance metrics.
//!
//! Units draw `X ~ N(0, 1)`, then membership from a softmax over
//! `b0_s + b1_s * X` with the target population as the baseline category.
//! Trial units get `A ~ Bernoulli(treat_prob)` and
//! `Y = nu_s + A gamma_s + X lambda_s + A X kappa_s + e`, with study
//! coefficients `theta_s ~ N(theta0, diag(sigma_theta))`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_estimates_from, sample_sd, BootstrapConfig, EstimatorConfig};
use crate::data::{Arm, Dataset, DatasetBuilder};
use crate::error::{Error, Result};
use crate::estimators::{estimate_many, EstimatorKind};
use crate::propensity::{fit_propensities_with, PropensitySpecs};
use crate::rng::{SeedTree, Stream};

pub const THETA0: [f64; 4] = [-1.0, -1.0, 0.5, -0.5];

const M3_SLOPES: [f64; 3] = [-0.4, -0.186, 0.0];
const M3_SIMILAR: [f64; 3] = [-1.347, -1.302, -1.299];
const M3_DIFFERENT: [f64; 3] = [-2.16, -1.414, -0.799];
/// Expected study sizes behind the three-study intercepts.
pub const M3_SIMILAR_SIZES: [f64; 3] = [1500.0, 1500.0, 1500.0];
pub const M3_DIFFERENT_SIZES: [f64; 3] = [675.0, 1350.0, 2475.0];

const M30_SLOPES: [f64; 30] = [
    -0.35, -0.34, -0.338, -0.334, -0.329, -0.293, -0.29, -0.289, -0.284, -0.281, -0.276, -0.244, -0.238, -0.222,
    -0.206, -0.167, -0.145, -0.142, -0.141, -0.135, -0.132, -0.102, -0.081, -0.071, -0.067, -0.066, -0.045, -0.019,
    -0.016, -0.002,
];
const M30_SIMILAR: [f64; 30] = [
    -1.304, -1.302, -1.302, -1.301, -1.3, -1.295, -1.294, -1.294, -1.294, -1.293, -1.293, -1.29, -1.289, -1.288,
    -1.287, -1.286, -1.286, -1.286, -1.286, -1.287, -1.287, -1.288, -1.289, -1.29, -1.291, -1.291, -1.293, -1.296,
    -1.297, -1.299,
];
const M30_DIFFERENT: [f64; 30] = [
    -3.058, -3.033, -2.976, -2.7, -2.463, -2.303, -2.235, -2.084, -2.08, -1.982, -1.925, -1.897, -1.815, -1.719,
    -1.333, -1.315, -1.152, -0.995, -0.948, -0.93, -0.929, -0.913, -0.811, -0.811, -0.81, -0.754, -0.738, -0.663,
    -0.65, -0.61,
];
/// Approximate expected sizes of the thirty studies with different sizes.
pub const M30_DIFFERENT_SIZES: [f64; 30] = [
    265.0, 271.0, 287.0, 377.0, 478.0, 557.0, 596.0, 693.0, 695.0, 766.0, 810.0, 829.0, 899.0, 987.0, 1450.0,
    1472.0, 1730.0, 2023.0, 2122.0, 2160.0, 2161.0, 2194.0, 2433.0, 2433.0, 2436.0, 2575.0, 2619.0, 2830.0, 2865.0,
    2988.0,
];

pub const PRESETS: [&str; 6] = ["m3s1", "m3s2", "m3s3", "m30s1", "m30s2", "m30s3"];

/// A simulation setting. Exactly one of `intercepts` and `expected_sizes`
/// must be given; sizes are turned into intercepts by
/// [`solve_membership_intercepts`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// 1, 2 or 3; selects the default `sigma_theta`.
    #[serde(default = "default_setting")]
    pub setting: u8,
    pub m: usize,
    pub n: usize,
    pub slopes: Vec<f64>,
    #[serde(default)]
    pub intercepts: Option<Vec<f64>>,
    #[serde(default)]
    pub expected_sizes: Option<Vec<f64>>,
    #[serde(default = "default_theta0")]
    pub theta0: [f64; 4],
    /// Variances of `(nu, gamma, lambda, kappa)`; defaults follow `setting`.
    #[serde(default)]
    pub sigma_theta: Option<[f64; 4]>,
    #[serde(default = "default_treat_prob")]
    pub treat_prob: f64,
}

fn default_setting() -> u8 {
    1
}

fn default_theta0() -> [f64; 4] {
    THETA0
}

fn default_treat_prob() -> f64 {
    0.5
}

/// `(0.5, S_gamma, 0.5, S_kappa)` for a setting.
pub fn setting_variances(setting: u8) -> [f64; 4] {
    if setting == 3 {
        [0.5, 2.0, 0.5, 0.1]
    } else {
        [0.5, 0.1, 0.5, 2.0]
    }
}

impl Scenario {
    pub fn preset(name: &str) -> Result<Scenario> {
        let (m, setting) = match name {
            "m3s1" => (3, 1),
            "m3s2" => (3, 2),
            "m3s3" => (3, 3),
            "m30s1" => (30, 1),
            "m30s2" => (30, 2),
            "m30s3" => (30, 3),
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let (slopes, intercepts, n): (&[f64], &[f64], usize) = match (m, setting) {
            (3, 1) => (&M3_SLOPES, &M3_SIMILAR, 10_000),
            (3, _) => (&M3_SLOPES, &M3_DIFFERENT, 10_000),
            (_, 1) => (&M30_SLOPES, &M30_SIMILAR, 50_500),
            _ => (&M30_SLOPES, &M30_DIFFERENT, 50_500),
        };
        Ok(Scenario {
            name: name.to_string(),
            setting,
            m,
            n,
            slopes: slopes.to_vec(),
            intercepts: Some(intercepts.to_vec()),
            expected_sizes: None,
            theta0: THETA0,
            sigma_theta: None,
            treat_prob: 0.5,
        })
    }

    pub fn with_n(mut self, n: usize) -> Scenario {
        self.n = n;
        self
    }

    pub fn variances(&self) -> [f64; 4] {
        self.sigma_theta.unwrap_or_else(|| setting_variances(self.setting))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.m == 0 {
            return Err(Error::InvalidStudyCount(0));
        }
        if self.n == 0 {
            return bad("scenario needs n > 0".into());
        }
        if !(1..=3).contains(&self.setting) {
            return bad(format!("setting must be 1, 2 or 3, got {}", self.setting));
        }
        if self.slopes.len() != self.m {
            return Err(Error::LengthMismatch { what: "slopes", expected: self.m, found: self.slopes.len() });
        }
        match (&self.intercepts, &self.expected_sizes) {
            (Some(b), None) if b.len() != self.m => {
                return Err(Error::LengthMismatch { what: "intercepts", expected: self.m, found: b.len() })
            }
            (None, Some(t)) if t.len() != self.m => {
                return Err(Error::LengthMismatch { what: "expected_sizes", expected: self.m, found: t.len() })
            }
            (Some(_), None) | (None, Some(_)) => {}
            _ => return bad("give exactly one of intercepts and expected_sizes".into()),
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.slopes) || !finite(&self.theta0) || self.intercepts.as_deref().is_some_and(|b| !finite(b)) {
            return bad("scenario coefficients must be finite".into());
        }
        if self.variances().iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("coefficient variances must be positive".into());
        }
        if !(self.treat_prob > 0.0 && self.treat_prob < 1.0) {
            return bad(format!("treat_prob must lie in (0, 1), got {}", self.treat_prob));
        }
        Ok(())
    }

    /// Membership intercepts, solving for them when only sizes were given.
    pub fn resolved_intercepts(&self) -> Result<Vec<f64>> {
        self.validate()?;
        match (&self.intercepts, &self.expected_sizes) {
            (Some(b), _) => Ok(b.clone()),
            (_, Some(t)) => solve_membership_intercepts(&self.slopes, t, self.n as f64),
            _ => unreachable!("validated"),
        }
    }
}

/// Nodes and weights for `E f(X)`, `X ~ N(0, 1)`, from the eigen-decomposition
/// of the Jacobi matrix of the probabilists' Hermite polynomials. Weights sum
/// to one.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(nodes, nodes);
    for k in 1..nodes {
        let b = (k as f64).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..nodes).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

pub const QUADRATURE_NODES: usize = 80;

fn quadrature() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(QUADRATURE_NODES))
}

/// Softmax membership probabilities at `x`, target first.
pub fn membership_probabilities(slopes: &[f64], intercepts: &[f64], x: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(0.0);
    out.extend(intercepts.iter().zip(slopes).map(|(b0, b1)| b0 + b1 * x));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    out.iter_mut().for_each(|v| *v /= total);
}

/// `n * E[P(S = s | X)]` for `s = 0..=m`, by quadrature.
pub fn expected_sizes(slopes: &[f64], intercepts: &[f64], n: f64) -> Vec<f64> {
    let (xs, ws) = quadrature();
    let mut acc = vec![0.0; slopes.len() + 1];
    let mut p = Vec::with_capacity(slopes.len() + 1);
    for (&x, &w) in xs.iter().zip(ws) {
        membership_probabilities(slopes, intercepts, x, &mut p);
        acc.iter_mut().zip(&p).for_each(|(a, q)| *a += w * q);
    }
    acc.iter_mut().for_each(|a| *a *= n);
    acc
}

/// `E(X | S = 0)` in the infinite population, by quadrature.
pub fn target_covariate_mean(slopes: &[f64], intercepts: &[f64]) -> f64 {
    let (xs, ws) = quadrature();
    let mut p = Vec::with_capacity(slopes.len() + 1);
    let (mut num, mut den) = (0.0, 0.0);
    for (&x, &w) in xs.iter().zip(ws) {
        membership_probabilities(slopes, intercepts, x, &mut p);
        num += w * x * p[0];
        den += w * p[0];
    }
    num / den
}

pub const SOLVER_TOLERANCE: f64 = 1e-8;
pub const SOLVER_MAX_ITER: usize = 500;

/// Intercepts whose expected study sizes match `targets` out of `n` units.
/// Starts from zero and applies `b0_s += log(target_s / current_s)`.
pub fn solve_membership_intercepts(slopes: &[f64], targets: &[f64], n: f64) -> Result<Vec<f64>> {
    if targets.len() != slopes.len() {
        return Err(Error::LengthMismatch { what: "expected sizes", expected: slopes.len(), found: targets.len() });
    }
    if targets.iter().any(|&t| !(t > 0.0 && t.is_finite())) || targets.iter().sum::<f64>() >= n {
        return Err(Error::InvalidParameter("expected sizes must be positive and sum to less than n".into()));
    }
    let mut b = vec![0.0; slopes.len()];
    for _ in 0..SOLVER_MAX_ITER {
        let current = expected_sizes(slopes, &b, n);
        let mut worst: f64 = 0.0;
        for (s, &t) in targets.iter().enumerate() {
            let step = (t / current[s + 1]).ln();
            worst = worst.max(step.abs());
            b[s] += step;
        }
        if worst < SOLVER_TOLERANCE {
            return Ok(b);
        }
    }
    Err(Error::NoConvergence(SOLVER_MAX_ITER))
}

/// Conditional treatment effect `gamma + kappa * x` for `theta = (nu, gamma, lambda, kappa)`.
pub fn conditional_ate(theta: &[f64; 4], x: f64) -> f64 {
    theta[1] + theta[3] * x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub dataset: Dataset,
    /// `thetas[s - 1]` holds study `s`'s coefficients.
    pub thetas: Vec<[f64; 4]>,
}

/// Draws one data set. Study coefficients come from `tree / ("theta", 0)` and
/// units from `tree / ("units", 0)`, so coefficients do not depend on `n`.
pub fn generate_replicate(sc: &Scenario, tree: &SeedTree) -> Result<Replicate> {
    let intercepts = sc.resolved_intercepts()?;
    let var = sc.variances();
    let mut theta_rng = tree.derive("theta", 0);
    let thetas: Vec<[f64; 4]> = (0..sc.m)
        .map(|_| {
            let d = theta_rng.normal_diag(&sc.theta0, &var);
            [d[0], d[1], d[2], d[3]]
        })
        .collect();
    let mut rng = tree.derive("units", 0);
    let mut b = DatasetBuilder::with_capacity(sc.m, 1, sc.n);
    let mut probs = Vec::with_capacity(sc.m + 1);
    for row in 0..sc.n {
        let x = rng.standard_normal();
        membership_probabilities(&sc.slopes, &intercepts, x, &mut probs);
        let s = rng.categorical(&probs);
        if s == 0 {
            b.push(row, 0, None, None, &[x])?;
        } else {
            let a = rng.bernoulli(sc.treat_prob);
            let t = &thetas[s - 1];
            let af = if a { 1.0 } else { 0.0 };
            let y = t[0] + af * t[1] + x * t[2] + af * x * t[3] + rng.standard_normal();
            b.push(row, s, Some(Arm::from_indicator(a)), Some(y), &[x])?;
        }
    }
    Ok(Replicate { dataset: b.finish()?, thetas })
}

/// Mean covariate among target units of one membership-only draw, or `None`
/// when no unit landed in the target.
fn target_mean_draw(slopes: &[f64], intercepts: &[f64], n: usize, rng: &mut Stream) -> Option<f64> {
    let mut probs = Vec::with_capacity(slopes.len() + 1);
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..n {
        let x = rng.standard_normal();
        membership_probabilities(slopes, intercepts, x, &mut probs);
        if rng.categorical(&probs) == 0 {
            sum += x;
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthApproximation {
    pub tate: f64,
    pub e_x_target: f64,
    /// Monte Carlo SE of `e_x_target`.
    pub mcse: f64,
    pub replications: usize,
}

/// Averages the target covariate mean over `replications` membership-only
/// draws of size `sc.n` and maps it through `gamma0 + kappa0 * E(X | S = 0)`.
pub fn approximate_true_tate(sc: &Scenario, replications: usize, seed: u64) -> Result<TruthApproximation> {
    if replications < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 truth replications, got {replications}")));
    }
    let intercepts = sc.resolved_intercepts()?;
    let tree = SeedTree::new(seed);
    let draws: Vec<Option<f64>> = map_indexed(replications, |r| {
        target_mean_draw(&sc.slopes, &intercepts, sc.n, &mut tree.derive("truth", r as u64))
    });
    let means: Vec<f64> = draws.into_iter().flatten().collect();
    if means.len() < 2 {
        return Err(Error::TooFewEstimates { needed: 2, found: means.len() });
    }
    let e_x = means.iter().sum::<f64>() / means.len() as f64;
    Ok(TruthApproximation {
        tate: sc.theta0[1] + sc.theta0[3] * e_x,
        e_x_target: e_x,
        mcse: sample_sd(&means) / (means.len() as f64).sqrt(),
        replications,
    })
}

/// Infinite-population truth `gamma0 + kappa0 * E(X | S = 0)` by quadrature.
pub fn quadrature_true_tate(sc: &Scenario) -> Result<f64> {
    let b = sc.resolved_intercepts()?;
    Ok(sc.theta0[1] + sc.theta0[3] * target_covariate_mean(&sc.slopes, &b))
}

fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metric {
    pub value: f64,
    pub mcse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub replications: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: Metric,
    pub emp_se: Metric,
    pub mse: Metric,
    pub coverage: Option<Metric>,
    pub mean_bootstrap_se: Option<f64>,
    /// `100 * (mean bootstrap SE / EmpSE - 1)`, in percent.
    pub rel_se_error: Option<Metric>,
}

/// Performance summaries of a set of estimates of a known `truth`.
///
/// The relative SE error's MCSE uses the delta method on
/// `log(mean SE) - log(EmpSE)`, treating the two as independent.
pub fn compute_metrics(
    estimates: &[f64],
    intervals: Option<&[(f64, f64)]>,
    bootstrap_ses: Option<&[f64]>,
    truth: f64,
) -> Result<Metrics> {
    let k = estimates.len();
    if k < 2 {
        return Err(Error::TooFewEstimates { needed: 2, found: k });
    }
    let kf = k as f64;
    let mean = estimates.iter().sum::<f64>() / kf;
    let sd = sample_sd(estimates);
    let sq: Vec<f64> = estimates.iter().map(|e| (e - truth).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / kf;
    let coverage = intervals.filter(|iv| !iv.is_empty()).map(|iv| {
        let c = iv.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / iv.len() as f64;
        Metric { value: c, mcse: (c * (1.0 - c) / iv.len() as f64).sqrt() }
    });
    let ses = bootstrap_ses.filter(|s| !s.is_empty());
    let mean_bootstrap_se = ses.map(|s| s.iter().sum::<f64>() / s.len() as f64);
    let rel_se_error = ses.zip(mean_bootstrap_se).filter(|_| sd > 0.0).map(|(s, avg)| {
        let ratio = avg / sd;
        let var_se = sample_sd(s).powi(2);
        let rel_var = if avg > 0.0 { var_se / (s.len() as f64 * avg * avg) } else { 0.0 };
        Metric { value: 100.0 * (ratio - 1.0), mcse: 100.0 * ratio * (rel_var + 1.0 / (2.0 * (kf - 1.0))).sqrt() }
    });
    Ok(Metrics {
        replications: k,
        truth,
        mean,
        bias: Metric { value: mean - truth, mcse: sd / kf.sqrt() },
        emp_se: Metric { value: sd, mcse: sd / (2.0 * (kf - 1.0)).sqrt() },
        mse: Metric { value: mse, mcse: sample_sd(&sq) / kf.sqrt() },
        coverage,
        mean_bootstrap_se,
        rel_se_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruthSource {
    /// [`approximate_true_tate`] with this many membership draws.
    Approximate { replications: usize },
    Known { value: f64 },
}

impl Default for TruthSource {
    fn default() -> Self {
        TruthSource::Approximate { replications: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub estimators: Vec<EstimatorKind>,
    pub replications: usize,
    /// Per-replicate bootstrap; its `seed` is replaced by one derived from
    /// the replicate.
    pub bootstrap: Option<BootstrapConfig>,
    pub truth: TruthSource,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(estimators: Vec<EstimatorKind>, replications: usize, seed: u64) -> Self {
        Self { estimators, replications, bootstrap: None, truth: TruthSource::default(), seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateEstimate {
    pub estimate: f64,
    pub bootstrap_se: Option<f64>,
    pub interval: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub failures: usize,
    pub failure_rate: f64,
    pub bootstrap_failures: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimMetrics {
    pub scenario: String,
    pub replications: usize,
    pub truth: f64,
    pub truth_mcse: Option<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub metrics: SimMetrics,
    /// `replicates[r][k]` is estimator `k`'s result on replicate `r`, `None` on failure.
    pub replicates: Vec<Vec<Option<ReplicateEstimate>>>,
}

fn simulate_one(sc: &Scenario, cfg: &SimulationConfig, est: &EstimatorConfig, r: usize) -> Vec<Option<ReplicateEstimate>> {
    let none = vec![None; cfg.estimators.len()];
    let tree = SeedTree::new(cfg.seed).child("replicate", r as u64);
    let Ok(rep) = generate_replicate(sc, &tree) else { return none };
    let ds = &rep.dataset;
    let props = if cfg.estimators.iter().any(|k| k.needs_propensities()) {
        fit_propensities_with(ds, &est.specs, &est.fit_options, None).ok()
    } else {
        None
    };
    let reports = estimate_many(ds, props.as_ref(), &cfg.estimators, None);
    let boot = cfg.bootstrap.and_then(|b| {
        let seed = tree.derive("bootstrap", 0).next_u64();
        bootstrap_estimates_from(ds, est, &BootstrapConfig { seed, ..b }, props.as_ref()).ok()
    });
    reports
        .into_iter()
        .enumerate()
        .map(|(k, rep)| {
            let estimate = rep.ok()?.delta_hat;
            if !estimate.is_finite() {
                return None;
            }
            let b = boot.as_ref().map(|v| &v[k]);
            Some(ReplicateEstimate {
                estimate,
                bootstrap_se: b.map(|b| b.se_hat),
                interval: b.map(|b| b.interval),
            })
        })
        .collect()
}

/// Generates `cfg.replications` data sets, applies each estimator, and
/// optionally bootstraps every replicate.
pub fn run_simulation_study(sc: &Scenario, cfg: &SimulationConfig) -> Result<SimulationOutput> {
    sc.validate()?;
    if cfg.replications < 2 {
        return Err(Error::TooFewEstimates { needed: 2, found: cfg.replications });
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidParameter("no estimators requested".into()));
    }
    if let Some(b) = &cfg.bootstrap {
        b.validate()?;
    }
    let (truth, truth_mcse) = match cfg.truth {
        TruthSource::Known { value } => (value, None),
        TruthSource::Approximate { replications } => {
            let seed = SeedTree::new(cfg.seed).derive("truth", 0).next_u64();
            let t = approximate_true_tate(sc, replications, seed)?;
            (t.tate, Some(t.mcse * sc.theta0[3].abs()))
        }
    };
    let est = EstimatorConfig::new(PropensitySpecs::main_effects(1), cfg.estimators.clone());
    let replicates = map_indexed(cfg.replications, |r| simulate_one(sc, cfg, &est, r));

    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let ok: Vec<&ReplicateEstimate> = replicates.iter().filter_map(|r| r[k].as_ref()).collect();
            let failures = cfg.replications - ok.len();
            let estimates: Vec<f64> = ok.iter().map(|e| e.estimate).collect();
            let booted: Vec<&&ReplicateEstimate> = ok.iter().filter(|e| e.interval.is_some()).collect();
            let intervals: Vec<(f64, f64)> = booted.iter().filter_map(|e| e.interval).collect();
            let ses: Vec<f64> = booted.iter().filter_map(|e| e.bootstrap_se).collect();
            let with_boot = cfg.bootstrap.is_some();
            EstimatorSummary {
                estimator: kind,
                failures,
                failure_rate: failures as f64 / cfg.replications as f64,
                bootstrap_failures: if with_boot { ok.len() - booted.len() } else { 0 },
                metrics: compute_metrics(
                    &estimates,
                    with_boot.then_some(intervals.as_slice()),
                    with_boot.then_some(ses.as_slice()),
                    truth,
                )
                .ok(),
            }
        })
        .collect();

    Ok(SimulationOutput {
        metrics: SimMetrics {
            scenario: sc.name.clone(),
            replications: cfg.replications,
            truth,
            truth_mcse,
            estimators,
        },
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_moments() {
        let (x, w) = gauss_hermite(QUADRATURE_NODES);
        let moment = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-12);
        assert!(moment(1).abs() < 1e-12);
        assert!((moment(2) - 1.0).abs() < 1e-10);
        assert!((moment(4) - 3.0).abs() < 1e-9);
        assert!((moment(6) - 15.0).abs() < 1e-8);
    }

    #[test]
    fn membership_is_a_distribution() {
        let mut p = Vec::new();
        for x in [-30.0, -2.0, 0.0, 1.5, 40.0] {
            membership_probabilities(&M30_SLOPES, &M30_DIFFERENT, x, &mut p);
            assert_eq!(p.len(), 31);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn preset_sizes_match_similar_targets() {
        let sizes = expected_sizes(&M3_SLOPES, &M3_SIMILAR, 10_000.0);
        assert!((sizes[0] - 5500.0).abs() < 50.0, "{sizes:?}");
        for s in &sizes[1..] {
            assert!((s - 1500.0).abs() < 30.0);
        }
    }

    #[test]
    fn solver_symmetry_and_accuracy() {
        let b = solve_membership_intercepts(&[0.0; 4], &[100.0; 4], 1000.0).unwrap();
        for v in &b {
            assert!((v - b[0]).abs() < 1e-10);
        }
        // 100 / 600 share each
        assert!((b[0] - (1.0f64 / 6.0).ln()).abs() < 1e-8);
        let targets = [675.0, 1350.0, 2475.0];
        let b = solve_membership_intercepts(&M3_SLOPES, &targets, 10_000.0).unwrap();
        let got = expected_sizes(&M3_SLOPES, &b, 10_000.0);
        for (g, t) in got[1..].iter().zip(targets) {
            assert!((g - t).abs() < 0.1);
        }
    }

    #[test]
    fn solver_rejects_bad_targets() {
        assert!(solve_membership_intercepts(&[0.0], &[0.0], 10.0).is_err());
        assert!(solve_membership_intercepts(&[0.0, 0.0], &[6.0, 5.0], 10.0).is_err());
        assert!(solve_membership_intercepts(&[0.0], &[1.0, 2.0], 10.0).is_err());
    }

    #[test]
    fn conditional_ate_examples() {
        assert_eq!(conditional_ate(&THETA0, 0.0), -1.0);
        assert_eq!(conditional_ate(&THETA0, 2.0), -2.0);
        let flat = [0.3, 0.7, 1.0, 0.0];
        assert_eq!(conditional_ate(&flat, -5.0), conditional_ate(&flat, 9.0));
    }

    #[test]
    fn zero_slopes_give_known_truth() {
        let sc = Scenario { slopes: vec![0.0; 3], ..Scenario::preset("m3s1").unwrap() }.with_n(2000);
        assert!(target_covariate_mean(&sc.slopes, sc.intercepts.as_ref().unwrap()).abs() < 1e-12);
        let t = approximate_true_tate(&sc, 200, 3).unwrap();
        assert!(t.e_x_target.abs() < 4.0 * t.mcse + 1e-12);
        assert!((t.tate + 1.0).abs() < 0.5 * 4.0 * t.mcse + 1e-12);
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let sc = Scenario::preset(name).unwrap();
            sc.validate().unwrap();
            assert_eq!(sc.slopes.len(), sc.m);
        }
        assert!(Scenario::preset("m4s1").is_err());
        let bad = Scenario { expected_sizes: Some(vec![1.0; 3]), ..Scenario::preset("m3s1").unwrap() };
        assert!(bad.validate().is_err());
        assert_eq!(Scenario::preset("m3s3").unwrap().variances(), [0.5, 2.0, 0.5, 0.1]);
    }

    #[test]
    fn generation_is_deterministic_and_theta_independent_of_n() {
        let sc = Scenario::preset("m3s2").unwrap().with_n(800);
        let t = SeedTree::new(11).child("replicate", 4);
        let a = generate_replicate(&sc, &t).unwrap();
        let b = generate_replicate(&sc, &t).unwrap();
        assert_eq!(a, b);
        let c = generate_replicate(&sc.clone().with_n(1600), &t).unwrap();
        assert_eq!(a.thetas, c.thetas);
        assert_eq!(a.dataset.n(), 800);
    }

    #[test]
    fn generated_arms_are_balanced() {
        let sc = Scenario::preset("m3s1").unwrap();
        let rep = generate_replicate(&sc, &SeedTree::new(1)).unwrap();
        for s in 1..=3 {
            let (t, c) = crate::data::arm_sizes(&rep.dataset, s).unwrap();
            let n = (t + c) as f64;
            let se = (0.25 / n).sqrt();
            assert!((t as f64 / n - 0.5).abs() < 3.0 * se);
        }
        let xs: Vec<f64> = (0..rep.dataset.n()).map(|i| rep.dataset.covariates_of(i)[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((sample_sd(&xs) - 1.0).abs() < 4.0 / (2.0 * n).sqrt());
    }

    #[test]
    fn study_cate_is_unbiased_for_target_cate() {
        let sc = Scenario::preset("m3s2").unwrap();
        let var = sc.variances();
        let mut rng = SeedTree::new(8).derive("theta", 0);
        let x = 1.3;
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                let d = rng.normal_diag(&THETA0, &var);
                conditional_ate(&[d[0], d[1], d[2], d[3]], x)
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = sample_sd(&draws) / (draws.len() as f64).sqrt();
        assert!((mean - conditional_ate(&THETA0, x)).abs() < 4.0 * se);
    }

    #[test]
    fn metric_examples() {
        let m = compute_metrics(&[-1.0; 3], None, None, -1.0).unwrap();
        assert_eq!((m.bias.value, m.emp_se.value, m.mse.value), (0.0, 0.0, 0.0));
        let m = compute_metrics(&[-0.9, -1.1], Some(&[(-2.0, 0.0), (-0.5, 0.0)]), None, -1.0).unwrap();
        assert!(m.bias.value.abs() < 1e-12);
        assert!((m.emp_se.value - 0.141_421_356).abs() < 1e-6);
        assert!((m.mse.value - 0.01).abs() < 1e-12);
        let c = m.coverage.unwrap();
        assert_eq!(c.value, 0.5);
        assert!((c.mcse - 0.353_553_39).abs() < 1e-6);
        assert!(compute_metrics(&[1.0], None, None, 0.0).is_err());
    }

    #[test]
    fn relative_error_sign() {
        let est = [-1.2, -0.8, -1.1, -0.9];
        let sd = sample_sd(&est);
        let m = compute_metrics(&est, None, Some(&[sd / 2.0; 4]), -1.0).unwrap();
        assert!((m.rel_se_error.unwrap().value + 50.0).abs() < 1e-9);
    }

    #[test]
    fn homogeneous_limit_pooled_matches_two_stage() {
        let sc = Scenario { sigma_theta: Some([0.5, 1e-12, 0.5, 1e-12]), ..Scenario::preset("m3s2").unwrap() };
        let mut cfg = SimulationConfig::new(vec![EstimatorKind::Pooled, EstimatorKind::TwoStage], 20, 5);
        cfg.truth = TruthSource::Known { value: quadrature_true_tate(&sc).unwrap() };
        let out = run_simulation_study(&sc, &cfg).unwrap();
        let diffs: Vec<f64> = out
            .replicates
            .iter()
            .map(|r| r[0].unwrap().estimate - r[1].unwrap().estimate)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let se = sample_sd(&diffs) / (diffs.len() as f64).sqrt();
        assert!(mean.abs() < 4.0 * se + 1e-3, "mean diff {mean} se {se}");
    }

    #[test]
    fn known_truth_zero_variance_metrics() {
        let m = compute_metrics(&[2.5, 2.5, 2.5, 2.5], Some(&[(2.0, 3.0); 4]), Some(&[0.0; 4]), 2.5).unwrap();
        assert_eq!(m.bias.value, 0.0);
        assert_eq!(m.mse.value, 0.0);
        assert_eq!(m.coverage.unwrap().value, 1.0);
        assert!(m.rel_se_error.is_none());
    }
}
