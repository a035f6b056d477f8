//! Command drivers. Each returns its machine report; `main` prints the
//! tables and writes the JSON.

use std::path::Path;

use tate_core::bootstrap::{bootstrap_estimates_from, EstimatorConfig};
use tate_core::estimators::{estimate_many, positivity_summaries, EstimatorKind};
use tate_core::oracle::{
    b4_gap, run_theorem_suite, study_effect, tate_via_identification, true_tate_direct, DiscretePopulation, THEOREM_TOL,
};
use tate_core::propensity::{fit_propensities, FittedLogit, FittedMultinomial};
use tate_core::simlab::{run_simulation_study, Scenario, SimulationConfig};
use tate_core::{arm_sizes, Error as CoreError};

use crate::config::{parse_toml, read_with, AnalysisConfig, BootstrapSection, ScenarioFile};
use crate::csv_io::{load_csv, Table};
use crate::error::{CliError, Result};
use crate::report::*;

fn logit_fit(f: &FittedLogit) -> ModelFit {
    ModelFit { converged: f.converged, iterations: f.iterations, score_norm: f.score_norm, log_likelihood: f.log_likelihood }
}

fn multinomial_fit(f: &FittedMultinomial) -> ModelFit {
    ModelFit { converged: f.converged, iterations: f.iterations, score_norm: f.score_norm, log_likelihood: f.log_likelihood }
}

fn data_summary(t: &Table) -> Result<DataSummary> {
    let ds = &t.dataset;
    let studies = (1..=ds.m())
        .map(|s| {
            let (treated, control) = arm_sizes(ds, s)?;
            Ok(StudySummary { study: s, size: ds.study_size(s), treated, control })
        })
        .collect::<Result<Vec<_>, CoreError>>()?;
    Ok(DataSummary { n: ds.n(), m: ds.m(), target_size: ds.study_size(0), covariates: t.covariates.clone(), studies })
}

/// Runs an analysis on loaded data. `seed` overrides the bootstrap seed of
/// the configuration.
pub fn run_analysis(
    table: &Table,
    cfg: &AnalysisConfig,
    seed: Option<u64>,
    provenance: impl FnOnce(u64) -> Provenance,
) -> Result<AnalysisReport> {
    let ds = &table.dataset;
    let seed = seed.or(cfg.bootstrap.and_then(|b| b.seed)).unwrap_or(0);
    let specs = cfg.specs(&table.covariates)?;
    let kinds = &cfg.estimators.run;
    let weights = cfg.estimators.study_weights.as_deref();
    let needs_models = kinds.iter().any(|k| k.needs_propensities());
    let props = if needs_models { Some(fit_propensities(ds, &specs)?) } else { None };

    let point = estimate_many(ds, props.as_ref(), kinds, weights).into_iter().collect::<Result<Vec<_>, _>>()?;
    let boot = match cfg.bootstrap {
        Some(b) => {
            let est = EstimatorConfig {
                study_weights: cfg.estimators.study_weights.clone(),
                ..EstimatorConfig::new(specs.clone(), kinds.clone())
            };
            bootstrap_estimates_from(ds, &est, &b.to_config(seed), props.as_ref())?.into_iter().map(Some).collect()
        }
        None => vec![None; kinds.len()],
    };
    let estimates = kinds
        .iter()
        .zip(point)
        .zip(boot)
        .map(|((&estimator, estimate), bootstrap)| EstimateEntry { estimator, estimate, bootstrap })
        .collect();

    let models = props.as_ref().map(|p| ModelSummary {
        treatment: specs.treatment.to_string_with_names(&table.covariates),
        membership: specs.membership.to_string_with_names(&table.covariates),
        treatment_fits: p.treatment.iter().map(logit_fit).collect(),
        membership_fit: multinomial_fit(&p.membership),
    });
    let positivity = match &props {
        Some(p) if cfg.report.positivity => Some(positivity_summaries(ds, p)?),
        _ => None,
    };
    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        kind: ANALYSIS.into(),
        provenance: provenance(seed),
        data: data_summary(table)?,
        models,
        estimates,
        positivity,
    })
}

pub fn analyze(data: &Path, config: &Path, seed: Option<u64>) -> Result<AnalysisReport> {
    let (cfg, cfg_text) = read_with(config, AnalysisConfig::parse)?;
    let data_bytes = std::fs::read(data).map_err(|e| CliError::io(data, e))?;
    let table = load_csv(data)?;
    run_analysis(&table, &cfg, seed, |s| Provenance::new(s, cfg_text.as_bytes(), Some(&data_bytes)))
}

/// Where a simulation scenario comes from.
#[derive(Debug, Clone)]
pub enum ScenarioSource<'a> {
    Preset(&'a str),
    File(&'a Path),
}

#[derive(Debug, Clone, Copy)]
pub struct SimulateOptions {
    pub replications: usize,
    /// Bootstrap replicates per simulated dataset; `None` skips the bootstrap
    /// unless the scenario file asks for one.
    pub bootstrap: Option<usize>,
    pub seed: u64,
    /// Overrides the scenario's sample size.
    pub n: Option<usize>,
}

pub fn simulate(source: ScenarioSource<'_>, opts: SimulateOptions) -> Result<SimulationReport> {
    let (file, text) = match source {
        ScenarioSource::Preset(name) => {
            let file = ScenarioFile { scenario: Scenario::preset(name)?, estimators: None, bootstrap: None, truth: None };
            (file, format!("preset={name}"))
        }
        ScenarioSource::File(path) => read_with(path, ScenarioFile::parse)?,
    };
    if opts.replications < 2 {
        return Err(CoreError::TooFewEstimates { needed: 2, found: opts.replications }.into());
    }
    let mut scenario = file.scenario;
    if let Some(n) = opts.n {
        scenario = scenario.with_n(n);
    }
    let estimators = file.estimators.map_or_else(|| EstimatorKind::ALL.to_vec(), |e| e.run);
    let boot_section = match (opts.bootstrap, file.bootstrap) {
        (Some(b), Some(sec)) => Some(BootstrapSection { replicates: b, ..sec }),
        (Some(b), None) => Some(BootstrapSection { replicates: b, alpha: 0.05, seed: None, warm_start: true }),
        (None, sec) => sec,
    };
    let mut cfg = SimulationConfig::new(estimators.clone(), opts.replications, opts.seed);
    cfg.bootstrap = boot_section.map(|b| b.to_config(0));
    if let Some(t) = file.truth {
        cfg.truth = t;
    }
    let out = run_simulation_study(&scenario, &cfg)?;
    let canonical = format!(
        "{text}\nreplications={}\nbootstrap={:?}\nn={:?}",
        opts.replications, opts.bootstrap, opts.n
    );
    Ok(SimulationReport {
        schema_version: SCHEMA_VERSION,
        kind: SIMULATION.into(),
        provenance: Provenance::new(opts.seed, canonical.as_bytes(), None),
        intercepts: scenario.resolved_intercepts()?,
        scenario,
        replications: opts.replications,
        estimators,
        bootstrap: cfg.bootstrap,
        truth_source: cfg.truth,
        metrics: out.metrics,
    })
}

/// Evaluates a fixture population. A population violating the
/// heterogeneity condition is an expected failure when the identity breaks.
pub fn check_fixture(pop: &DiscretePopulation) -> Result<FixtureCheck> {
    let direct = true_tate_direct(pop);
    let via = tate_via_identification(pop)?;
    let study_effects = (1..=pop.m).map(|s| study_effect(pop, s)).collect::<Result<Vec<_>, _>>()?;
    let gap = b4_gap(pop);
    let holds = gap <= THEOREM_TOL;
    let agrees = (via - direct).abs() < THEOREM_TOL;
    let status = match (holds, agrees) {
        (true, true) => FixtureStatus::Pass,
        (false, false) => FixtureStatus::ExpectedFail,
        _ => FixtureStatus::Fail,
    };
    Ok(FixtureCheck { condition_gap: gap, condition_holds: holds, direct, via_identification: via, study_effects, status })
}

pub fn oracle_check(n: usize, seed: u64, fixture: Option<&Path>) -> Result<OracleReport> {
    let mut canonical = format!("n={n}");
    let fixture = match fixture {
        Some(path) => {
            let (pop, text) = read_with(path, parse_toml::<DiscretePopulation>)?;
            canonical += "\n";
            canonical += &text;
            Some(check_fixture(&pop)?)
        }
        None => None,
    };
    Ok(OracleReport {
        schema_version: SCHEMA_VERSION,
        kind: ORACLE.into(),
        provenance: Provenance::new(seed, canonical.as_bytes(), None),
        suite: run_theorem_suite(n, seed)?,
        fixture,
    })
}

/// Nonzero when a population meeting the condition broke the identity.
pub fn oracle_exit_code(r: &OracleReport) -> u8 {
    let fixture_failed = r.fixture.as_ref().is_some_and(|f| f.status == FixtureStatus::Fail);
    u8::from(!r.suite.all_passed() || fixture_failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csv_io::read_csv;

    fn toy_table() -> Table {
        let mut text = String::from("study,arm,outcome,age\n");
        for i in 0..40 {
            let x = (i % 7) as f64 - 3.0;
            text += &format!("0,,,{x}\n");
            for s in 1..=2 {
                let arm = i % 2;
                let y = 1.0 + x + arm as f64 * (0.5 + 0.1 * s as f64) + ((i * 13 % 5) as f64 - 2.0) / 4.0;
                text += &format!("{s},{arm},{y},{}\n", x + 0.3 * s as f64);
            }
        }
        read_csv(text.as_bytes()).unwrap()
    }

    fn prov(s: u64) -> Provenance {
        Provenance::new(s, b"", None)
    }

    #[test]
    fn analysis_without_bootstrap() {
        let cfg = AnalysisConfig::parse("[models]\nmembership = \"1 + age + age^2\"\n").unwrap();
        let r = run_analysis(&toy_table(), &cfg, None, prov).unwrap();
        assert_eq!(r.estimates.len(), 3);
        assert_eq!(r.models.as_ref().unwrap().membership, "1 + age + age^2");
        assert_eq!(r.positivity.as_ref().unwrap().len(), 2);
        assert!(r.estimates.iter().all(|e| e.bootstrap.is_none()));
    }

    #[test]
    fn seed_flag_overrides_config() {
        let cfg = AnalysisConfig::parse("[estimators]\nrun = [\"unadjusted\"]\n[bootstrap]\nreplicates = 20\nseed = 5\n").unwrap();
        let t = toy_table();
        let a = run_analysis(&t, &cfg, None, prov).unwrap();
        let b = run_analysis(&t, &cfg, Some(5), prov).unwrap();
        let c = run_analysis(&t, &cfg, Some(6), prov).unwrap();
        assert_eq!(a.provenance.seed, 5);
        assert!(a.models.is_none());
        assert_eq!(a.estimates[0].bootstrap, b.estimates[0].bootstrap);
        assert_ne!(a.estimates[0].bootstrap, c.estimates[0].bootstrap);
    }

    #[test]
    fn single_replication_is_rejected() {
        let opts = SimulateOptions { replications: 1, bootstrap: None, seed: 1, n: None };
        let err = simulate(ScenarioSource::Preset("m3s1"), opts).unwrap_err();
        assert!(matches!(err, CliError::Core(CoreError::TooFewEstimates { .. })));
        assert!(simulate(ScenarioSource::Preset("m4s1"), SimulateOptions { replications: 5, ..opts }).is_err());
    }

    #[test]
    fn fixture_statuses() {
        let pop = DiscretePopulation {
            m: 2,
            support: vec![0.0],
            mass: vec![vec![0.5, 0.25, 0.25]],
            treat_prob: vec![vec![0.5, 0.5, 0.3]],
            cate: vec![vec![-1.0, -0.6, -1.4]],
            control_mean: vec![vec![0.0, 1.0, 2.0]],
        };
        assert_eq!(check_fixture(&pop).unwrap().status, FixtureStatus::Pass);
        let mut broken = pop.clone();
        broken.cate[0][1] += 0.5;
        assert_eq!(check_fixture(&broken).unwrap().status, FixtureStatus::ExpectedFail);
    }
}
