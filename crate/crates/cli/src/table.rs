//! Fixed-width text tables for standard output.

use std::fmt::Write;

use tate_core::simlab::{Metric, SimMetrics};

use crate::report::{AnalysisReport, FixtureStatus, OracleReport, SimulationReport};

/// Left-aligned first column, right-aligned rest.
fn render(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (j, cell) in cells.enumerate().take(cols) {
            if j == 0 {
                let _ = write!(s, "{cell:<w$}", w = width[0]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = width[j]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    out += &"-".repeat(width.iter().sum::<usize>() + 2 * (cols - 1));
    out.push('\n');
    for row in rows {
        out += &line(&mut row.iter().map(String::as_str));
    }
    out
}

fn interval(iv: (f64, f64)) -> String {
    format!("({:.3}, {:.3})", iv.0, iv.1)
}

fn with_mcse(m: &Metric, digits: usize) -> String {
    format!("{:.d$} ({:.d$})", m.value, m.mcse, d = digits)
}

pub fn analysis(r: &AnalysisReport) -> String {
    let d = &r.data;
    let mut out = format!(
        "Target sample {} units; {} trials with sizes {}\n\n",
        d.target_size,
        d.m,
        d.studies.iter().map(|s| s.size.to_string()).collect::<Vec<_>>().join(", ")
    );
    let booted = r.estimates.iter().any(|e| e.bootstrap.is_some());
    let mut header = vec!["Estimator", "Estimate"];
    if booted {
        header.extend(["Boot SE", "Percentile CI", "Missing"]);
    }
    let rows: Vec<Vec<String>> = r
        .estimates
        .iter()
        .map(|e| {
            let mut row = vec![e.estimator.label().to_string(), format!("{:.4}", e.estimate.delta_hat)];
            if let Some(b) = &e.bootstrap {
                row.extend([
                    format!("{:.4}", b.se_hat),
                    interval(b.interval),
                    format!("{}/{}", b.missing_count, b.replicates),
                ]);
            } else if booted {
                row.extend(["-".into(), "-".into(), "-".into()]);
            }
            row
        })
        .collect();
    out += &render(&header, &rows);

    for e in r.estimates.iter().filter(|e| !e.estimate.per_study.is_empty()) {
        out += &format!("\nStudy-specific estimates ({})\n", e.estimator.label());
        let total: f64 = e.estimate.study_weights.values().sum();
        let rows: Vec<Vec<String>> = e
            .estimate
            .per_study
            .iter()
            .map(|(s, v)| vec![s.to_string(), format!("{v:.4}"), format!("{:.4}", e.estimate.study_weights[s] / total)])
            .collect();
        out += &render(&["Study", "Estimate", "Weight"], &rows);
    }

    let missing: Vec<_> = r.estimates.iter().filter_map(|e| e.bootstrap.as_ref()).filter(|b| b.missing_count > 0).collect();
    if !missing.is_empty() {
        out += "\nIntervals with missing replicates placed low / at the mean / high\n";
        let rows: Vec<Vec<String>> = missing
            .iter()
            .map(|b| {
                vec![
                    b.estimator.label().to_string(),
                    format!("{:.1}%", 100.0 * b.missing_rate),
                    interval(b.sensitivity.low),
                    interval(b.sensitivity.mean),
                    interval(b.sensitivity.high),
                ]
            })
            .collect();
        out += &render(&["Estimator", "Missing", "Low", "Mean", "High"], &rows);
    }

    if let Some(pos) = &r.positivity {
        out += "\nPredicted participation probabilities among target units\n";
        let rows: Vec<Vec<String>> = pos
            .iter()
            .map(|p| {
                vec![
                    p.study.to_string(),
                    format!("{:.4}", p.min),
                    format!("{:.4}", p.mean),
                    format!("{:.4}", p.max),
                    format!("{:.4}", p.sd),
                ]
            })
            .collect();
        out += &render(&["Study", "Min", "Mean", "Max", "SD"], &rows);
    }
    out
}

pub fn simulation_metrics(m: &SimMetrics) -> String {
    let booted = m.estimators.iter().any(|e| e.metrics.as_ref().is_some_and(|x| x.coverage.is_some()));
    let mut header = vec!["Estimator", "Bias (MCSE)", "EmpSE (MCSE)", "MSE (MCSE)"];
    if booted {
        header.extend(["Coverage (MCSE)", "Rel. SE error % (MCSE)"]);
    }
    header.push("Failures");
    let rows: Vec<Vec<String>> = m
        .estimators
        .iter()
        .map(|e| {
            let mut row = vec![e.estimator.label().to_string()];
            match &e.metrics {
                Some(x) => {
                    row.extend([with_mcse(&x.bias, 3), with_mcse(&x.emp_se, 3), with_mcse(&x.mse, 3)]);
                    if booted {
                        row.push(x.coverage.as_ref().map_or("-".into(), |c| with_mcse(c, 3)));
                        row.push(x.rel_se_error.as_ref().map_or("-".into(), |c| with_mcse(c, 1)));
                    }
                }
                None => row.extend(std::iter::repeat("-".to_string()).take(header.len() - 2)),
            }
            row.push(e.failures.to_string());
            row
        })
        .collect();
    render(&header, &rows)
}

pub fn simulation(r: &SimulationReport) -> String {
    let m = &r.metrics;
    let truth = match m.truth_mcse {
        Some(se) => format!("{:.4} (MCSE {:.4})", m.truth, se),
        None => format!("{:.4}", m.truth),
    };
    format!(
        "Scenario {} with {} replications; true effect {truth}\n\n{}",
        m.scenario,
        m.replications,
        simulation_metrics(m)
    )
}

pub fn oracle(r: &OracleReport) -> String {
    let s = &r.suite;
    let mut out = format!(
        "Populations meeting the condition: {}/{} pass (max error {:.2e})\n\
         Populations violating it: {}/{} detected (min discrepancy {:.2e})\n",
        s.passed, s.satisfying, s.max_error, s.detected, s.violating, s.min_discrepancy
    );
    if let Some(f) = &r.fixture {
        out += &format!(
            "\nFixture: condition gap {:.3e}\n  direct              {:.10}\n  via identification  {:.10}\n",
            f.condition_gap, f.direct, f.via_identification
        );
        for (s, d) in f.study_effects.iter().enumerate() {
            out += &format!("  study {:<3}           {:.10}\n", s + 1, d);
        }
        let status = match f.status {
            FixtureStatus::Pass => "pass",
            FixtureStatus::ExpectedFail => "expected failure (condition violated)",
            FixtureStatus::Fail => "FAIL",
        };
        out += &format!("  status              {status}\n");
    }
    out
}
