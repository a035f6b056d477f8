//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export takes plain numbers or JSON text and returns JSON text, so the
//! page needs no generated type definitions.

use serde::Serialize;
use tate_core::estimators::EstimatorKind;
use tate_core::oracle::{b4_gap, random_b4_population, random_b4_violating, study_effect, tate_via_identification, true_tate_direct};
use tate_core::rng::SeedTree;
use tate_core::simlab::{
    expected_sizes, membership_probabilities, quadrature_true_tate, run_simulation_study, solve_membership_intercepts, Scenario,
    SimulationConfig, TruthSource,
};
use wasm_bindgen::prelude::*;

fn json<T: Serialize>(value: &T) -> Result<String, JsValue> {
    serde_json::to_string(value).map_err(|e| JsValue::from_str(&e.to_string()))
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
pub struct Curves {
    pub intercepts: Vec<f64>,
    pub sizes: Vec<f64>,
    pub x: Vec<f64>,
    /// `probs[s][i]` is `P(S = s | x[i])`, study 0 being the target sample.
    pub probs: Vec<Vec<f64>>,
}

/// Solves membership intercepts for the requested expected trial sizes and
/// evaluates the membership probabilities on a grid over `[-3, 3]`.
pub fn curves(slopes: &[f64], sizes: &[f64], n: f64, points: usize) -> tate_core::Result<Curves> {
    let intercepts = solve_membership_intercepts(slopes, sizes, n)?;
    let points = points.max(2);
    let x: Vec<f64> = (0..points).map(|i| -3.0 + 6.0 * i as f64 / (points - 1) as f64).collect();
    let mut probs = vec![Vec::with_capacity(points); slopes.len() + 1];
    let mut p = Vec::new();
    for &xi in &x {
        membership_probabilities(slopes, &intercepts, xi, &mut p);
        for (col, v) in probs.iter_mut().zip(&p) {
            col.push(*v);
        }
    }
    let sizes = expected_sizes(slopes, &intercepts, n);
    Ok(Curves { intercepts, sizes, x, probs })
}

#[wasm_bindgen]
pub fn membership_curves(slopes_json: &str, sizes_json: &str, n: f64, points: usize) -> Result<String, JsValue> {
    let slopes: Vec<f64> = serde_json::from_str(slopes_json).map_err(js_err)?;
    let sizes: Vec<f64> = serde_json::from_str(sizes_json).map_err(js_err)?;
    json(&curves(&slopes, &sizes, n, points).map_err(js_err)?)
}

#[derive(Serialize)]
pub struct EstimatorDraws {
    pub estimator: &'static str,
    pub estimates: Vec<f64>,
    pub bias: Option<f64>,
    pub emp_se: Option<f64>,
}

#[derive(Serialize)]
pub struct SmallStudy {
    pub truth: f64,
    pub sizes: Vec<f64>,
    pub estimators: Vec<EstimatorDraws>,
}

/// A few replications of a preset at a reduced sample size. The truth comes
/// from quadrature so the page stays responsive.
pub fn small_study(preset: &str, n: usize, reps: usize, seed: u64) -> tate_core::Result<SmallStudy> {
    let sc = Scenario::preset(preset)?.with_n(n);
    let truth = quadrature_true_tate(&sc)?;
    let mut cfg = SimulationConfig::new(EstimatorKind::ALL.to_vec(), reps, seed);
    cfg.truth = TruthSource::Known { value: truth };
    let out = run_simulation_study(&sc, &cfg)?;
    let estimators = EstimatorKind::ALL
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let m = out.metrics.estimators[k].metrics.as_ref();
            EstimatorDraws {
                estimator: kind.label(),
                estimates: out.replicates.iter().filter_map(|r| r[k].map(|e| e.estimate)).collect(),
                bias: m.map(|m| m.bias.value),
                emp_se: m.map(|m| m.emp_se.value),
            }
        })
        .collect();
    Ok(SmallStudy { truth, sizes: expected_sizes(&sc.slopes, &sc.resolved_intercepts()?, n as f64), estimators })
}

#[wasm_bindgen]
pub fn simulate_preset(preset: &str, n: usize, reps: usize, seed: u64) -> Result<String, JsValue> {
    json(&small_study(preset, n, reps, seed).map_err(js_err)?)
}

#[derive(Serialize)]
pub struct Identification {
    pub gap: f64,
    pub direct: f64,
    pub via_identification: f64,
    pub study_effects: Vec<f64>,
    pub support: Vec<f64>,
    /// `cate[k][s]`, column 0 for the target.
    pub cate: Vec<Vec<f64>>,
}

/// Draws a random discrete population, with or without the heterogeneity
/// condition, and compares the direct target effect to the identified one.
pub fn identification(m: usize, atoms: usize, violate: bool, seed: u64) -> tate_core::Result<Identification> {
    if m == 0 || atoms == 0 {
        return Err(tate_core::Error::InvalidParameter("need at least one trial and one atom".into()));
    }
    let mut rng = SeedTree::new(seed).derive("demo", 0);
    let pop = if violate { random_b4_violating(&mut rng, m, atoms, 0.1) } else { random_b4_population(&mut rng, m, atoms) };
    Ok(Identification {
        gap: b4_gap(&pop),
        direct: true_tate_direct(&pop),
        via_identification: tate_via_identification(&pop)?,
        study_effects: (1..=m).map(|s| study_effect(&pop, s)).collect::<tate_core::Result<_>>()?,
        support: pop.support.clone(),
        cate: pop.cate.clone(),
    })
}

#[wasm_bindgen]
pub fn identification_check(m: usize, atoms: usize, violate: bool, seed: u64) -> Result<String, JsValue> {
    json(&identification(m, atoms, violate, seed).map_err(js_err)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_sum_to_one_and_hit_sizes() {
        let c = curves(&[-0.3, 0.1], &[500.0, 1100.0], 4000.0, 7).unwrap();
        for i in 0..7 {
            let total: f64 = c.probs.iter().map(|col| col[i]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert!((c.sizes[1] / 500.0 - 1.0).abs() < 1e-7 && (c.sizes[2] / 1100.0 - 1.0).abs() < 1e-7);
    }

    #[test]
    fn identification_flags_violation() {
        let ok = identification(3, 4, false, 1).unwrap();
        assert!((ok.direct - ok.via_identification).abs() < 1e-10);
        let bad = identification(3, 4, true, 1).unwrap();
        assert!((bad.direct - bad.via_identification).abs() > 1e-3);
        assert!(identification(0, 4, false, 1).is_err());
    }
}
