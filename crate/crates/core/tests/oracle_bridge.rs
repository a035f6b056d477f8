//! Links the estimators to the exact identification result: on large samples
//! from a discrete population, the two-stage estimator with study weights
//! proportional to study size approaches the identified effect.

use tate_core::estimators::estimate_two_stage_with;
use tate_core::oracle::{
    check_assumption_b4, random_b4_population, sample_population, tate_via_identification, true_tate_direct,
};
use tate_core::propensity::{fit_propensities, PropensitySpecs};
use tate_core::rng::SeedTree;

#[test]
fn large_sample_two_stage_reaches_identified_effect() {
    let tree = SeedTree::new(31);
    let pop = random_b4_population(&mut tree.derive("pop", 0), 3, 4);
    assert!(check_assumption_b4(&pop, 1e-12));
    let truth = tate_via_identification(&pop).unwrap();
    assert!((truth - true_tate_direct(&pop)).abs() < 1e-10);

    // ten independent blocks of 1e5 units; the full 1e6-unit estimate has
    // SE about sd(block estimates) / sqrt(10)
    let specs = PropensitySpecs::main_effects(pop.atoms() - 1);
    let mut blocks = Vec::new();
    let mut all = Vec::new();
    for b in 0..10 {
        let ds = sample_population(&pop, 100_000, &mut tree.derive("sample", b)).unwrap();
        let props = fit_propensities(&ds, &specs).unwrap();
        let w: Vec<f64> = (1..=3).map(|s| ds.study_size(s) as f64).collect();
        blocks.push(estimate_two_stage_with(&ds, &props, Some(&w)).unwrap().delta_hat);
        all.extend(ds.observations());
    }
    let full = tate_core::validate_dataset(all, 3).unwrap();
    assert_eq!(full.n(), 1_000_000);
    let props = fit_propensities(&full, &specs).unwrap();
    let w: Vec<f64> = (1..=3).map(|s| full.study_size(s) as f64).collect();
    let est = estimate_two_stage_with(&full, &props, Some(&w)).unwrap().delta_hat;

    let mean = blocks.iter().sum::<f64>() / 10.0;
    let sd = (blocks.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    let se = sd / 10f64.sqrt();
    assert!((est - truth).abs() < 4.0 * se, "estimate {est}, truth {truth}, se {se}");
}
