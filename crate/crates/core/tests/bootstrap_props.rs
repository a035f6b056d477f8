use proptest::prelude::*;
use tate_core::bootstrap::{bootstrap_estimates, percentile_interval, BootstrapConfig, EstimatorConfig};
use tate_core::estimators::EstimatorKind;
use tate_core::propensity::PropensitySpecs;
use tate_core::simlab::{generate_replicate, Scenario};
use tate_core::rng::SeedTree;

proptest! {
    #[test]
    fn interval_is_ordered_and_inside_range(xs in prop::collection::vec(-1e3f64..1e3, 2..200), alpha in 0.001f64..0.999) {
        let (lo, hi) = percentile_interval(&xs, alpha).unwrap();
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min <= lo && lo <= hi && hi <= max);
    }

    #[test]
    fn interval_narrows_with_alpha(xs in prop::collection::vec(-10f64..10.0, 2..100), a in 0.01f64..0.5, b in 0.01f64..0.5) {
        let (small, large) = if a < b { (a, b) } else { (b, a) };
        let wide = percentile_interval(&xs, small).unwrap();
        let narrow = percentile_interval(&xs, large).unwrap();
        prop_assert!(wide.0 <= narrow.0 + 1e-12 && narrow.1 <= wide.1 + 1e-12);
    }

    #[test]
    fn interval_reflects_under_negation(xs in prop::collection::vec(-10f64..10.0, 2..100), alpha in 0.01f64..0.99) {
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (lo, hi) = percentile_interval(&xs, alpha).unwrap();
        let (nlo, nhi) = percentile_interval(&neg, alpha).unwrap();
        prop_assert!((lo + nhi).abs() < 1e-9 && (hi + nlo).abs() < 1e-9);
    }

    #[test]
    fn interval_ignores_order(mut xs in prop::collection::vec(-10f64..10.0, 2..50), alpha in 0.01f64..0.99) {
        let a = percentile_interval(&xs, alpha).unwrap();
        xs.reverse();
        prop_assert_eq!(a, percentile_interval(&xs, alpha).unwrap());
    }
}

#[test]
fn bootstrap_is_reproducible_and_warm_start_agrees() {
    let sc = Scenario::preset("m3s2").unwrap().with_n(3000);
    let ds = generate_replicate(&sc, &SeedTree::new(3)).unwrap().dataset;
    let cfg = EstimatorConfig::new(PropensitySpecs::main_effects(1), EstimatorKind::ALL.to_vec());
    let boot = BootstrapConfig { replicates: 40, alpha: 0.05, seed: 99, warm_start: true };
    let a = bootstrap_estimates(&ds, &cfg, &boot).unwrap();
    let b = bootstrap_estimates(&ds, &cfg, &boot).unwrap();
    assert_eq!(a, b);
    let cold = bootstrap_estimates(&ds, &cfg, &BootstrapConfig { warm_start: false, ..boot }).unwrap();
    for (w, c) in a.iter().zip(&cold) {
        assert_eq!(w.missing_count, c.missing_count);
        for (x, y) in w.replicate_estimates.iter().zip(&c.replicate_estimates) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-6);
        }
    }
    for r in &a {
        assert!(r.se_hat > 0.0 && r.interval.0 < r.interval.1);
        assert_eq!(r.replicate_estimates.len(), 40);
    }
}
