//! Exact finite-population check of the identification result.
//!
//! A [`DiscretePopulation`] puts mass on finitely many covariate atoms in each
//! of the target (`s = 0`) and `m` trial populations. Every expectation below
//! is a finite sum over atoms, so the direct target effect and the weighted
//! identification formula can be compared to rounding error.

use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset, DatasetBuilder};
use crate::error::{Error, Result};
use crate::rng::{SeedTree, Stream};

/// Joint distribution of covariate atom and population, with first moments
/// of the outcome. All tables are indexed `[atom][s]` for `s = 0..=m`; the
/// target column of `treat_prob` and `control_mean` is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretePopulation {
    pub m: usize,
    /// Covariate value of each atom.
    pub support: Vec<f64>,
    /// `P(X = x_k, S = s)`.
    pub mass: Vec<Vec<f64>>,
    /// `P(A = 1 | x_k, s)`.
    pub treat_prob: Vec<Vec<f64>>,
    /// `E(Y^1 - Y^0 | x_k, s)`.
    pub cate: Vec<Vec<f64>>,
    /// `E(Y | x_k, s, A = 0)`; the treated mean is this plus `cate`.
    pub control_mean: Vec<Vec<f64>>,
}

impl DiscretePopulation {
    pub fn atoms(&self) -> usize {
        self.support.len()
    }

    /// `P(S = s)`.
    pub fn population_mass(&self, s: usize) -> f64 {
        self.mass.iter().map(|row| row[s]).sum()
    }

    /// `P(S = s | S in trials)`, the marginal trial share.
    pub fn trial_share(&self, s: usize) -> f64 {
        let total: f64 = (1..=self.m).map(|k| self.population_mass(k)).sum();
        self.population_mass(s) / total
    }

    pub fn arm_mean(&self, k: usize, s: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Treat => self.control_mean[k][s] + self.cate[k][s],
            Arm::Control => self.control_mean[k][s],
        }
    }

    pub fn arm_probability(&self, k: usize, s: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Treat => self.treat_prob[k][s],
            Arm::Control => 1.0 - self.treat_prob[k][s],
        }
    }

    /// Shape, total mass, positivity of treatment (every trial cell) and
    /// overlap (target mass implies mass in every trial).
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::AssumptionViolation(msg));
        if self.m == 0 {
            return Err(Error::InvalidStudyCount(0));
        }
        let k = self.atoms();
        if k == 0 {
            return fail("population has no atoms".into());
        }
        for (what, table) in [
            ("mass", &self.mass),
            ("treat_prob", &self.treat_prob),
            ("cate", &self.cate),
            ("control_mean", &self.control_mean),
        ] {
            if table.len() != k {
                return Err(Error::LengthMismatch { what, expected: k, found: table.len() });
            }
            if let Some(row) = table.iter().find(|r| r.len() != self.m + 1) {
                return Err(Error::LengthMismatch { what, expected: self.m + 1, found: row.len() });
            }
            if table.iter().flatten().any(|v| !v.is_finite()) {
                return fail(format!("{what} has non-finite entries"));
            }
        }
        if self.support.iter().any(|x| !x.is_finite()) {
            return fail("support has non-finite entries".into());
        }
        if self.mass.iter().flatten().any(|&p| p < 0.0) {
            return fail("negative mass".into());
        }
        let total: f64 = self.mass.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("masses sum to {total}, not 1"));
        }
        for s in 0..=self.m {
            if self.population_mass(s) <= 0.0 {
                return fail(format!("population {s} has no mass"));
            }
        }
        for (j, row) in self.mass.iter().enumerate() {
            if row[0] > 0.0 && row[1..].iter().any(|&p| p <= 0.0) {
                return fail(format!("atom {j} is in the target but missing from a trial (overlap)"));
            }
            for s in 1..=self.m {
                let e = self.treat_prob[j][s];
                if row[s] > 0.0 && !(e > 0.0 && e < 1.0) {
                    return fail(format!("treatment probability {e} at atom {j}, study {s} (positivity)"));
                }
            }
        }
        Ok(())
    }
}

/// Largest deviation over target atoms of the share-weighted trial CATE from
/// the target CATE.
pub fn b4_gap(pop: &DiscretePopulation) -> f64 {
    let shares: Vec<f64> = (1..=pop.m).map(|s| pop.trial_share(s)).collect();
    (0..pop.atoms())
        .filter(|&k| pop.mass[k][0] > 0.0)
        .map(|k| {
            let mixed: f64 = shares.iter().enumerate().map(|(j, w)| w * pop.cate[k][j + 1]).sum();
            (mixed - pop.cate[k][0]).abs()
        })
        .fold(0.0, f64::max)
}

/// Between-study heterogeneity condition: at every target atom, trial CATEs
/// averaged with the marginal trial shares `P(S = s | S in trials)` equal the
/// target CATE.
pub fn check_assumption_b4(pop: &DiscretePopulation, tol: f64) -> bool {
    b4_gap(pop) <= tol
}

/// `sum_x CATE(x, 0) P(x | S = 0)`.
pub fn true_tate_direct(pop: &DiscretePopulation) -> f64 {
    let p0 = pop.population_mass(0);
    (0..pop.atoms()).map(|k| pop.cate[k][0] * pop.mass[k][0] / p0).sum()
}

/// Weight `I(A = a) / P(A = a | x, s) * p(x, 0) / p(x, s)` of a unit at atom
/// `k` in study `s` whose arm is `a`.
fn weight(pop: &DiscretePopulation, k: usize, s: usize, arm: Arm) -> f64 {
    pop.mass[k][0] / (pop.arm_probability(k, s, arm) * pop.mass[k][s])
}

/// `(E[w(a, s) | S = s], E[w(a, s) Y | S = s])` by summation over atoms.
fn weighted_moments(pop: &DiscretePopulation, s: usize, arm: Arm) -> (f64, f64) {
    let ps = pop.population_mass(s);
    let (mut ew, mut ewy) = (0.0, 0.0);
    for k in 0..pop.atoms() {
        if pop.mass[k][s] <= 0.0 {
            continue;
        }
        let cell = pop.mass[k][s] / ps * pop.arm_probability(k, s, arm);
        let w = weight(pop, k, s, arm);
        ew += cell * w;
        ewy += cell * w * pop.arm_mean(k, s, arm);
    }
    (ew, ewy)
}

/// `E[w(a, s) | S = s]`, which should equal `P(S = 0) / P(S = s)`.
pub fn expected_weight(pop: &DiscretePopulation, s: usize, arm: Arm) -> f64 {
    weighted_moments(pop, s, arm).0
}

/// Study `s`'s standardized effect
/// `E[(w(1, s) / E w(1, s) - w(0, s) / E w(0, s)) Y | S = s]`.
pub fn study_effect(pop: &DiscretePopulation, s: usize) -> Result<f64> {
    pop.validate()?;
    if s == 0 || s > pop.m {
        return Err(Error::UnknownStudy { study: s, m: pop.m });
    }
    let (w1, wy1) = weighted_moments(pop, s, Arm::Treat);
    let (w0, wy0) = weighted_moments(pop, s, Arm::Control);
    Ok(wy1 / w1 - wy0 / w0)
}

/// `E_S(Delta_S | S in trials)` with the marginal trial shares.
pub fn tate_via_identification(pop: &DiscretePopulation) -> Result<f64> {
    let mut total = 0.0;
    for s in 1..=pop.m {
        total += pop.trial_share(s) * study_effect(pop, s)?;
    }
    Ok(total)
}

fn random_shell(rng: &mut Stream, m: usize, atoms: usize) -> DiscretePopulation {
    let mut mass: Vec<Vec<f64>> = (0..atoms).map(|_| (0..=m).map(|_| 0.05 + rng.uniform()).collect()).collect();
    let total: f64 = mass.iter().flatten().sum();
    mass.iter_mut().flatten().for_each(|p| *p /= total);
    let table = |rng: &mut Stream, f: &dyn Fn(&mut Stream) -> f64| -> Vec<Vec<f64>> {
        (0..atoms).map(|_| (0..=m).map(|_| f(rng)).collect()).collect()
    };
    DiscretePopulation {
        m,
        support: (0..atoms).map(|k| k as f64).collect(),
        mass,
        treat_prob: table(rng, &|r| r.uniform_range(0.2, 0.8)),
        cate: vec![vec![0.0; m + 1]; atoms],
        control_mean: table(rng, &|r| r.standard_normal()),
    }
}

/// Random population satisfying the heterogeneity condition by construction:
/// study deviations from the target CATE are re-centred to have zero
/// share-weighted mean at every atom.
pub fn random_b4_population(rng: &mut Stream, m: usize, atoms: usize) -> DiscretePopulation {
    let mut pop = random_shell(rng, m, atoms);
    let shares: Vec<f64> = (1..=m).map(|s| pop.trial_share(s)).collect();
    for row in pop.cate.iter_mut() {
        row[0] = rng.standard_normal();
        let dev: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
        let centre: f64 = dev.iter().zip(&shares).map(|(d, w)| d * w).sum();
        for (s, d) in dev.iter().enumerate() {
            row[s + 1] = row[0] + d - centre;
        }
    }
    pop
}

/// Random population violating the heterogeneity condition by at least
/// `min_gap` on a random non-empty set of atoms. Trial CATEs at those atoms
/// are shifted in a common direction.
pub fn random_b4_violating(rng: &mut Stream, m: usize, atoms: usize, min_gap: f64) -> DiscretePopulation {
    let mut pop = random_b4_population(rng, m, atoms);
    let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
    let forced = rng.index(atoms);
    for (k, row) in pop.cate.iter_mut().enumerate() {
        if k == forced || rng.bernoulli(0.5) {
            let gap = sign * rng.uniform_range(min_gap, 5.0 * min_gap);
            row[1..].iter_mut().for_each(|c| *c += gap);
        }
    }
    pop
}

/// Draws `n` i.i.d. units. Covariates are indicators of atoms `1..K`, so
/// main-effects propensity models are saturated. Trial outcomes are the arm
/// mean plus standard normal noise.
pub fn sample_population(pop: &DiscretePopulation, n: usize, rng: &mut Stream) -> Result<Dataset> {
    pop.validate()?;
    let k = pop.atoms();
    let cells: Vec<f64> = pop.mass.iter().flatten().copied().collect();
    let mut b = DatasetBuilder::with_capacity(pop.m, k - 1, n);
    let mut x = vec![0.0; k - 1];
    for row in 0..n {
        let cell = rng.categorical(&cells);
        let (atom, s) = (cell / (pop.m + 1), cell % (pop.m + 1));
        x.iter_mut().enumerate().for_each(|(j, v)| *v = if j + 1 == atom { 1.0 } else { 0.0 });
        if s == 0 {
            b.push(row, 0, None, None, &x)?;
        } else {
            let arm = Arm::from_indicator(rng.bernoulli(pop.treat_prob[atom][s]));
            let y = pop.arm_mean(atom, s, arm) + rng.standard_normal();
            b.push(row, s, Some(arm), Some(y), &x)?;
        }
    }
    b.finish()
}

/// Tolerance for the identity on populations satisfying the condition.
pub const THEOREM_TOL: f64 = 1e-10;
/// Discrepancy that counts as a detected violation.
pub const VIOLATION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSuite {
    pub seed: u64,
    pub satisfying: usize,
    /// Satisfying populations with `|via - direct| < THEOREM_TOL`.
    pub passed: usize,
    pub max_error: f64,
    pub violating: usize,
    /// Violating populations with a discrepancy above `VIOLATION_TOL`.
    pub detected: usize,
    pub min_discrepancy: f64,
}

impl TheoremSuite {
    pub fn all_passed(&self) -> bool {
        self.passed == self.satisfying
    }

    pub fn detection_rate(&self) -> f64 {
        if self.violating == 0 {
            1.0
        } else {
            self.detected as f64 / self.violating as f64
        }
    }
}

/// Checks the identity on `n` random populations satisfying the condition
/// and on `n` that violate it, with 1 to 5 trials and 1 to 6 atoms each.
pub fn run_theorem_suite(n: usize, seed: u64) -> Result<TheoremSuite> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one population".into()));
    }
    let tree = SeedTree::new(seed);
    let mut out = TheoremSuite {
        seed,
        satisfying: n,
        passed: 0,
        max_error: 0.0,
        violating: n,
        detected: 0,
        min_discrepancy: f64::INFINITY,
    };
    for i in 0..n as u64 {
        let mut rng = tree.derive("satisfying", i);
        let (m, atoms) = (1 + rng.index(5), 1 + rng.index(6));
        let pop = random_b4_population(&mut rng, m, atoms);
        let err = (tate_via_identification(&pop)? - true_tate_direct(&pop)).abs();
        out.max_error = out.max_error.max(err);
        out.passed += usize::from(err < THEOREM_TOL);

        let mut rng = tree.derive("violating", i);
        let (m, atoms) = (1 + rng.index(5), 1 + rng.index(6));
        let pop = random_b4_violating(&mut rng, m, atoms, 0.1);
        let gap = (tate_via_identification(&pop)? - true_tate_direct(&pop)).abs();
        out.min_discrepancy = out.min_discrepancy.min(gap);
        out.detected += usize::from(gap > VIOLATION_TOL);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn two_study(shares: [f64; 2]) -> DiscretePopulation {
        // one atom; target mass 0.5, trials split the rest
        let c = -1.0;
        let d = 0.4;
        DiscretePopulation {
            m: 2,
            support: vec![0.0],
            mass: vec![vec![0.5, 0.5 * shares[0], 0.5 * shares[1]]],
            treat_prob: vec![vec![0.5, 0.5, 0.3]],
            cate: vec![vec![c, c + d, c - d]],
            control_mean: vec![vec![0.0, 1.0, 2.0]],
        }
    }

    #[test]
    fn symmetric_deviations_satisfy_b4() {
        assert!(check_assumption_b4(&two_study([0.5, 0.5]), 1e-12));
        assert!(!check_assumption_b4(&two_study([0.7, 0.3]), 1e-6));
    }

    #[test]
    fn homogeneous_cate_satisfies_b4() {
        let mut pop = two_study([0.2, 0.8]);
        pop.cate = vec![vec![2.0; 3]];
        assert!(check_assumption_b4(&pop, 0.0));
        assert!((tate_via_identification(&pop).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn direct_tate_hand_mixture() {
        let pop = DiscretePopulation {
            m: 1,
            support: vec![0.0, 1.0],
            mass: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            treat_prob: vec![vec![0.5; 2], vec![0.5; 2]],
            cate: vec![vec![1.0, 1.0], vec![3.0, 3.0]],
            control_mean: vec![vec![0.0; 2], vec![0.0; 2]],
        };
        pop.validate().unwrap();
        // target atoms weigh 0.25 and 0.75
        assert!((true_tate_direct(&pop) - 2.5).abs() < 1e-15);
        assert!((tate_via_identification(&pop).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn linear_cate_matches_covariate_mean() {
        let mut rng = SeedTree::new(4).derive("pop", 0);
        let mut pop = random_b4_population(&mut rng, 3, 5);
        pop.support = vec![-1.0, -0.5, 0.0, 0.7, 2.0];
        for (k, row) in pop.cate.iter_mut().enumerate() {
            row.iter_mut().for_each(|c| *c = -1.0 - 0.5 * pop.support[k]);
        }
        let p0 = pop.population_mass(0);
        let ex: f64 = (0..5).map(|k| pop.support[k] * pop.mass[k][0] / p0).sum();
        assert!((true_tate_direct(&pop) - (-1.0 - 0.5 * ex)).abs() < 1e-12);
    }

    #[test]
    fn expected_weight_is_mass_ratio() {
        let mut rng = SeedTree::new(5).derive("pop", 0);
        for _ in 0..50 {
            let pop = random_b4_population(&mut rng, 4, 6);
            for s in 1..=4 {
                let ratio = pop.population_mass(0) / pop.population_mass(s);
                for arm in Arm::BOTH {
                    assert!((expected_weight(&pop, s, arm) - ratio).abs() < 1e-12 * ratio.max(1.0));
                }
            }
        }
    }

    #[test]
    fn theorem_holds_on_random_b4_populations() {
        let tree = SeedTree::new(6);
        for i in 0..200 {
            let mut rng = tree.derive("pop", i);
            let m = 1 + rng.index(4);
            let atoms = 1 + rng.index(6);
            let pop = random_b4_population(&mut rng, m, atoms);
            assert!(check_assumption_b4(&pop, 1e-12));
            let gap = (tate_via_identification(&pop).unwrap() - true_tate_direct(&pop)).abs();
            assert!(gap < 1e-10, "population {i}: gap {gap}");
        }
    }

    #[test]
    fn violations_break_the_identity() {
        let tree = SeedTree::new(7);
        for i in 0..50 {
            let mut rng = tree.derive("pop", i);
            let pop = random_b4_violating(&mut rng, 3, 4, 0.1);
            assert!(!check_assumption_b4(&pop, 0.05));
            assert!((tate_via_identification(&pop).unwrap() - true_tate_direct(&pop)).abs() > 1e-4);
        }
    }

    #[test]
    fn suite_counts_are_consistent() {
        let a = run_theorem_suite(40, 3).unwrap();
        assert_eq!(a, run_theorem_suite(40, 3).unwrap());
        assert!(a.all_passed() && a.max_error < THEOREM_TOL);
        assert!(a.detected <= a.violating && a.min_discrepancy > 0.0);
    }

    #[test]
    fn validation_catches_overlap_and_positivity() {
        let mut pop = two_study([0.5, 0.5]);
        pop.treat_prob[0][2] = 1.0;
        assert!(matches!(tate_via_identification(&pop), Err(Error::AssumptionViolation(_))));
        let mut pop = two_study([0.5, 0.5]);
        pop.mass[0][2] = 0.0;
        pop.mass[0][1] = 0.5;
        assert!(pop.validate().is_err());
        let mut pop = two_study([0.5, 0.5]);
        pop.mass[0][0] = 0.6;
        assert!(pop.validate().is_err());
    }

    #[test]
    fn sampling_matches_masses() {
        let mut rng = SeedTree::new(8).derive("pop", 0);
        let pop = random_b4_population(&mut rng, 2, 3);
        let n = 200_000;
        let ds = sample_population(&pop, n, &mut rng).unwrap();
        for s in 0..=2 {
            let p = pop.population_mass(s);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((ds.study_size(s) as f64 / n as f64 - p).abs() < 4.0 * se);
        }
    }
}
