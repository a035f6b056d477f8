//! Nuisance models: one binomial logistic treatment model per study and a
//! single multinomial logistic membership model with the target population as
//! the baseline category.
//!
//! Both families are fit by Newton-Raphson with step-halving from zero
//! coefficients (or a caller-supplied start). A fit is accepted once the
//! largest coefficient change falls below `step_tolerance` and the score
//! max-norm is below `score_tolerance`.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Dataset};
use crate::design::{build_design, DesignMatrix, ModelSpec};
use crate::error::{Error, Result};

/// Probabilities entering any weight are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub step_tolerance: f64,
    pub score_tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            step_tolerance: 1e-8,
            score_tolerance: 1e-6,
            max_iterations: 100,
            max_halvings: 30,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLogit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_step: f64,
    pub score_norm: f64,
    pub log_likelihood: f64,
    /// Log-likelihood at the start and after every accepted step. Non-decreasing
    /// up to rounding: once the predicted gain is below `1e-12 * (1 + |ll|)` the
    /// full Newton step is taken without the ascent test.
    pub trace: Vec<f64>,
    /// Set when the Hessian needed the ridge fallback at least once.
    pub ridge_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedMultinomial {
    /// Row `s - 1` holds the coefficients of study `s` against the target.
    pub coefficients: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_step: f64,
    pub score_norm: f64,
    pub log_likelihood: f64,
    pub trace: Vec<f64>,
    pub ridge_used: bool,
}

impl FittedMultinomial {
    pub fn m(&self) -> usize {
        self.coefficients.len()
    }
}

pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^eta)` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Clamps a probability into the admissible range, reporting whether it moved.
pub fn clamp_probability(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Solves `info * step = score`, retrying once with a diagonal ridge.
fn newton_direction(info: DMatrix<f64>, score: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, bool)> {
    if let Some(chol) = info.clone().cholesky() {
        return Ok((chol.solve(score), false));
    }
    let k = info.nrows();
    let ridged = info + DMatrix::identity(k, k) * ridge;
    match ridged.cholesky() {
        Some(chol) => Ok((chol.solve(score), true)),
        None => Err(Error::SingularHessian),
    }
}

/// Shared Newton driver. `eval` returns the log-likelihood and score at a
/// parameter vector, `info` the information at the point most recently passed
/// to `eval`, and `loglik` only the likelihood.
struct Newton<'a> {
    opts: &'a FitOptions,
}

struct NewtonOutcome {
    params: Vec<f64>,
    iterations: usize,
    final_step: f64,
    score_norm: f64,
    log_likelihood: f64,
    trace: Vec<f64>,
    ridge_used: bool,
}

impl Newton<'_> {
    fn run<E, I, L>(&self, start: Vec<f64>, mut eval: E, mut info: I, mut loglik: L) -> Result<NewtonOutcome>
    where
        E: FnMut(&[f64]) -> (f64, DVector<f64>),
        I: FnMut(&[f64]) -> DMatrix<f64>,
        L: FnMut(&[f64]) -> f64,
    {
        let opts = self.opts;
        let mut params = start;
        let (mut ll, mut score) = eval(&params);
        if !ll.is_finite() {
            return Err(Error::Nonconvergence { iterations: 0, reason: "non-finite log-likelihood at start".into() });
        }
        let mut trace = vec![ll];
        let mut ridge_used = false;
        let mut final_step = f64::INFINITY;

        for iter in 1..=opts.max_iterations {
            let (dir, ridged) = newton_direction(info(&params), &score, opts.ridge)?;
            ridge_used |= ridged;

            // Below this predicted gain the likelihood difference is rounding
            // noise, so the full Newton step is taken without the ascent test.
            let predicted_gain = score.dot(&dir);
            let negligible = predicted_gain <= 1e-12 * (1.0 + ll.abs());
            let dir_norm = max_abs(dir.iter().copied());

            let mut t = 1.0;
            let mut halvings = 0;
            let candidate = loop {
                let cand: Vec<f64> = params.iter().zip(dir.iter()).map(|(b, d)| b + t * d).collect();
                let ll_c = loglik(&cand);
                if ll_c.is_finite() && (ll_c >= ll || (t == 1.0 && negligible)) {
                    break Some(cand);
                }
                halvings += 1;
                if halvings > opts.max_halvings {
                    break None;
                }
                t *= 0.5;
            };

            let Some(cand) = candidate else {
                let norm = max_abs(score.iter().copied());
                if dir_norm < opts.step_tolerance && norm < opts.score_tolerance {
                    return Ok(NewtonOutcome {
                        params,
                        iterations: iter - 1,
                        final_step: dir_norm,
                        score_norm: norm,
                        log_likelihood: ll,
                        trace,
                        ridge_used,
                    });
                }
                return Err(Error::Nonconvergence {
                    iterations: iter,
                    reason: "log-likelihood cannot be increased (separation or degenerate design)".into(),
                });
            };

            final_step = max_abs(cand.iter().zip(&params).map(|(a, b)| a - b));
            params = cand;
            (ll, score) = eval(&params);
            trace.push(ll);
            let norm = max_abs(score.iter().copied());
            // a heavily halved step says nothing about distance to the optimum
            if t == 1.0 && final_step < opts.step_tolerance && norm < opts.score_tolerance {
                return Ok(NewtonOutcome {
                    params,
                    iterations: iter,
                    final_step,
                    score_norm: norm,
                    log_likelihood: ll,
                    trace,
                    ridge_used,
                });
            }
        }
        Err(Error::Nonconvergence {
            iterations: opts.max_iterations,
            reason: format!("iteration cap reached (last step {final_step:.3e})"),
        })
    }
}

fn separation(iterations: usize) -> Error {
    Error::Nonconvergence {
        iterations,
        reason: "fitted probabilities numerically 0 or 1 (separation)".into(),
    }
}

pub fn fit_binomial_logit(design: &DesignMatrix, labels: &[bool]) -> Result<FittedLogit> {
    fit_binomial_logit_with(design, labels, &FitOptions::default(), None)
}

pub fn fit_binomial_logit_with(
    design: &DesignMatrix,
    labels: &[bool],
    opts: &FitOptions,
    start: Option<&[f64]>,
) -> Result<FittedLogit> {
    let n = design.rows();
    let q = design.cols();
    if labels.len() != n {
        return Err(Error::LengthMismatch { what: "labels", expected: n, found: labels.len() });
    }
    let ones = labels.iter().filter(|&&y| y).count();
    if ones == 0 || ones == n {
        return Err(Error::Nonconvergence {
            iterations: 0,
            reason: "labels take a single value (complete separation)".into(),
        });
    }
    let start = match start {
        Some(s) if s.len() == q => s.to_vec(),
        Some(s) => return Err(Error::LengthMismatch { what: "start values", expected: q, found: s.len() }),
        None => vec![0.0; q],
    };

    let loglik = |beta: &[f64]| -> f64 {
        design
            .iter_rows()
            .zip(labels)
            .map(|(v, &y)| {
                let eta = dot(v, beta);
                if y {
                    -softplus(-eta)
                } else {
                    -softplus(eta)
                }
            })
            .sum()
    };
    let eval = |beta: &[f64]| -> (f64, DVector<f64>) {
        let mut ll = 0.0;
        let mut score = DVector::zeros(q);
        for (v, &y) in design.iter_rows().zip(labels) {
            let eta = dot(v, beta);
            ll += if y { -softplus(-eta) } else { -softplus(eta) };
            let r = if y { 1.0 - expit(eta) } else { -expit(eta) };
            for j in 0..q {
                score[j] += r * v[j];
            }
        }
        (ll, score)
    };
    let info = |beta: &[f64]| -> DMatrix<f64> {
        let mut info = DMatrix::zeros(q, q);
        for v in design.iter_rows() {
            let p = expit(dot(v, beta));
            let w = p * (1.0 - p);
            for j in 0..q {
                let wv = w * v[j];
                for k in 0..=j {
                    info[(j, k)] += wv * v[k];
                }
            }
        }
        for j in 0..q {
            for k in 0..j {
                info[(k, j)] = info[(j, k)];
            }
        }
        info
    };

    let out = Newton { opts }.run(start, eval, info, loglik)?;
    let saturated = design.iter_rows().zip(labels).any(|(v, &y)| {
        let eta = dot(v, &out.params);
        let miss = if y { expit(-eta) } else { expit(eta) };
        miss < PROB_CLAMP
    });
    if saturated {
        return Err(separation(out.iterations));
    }
    Ok(FittedLogit {
        coefficients: out.params,
        converged: true,
        iterations: out.iterations,
        final_step: out.final_step,
        score_norm: out.score_norm,
        log_likelihood: out.log_likelihood,
        trace: out.trace,
        ridge_used: out.ridge_used,
    })
}

/// Distinct design rows with per-category counts. Units sharing a covariate
/// pattern contribute identical probability rows, so the multinomial
/// likelihood only needs each pattern once.
struct CovariatePatterns {
    rows: Vec<f64>,
    counts: Vec<f64>,
    totals: Vec<f64>,
}

impl CovariatePatterns {
    fn new(design: &DesignMatrix, categories: &[usize], m: usize) -> Self {
        let q = design.cols();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(design.rows());
        let mut out = CovariatePatterns { rows: Vec::new(), counts: Vec::new(), totals: Vec::new() };
        for (v, &c) in design.iter_rows().zip(categories) {
            let key: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            let next = out.totals.len();
            let g = *index.entry(key).or_insert(next);
            if g == next {
                out.rows.extend_from_slice(v);
                out.counts.extend(std::iter::repeat(0.0).take(m + 1));
                out.totals.push(0.0);
            }
            out.counts[g * (m + 1) + c] += 1.0;
            out.totals[g] += 1.0;
        }
        debug_assert_eq!(out.rows.len(), out.totals.len() * q);
        out
    }

    fn len(&self) -> usize {
        self.totals.len()
    }
}

pub fn fit_multinomial_logit(design: &DesignMatrix, categories: &[usize], m: usize) -> Result<FittedMultinomial> {
    fit_multinomial_logit_with(design, categories, m, &FitOptions::default(), None)
}

/// Baseline-category multinomial logit over categories `0..=m`.
pub fn fit_multinomial_logit_with(
    design: &DesignMatrix,
    categories: &[usize],
    m: usize,
    opts: &FitOptions,
    start: Option<&[Vec<f64>]>,
) -> Result<FittedMultinomial> {
    let n = design.rows();
    let q = design.cols();
    if categories.len() != n {
        return Err(Error::LengthMismatch { what: "categories", expected: n, found: categories.len() });
    }
    if m == 0 {
        return Err(Error::InvalidStudyCount(0));
    }
    let mut present = vec![false; m + 1];
    for &c in categories {
        if c > m {
            return Err(Error::InvalidParameter(format!("category {c} exceeds {m}")));
        }
        present[c] = true;
    }
    if let Some(k) = present.iter().position(|&p| !p) {
        return Err(Error::MissingCategory(k));
    }
    let k = m * q;
    let start = match start {
        Some(rows) => {
            if rows.len() != m || rows.iter().any(|r| r.len() != q) {
                return Err(Error::LengthMismatch { what: "start values", expected: k, found: rows.iter().map(Vec::len).sum() });
            }
            rows.concat()
        }
        None => vec![0.0; k],
    };

    let groups = CovariatePatterns::new(design, categories, m);
    let (g, width) = (groups.len(), m + 1);
    let rows = &groups.rows;
    let counts = &groups.counts;
    let totals = &groups.totals;

    // Fills `probs` (g x (m + 1)) and returns the log-likelihood.
    let probabilities = |theta: &[f64], probs: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for (((v, row), cnt), &total) in
            rows.chunks_exact(q).zip(probs.chunks_exact_mut(width)).zip(counts.chunks_exact(width)).zip(totals)
        {
            row[0] = 0.0;
            let mut max = 0.0f64;
            for (r, beta) in row[1..].iter_mut().zip(theta.chunks_exact(q)) {
                *r = dot(v, beta);
                max = max.max(*r);
            }
            let own = dot(cnt, row);
            let mut den = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                den += *r;
            }
            let inv = 1.0 / den;
            row.iter_mut().for_each(|r| *r *= inv);
            ll += own - total * (max + den.ln());
        }
        ll
    };

    // The line search usually accepts its first candidate, which is then
    // evaluated in full; keep its probabilities instead of recomputing them.
    let cache: RefCell<(Vec<f64>, f64, Vec<f64>)> = RefCell::new((Vec::new(), 0.0, vec![0.0; g * width]));
    // probabilities at the point last passed to `eval`, read by `info`
    let buf = RefCell::new(vec![0.0; g * width]);
    let loglik = |theta: &[f64]| -> f64 {
        let mut c = cache.borrow_mut();
        let (key, ll, probs) = &mut *c;
        key.clear();
        key.extend_from_slice(theta);
        *ll = probabilities(theta, probs);
        *ll
    };
    let eval = |theta: &[f64]| -> (f64, DVector<f64>) {
        let ll = {
            let mut c = cache.borrow_mut();
            let (key, ll, probs) = &mut *c;
            if key.as_slice() == theta {
                std::mem::swap(probs, &mut *buf.borrow_mut());
                key.clear();
                *ll
            } else {
                probabilities(theta, &mut buf.borrow_mut())
            }
        };
        let buf = buf.borrow();
        let mut score = vec![0.0; k];
        for (((v, p), cnt), &total) in
            rows.chunks_exact(q).zip(buf.chunks_exact(width)).zip(counts.chunks_exact(width)).zip(totals)
        {
            for ((&ps, &ns), sc) in p[1..].iter().zip(&cnt[1..]).zip(score.chunks_exact_mut(q)) {
                let r = ns - total * ps;
                sc.iter_mut().zip(v).for_each(|(sc, vj)| *sc += r * vj);
            }
        }
        (ll, DVector::from_vec(score))
    };
    // Z^T is k x g; pattern i's column sqrt(N_i) p_s v_i is stored contiguously.
    let mut zt = vec![0.0; k * g];
    let info = |_: &[f64]| -> DMatrix<f64> {
        let buf = buf.borrow();
        // block-diagonal part: sum over patterns of N p_s v v^T, lower triangles
        let mut blocks = vec![0.0; m * q * q];
        for (((v, p), &total), col) in
            rows.chunks_exact(q).zip(buf.chunks_exact(width)).zip(totals).zip(zt.chunks_exact_mut(k))
        {
            let root = total.sqrt();
            for ((&ps, zc), blk) in p[1..].iter().zip(col.chunks_exact_mut(q)).zip(blocks.chunks_exact_mut(q * q)) {
                let w = total * ps;
                for j in 0..q {
                    zc[j] = root * ps * v[j];
                    let wv = w * v[j];
                    for l in 0..=j {
                        blk[j * q + l] += wv * v[l];
                    }
                }
            }
        }
        let mut info = DMatrix::zeros(k, k);
        for (s, blk) in blocks.chunks_exact(q * q).enumerate() {
            for j in 0..q {
                for l in 0..=j {
                    info[(s * q + j, s * q + l)] = blk[j * q + l];
                    info[(s * q + l, s * q + j)] = blk[j * q + l];
                }
            }
        }
        // info -= Z^T Z, reading the Z^T buffer a second time with swapped strides
        // SAFETY: both operands cover exactly k * g elements of `zt`, and
        // `info` is a separate k x k column-major allocation.
        unsafe {
            matrixmultiply::dgemm(
                k,
                g,
                k,
                -1.0,
                zt.as_ptr(),
                1,
                k as isize,
                zt.as_ptr(),
                k as isize,
                1,
                1.0,
                info.as_mut_ptr(),
                1,
                k as isize,
            );
        }
        info
    };

    let out = Newton { opts }.run(start, eval, info, loglik)?;
    let mut probs = vec![0.0; g * width];
    probabilities(&out.params, &mut probs);
    let saturated = probs
        .chunks_exact(width)
        .zip(counts.chunks_exact(width))
        .any(|(p, cnt)| p.iter().zip(cnt).any(|(&p, &c)| c > 0.0 && 1.0 - p < PROB_CLAMP));
    if saturated {
        return Err(separation(out.iterations));
    }
    Ok(FittedMultinomial {
        coefficients: out.params.chunks(q).map(<[f64]>::to_vec).collect(),
        converged: true,
        iterations: out.iterations,
        final_step: out.final_step,
        score_norm: out.score_norm,
        log_likelihood: out.log_likelihood,
        trace: out.trace,
        ridge_used: out.ridge_used,
    })
}

/// Clamped probability of treatment for a design row.
pub fn predict_treatment(fit: &FittedLogit, v: &[f64]) -> f64 {
    clamp_probability(expit(dot(&fit.coefficients, v))).0
}

/// Membership probabilities over `0..=m`; entry 0 is the target population.
pub fn predict_membership(fit: &FittedMultinomial, v: &[f64]) -> Vec<f64> {
    let m = fit.m();
    let mut out = vec![0.0; m + 1];
    membership_into(fit, v, &mut out);
    out
}

fn membership_into(fit: &FittedMultinomial, v: &[f64], out: &mut [f64]) {
    out[0] = 0.0;
    let mut max = 0.0f64;
    for (s, beta) in fit.coefficients.iter().enumerate() {
        out[s + 1] = dot(v, beta);
        max = max.max(out[s + 1]);
    }
    let mut den = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        den += *o;
    }
    for o in out.iter_mut() {
        *o /= den;
    }
}

/// `P(S=0 | x) / P(S=s | x)`, which is `exp(-v . beta_s)` under the baseline model.
pub fn odds_target_vs_study(fit: &FittedMultinomial, v: &[f64], s: usize) -> Result<f64> {
    let m = fit.m();
    if s == 0 || s > m {
        return Err(Error::UnknownStudy { study: s, m });
    }
    Ok((-dot(v, &fit.coefficients[s - 1])).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySpecs {
    pub treatment: ModelSpec,
    pub membership: ModelSpec,
}

impl PropensitySpecs {
    pub fn main_effects(p: usize) -> Self {
        Self { treatment: ModelSpec::main_effects(p), membership: ModelSpec::main_effects(p) }
    }
}

/// Coefficients used to start a refit, e.g. the full-sample fit mapped onto a
/// bootstrap resample.
#[derive(Debug, Clone, PartialEq)]
pub struct StartValues {
    pub treatment: Vec<Vec<f64>>,
    pub membership: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensities {
    /// Entry `s - 1` is the treatment model of study `s`.
    pub treatment: Vec<FittedLogit>,
    pub membership: FittedMultinomial,
    pub specs: PropensitySpecs,
    n: usize,
    m: usize,
    p: usize,
}

impl FittedPropensities {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn start_values(&self) -> StartValues {
        StartValues {
            treatment: self.treatment.iter().map(|f| f.coefficients.clone()).collect(),
            membership: self.membership.coefficients.clone(),
        }
    }

    pub fn check_matches(&self, ds: &Dataset) -> Result<()> {
        if ds.n() != self.n || ds.m() != self.m || ds.p() != self.p {
            return Err(Error::PropensityMismatch(format!(
                "models fit on (n={}, m={}, p={}), dataset has (n={}, m={}, p={})",
                self.n,
                self.m,
                self.p,
                ds.n(),
                ds.m(),
                ds.p()
            )));
        }
        Ok(())
    }

    /// Evaluates both models at every unit of `ds`.
    pub fn score(&self, ds: &Dataset) -> Result<UnitScores> {
        self.check_matches(ds)?;
        let m = self.m;
        let n = ds.n();
        let mut treat_prob = vec![f64::NAN; n];
        let mut membership = vec![0.0; n * (m + 1)];
        let mut trow = vec![0.0; self.specs.treatment.width()];
        let mut mrow = vec![0.0; self.specs.membership.width()];
        for i in 0..n {
            let x = ds.covariates_of(i);
            let s = ds.study_of(i);
            if s > 0 {
                self.specs.treatment.eval_into(x, &mut trow);
                treat_prob[i] = expit(dot(&self.treatment[s - 1].coefficients, &trow));
            }
            self.specs.membership.eval_into(x, &mut mrow);
            membership_into(&self.membership, &mrow, &mut membership[i * (m + 1)..(i + 1) * (m + 1)]);
        }
        Ok(UnitScores { m, treat_prob, membership })
    }
}

/// Fits all nuisance models once for a dataset.
pub fn fit_propensities(ds: &Dataset, specs: &PropensitySpecs) -> Result<FittedPropensities> {
    fit_propensities_with(ds, specs, &FitOptions::default(), None)
}

pub fn fit_propensities_with(
    ds: &Dataset,
    specs: &PropensitySpecs,
    opts: &FitOptions,
    start: Option<&StartValues>,
) -> Result<FittedPropensities> {
    let p = ds.p();
    let m = ds.m();
    let mut treatment = Vec::with_capacity(m);
    for s in 1..=m {
        let idx = ds.indices_of(s);
        let design = build_design(idx.iter().map(|&i| ds.covariates_of(i)), p, &specs.treatment)?;
        let labels: Vec<bool> = idx.iter().map(|&i| ds.arm_of(i) == Some(Arm::Treat)).collect();
        let st = start.and_then(|sv| sv.treatment.get(s - 1)).map(Vec::as_slice);
        let fit = fit_binomial_logit_with(&design, &labels, opts, st)
            .map_err(|e| Error::StudyFailed { study: s, source: Box::new(e) })?;
        treatment.push(fit);
    }
    let design = build_design(ds.units().map(|u| u.covariates), p, &specs.membership)?;
    let membership = fit_multinomial_logit_with(
        &design,
        ds.studies(),
        m,
        opts,
        start.map(|sv| sv.membership.as_slice()),
    )?;
    Ok(FittedPropensities { treatment, membership, specs: specs.clone(), n: ds.n(), m, p })
}

/// Fitted probabilities at every unit of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitScores {
    m: usize,
    /// Unclamped `P(A = treat | x_i, S_i)`; NaN for target units.
    pub treat_prob: Vec<f64>,
    membership: Vec<f64>,
}

impl UnitScores {
    /// `P(S = s | x_i)` for `s` in `0..=m`.
    pub fn membership(&self, i: usize) -> &[f64] {
        &self.membership[i * (self.m + 1)..(i + 1) * (self.m + 1)]
    }

    /// Clamped probability of the arm actually received, plus a clamp flag.
    pub fn arm_probability(&self, i: usize, arm: Arm) -> (f64, bool) {
        let (e, hit) = clamp_probability(self.treat_prob[i]);
        match arm {
            Arm::Treat => (e, hit),
            Arm::Control => (1.0 - e, hit),
        }
    }

    /// Clamped `P(S=0|x) / P(S!=0|x)` (inverse odds of trial participation).
    pub fn target_vs_any_study(&self, i: usize) -> (f64, bool) {
        let row = self.membership(i);
        let (p0, a) = clamp_probability(row[0]);
        let (rest, b) = clamp_probability(row[1..].iter().sum());
        (p0 / rest, a || b)
    }

    /// Clamped `P(S=0|x) / P(S=s|x)`.
    pub fn target_vs_study(&self, i: usize, s: usize) -> (f64, bool) {
        let row = self.membership(i);
        let (p0, a) = clamp_probability(row[0]);
        let (ps, b) = clamp_probability(row[s]);
        (p0 / ps, a || b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn saturated_binary() -> (DesignMatrix, Vec<bool>) {
        // x in {0, 1}; 30/100 treated at x=0 and 60/100 at x=1
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (x, ones) in [(0.0, 30), (1.0, 60)] {
            for k in 0..100 {
                data.extend_from_slice(&[1.0, x]);
                labels.push(k < ones);
            }
        }
        (DesignMatrix::from_rows(200, 2, data).unwrap(), labels)
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn intercept_only_balanced_labels() {
        let design = DesignMatrix::from_rows(4, 1, vec![1.0; 4]).unwrap();
        let fit = fit_binomial_logit(&design, &[true, false, true, false]).unwrap();
        assert_eq!(fit.coefficients, vec![0.0]);
        assert!(fit.converged);
    }

    #[test]
    fn saturated_model_matches_empirical_logits() {
        let (design, labels) = saturated_binary();
        let fit = fit_binomial_logit(&design, &labels).unwrap();
        let b0 = logit(0.3);
        let b1 = logit(0.6) - logit(0.3);
        assert!((b0 - -0.8473).abs() < 1e-4 && (b1 - 1.2528).abs() < 1e-4);
        assert!((fit.coefficients[0] - b0).abs() < 1e-8);
        assert!((fit.coefficients[1] - b1).abs() < 1e-8);
        assert!(fit.score_norm < 1e-6);
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs())));
    }

    #[test]
    fn all_ones_is_separation() {
        let design = DesignMatrix::from_rows(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(fit_binomial_logit(&design, &[true; 3]), Err(Error::Nonconvergence { .. })));
    }

    #[test]
    fn perfectly_separated_covariate_fails() {
        let data = vec![1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0];
        let design = DesignMatrix::from_rows(4, 2, data).unwrap();
        let err = fit_binomial_logit(&design, &[false, false, true, true]).unwrap_err();
        assert!(matches!(err, Error::Nonconvergence { .. } | Error::SingularHessian), "{err:?}");
    }

    #[test]
    fn multinomial_reduces_to_binomial() {
        let (design, labels) = saturated_binary();
        let cats: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
        let bin = fit_binomial_logit(&design, &labels).unwrap();
        let mult = fit_multinomial_logit(&design, &cats, 1).unwrap();
        for (a, b) in bin.coefficients.iter().zip(&mult.coefficients[0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(mult.score_norm < 1e-6);
    }

    #[test]
    fn balanced_categories_give_zero_intercepts() {
        let design = DesignMatrix::from_rows(8, 1, vec![1.0; 8]).unwrap();
        let cats = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let fit = fit_multinomial_logit(&design, &cats, 3).unwrap();
        for row in &fit.coefficients {
            assert!(row[0].abs() < 1e-12);
        }
    }

    #[test]
    fn multinomial_empirical_log_odds() {
        // intercept-only: beta_s = log(n_s / n_0)
        let counts = [50usize, 20, 30];
        let cats: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat(c).take(k)).collect();
        let design = DesignMatrix::from_rows(cats.len(), 1, vec![1.0; cats.len()]).unwrap();
        let fit = fit_multinomial_logit(&design, &cats, 2).unwrap();
        assert!((fit.coefficients[0][0] - (20.0f64 / 50.0).ln()).abs() < 1e-9);
        assert!((fit.coefficients[1][0] - (30.0f64 / 50.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn missing_category_reported() {
        let design = DesignMatrix::from_rows(3, 1, vec![1.0; 3]).unwrap();
        assert_eq!(fit_multinomial_logit(&design, &[0, 2, 2], 2).unwrap_err(), Error::MissingCategory(1));
    }

    #[test]
    fn treatment_predictions() {
        let mut fit = fit_binomial_logit(
            &DesignMatrix::from_rows(2, 1, vec![1.0; 2]).unwrap(),
            &[true, false],
        )
        .unwrap();
        assert_eq!(predict_treatment(&fit, &[1.0]), 0.5);
        fit.coefficients = vec![-1.347, -0.4];
        let p = predict_treatment(&fit, &[1.0, 0.0]);
        assert!((p - 1.0 / (1.0 + 1.347f64.exp())).abs() < 1e-15);
        assert!((p - 0.2063).abs() < 1e-4);
        fit.coefficients = vec![800.0];
        let p = predict_treatment(&fit, &[1.0]);
        assert!(p < 1.0 && p.is_finite());
    }

    fn multinomial(coefs: Vec<Vec<f64>>) -> FittedMultinomial {
        FittedMultinomial {
            coefficients: coefs,
            converged: true,
            iterations: 0,
            final_step: 0.0,
            score_norm: 0.0,
            log_likelihood: 0.0,
            trace: vec![],
            ridge_used: false,
        }
    }

    #[test]
    fn membership_predictions() {
        let uniform = predict_membership(&multinomial(vec![vec![0.0]; 3]), &[1.0]);
        assert_eq!(uniform, vec![0.25; 4]);
        let fit = multinomial(vec![vec![-1.347], vec![-1.302], vec![-1.299]]);
        let p = predict_membership(&fit, &[1.0]);
        let expected = 1.0 / (1.0 + (-1.347f64).exp() + (-1.302f64).exp() + (-1.299f64).exp());
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.554).abs() < 1e-3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn target_odds() {
        let fit = multinomial(vec![vec![0.0, 0.0], vec![2f64.ln(), 0.0]]);
        assert_eq!(odds_target_vs_study(&fit, &[1.0, 3.0], 1).unwrap(), 1.0);
        assert!((odds_target_vs_study(&fit, &[1.0, 3.0], 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(odds_target_vs_study(&fit, &[1.0, 3.0], 3).is_err());
        assert!(odds_target_vs_study(&fit, &[1.0, 3.0], 0).is_err());
    }

    #[test]
    fn clamp_flags() {
        assert_eq!(clamp_probability(0.3), (0.3, false));
        assert_eq!(clamp_probability(0.0), (PROB_CLAMP, true));
        assert_eq!(clamp_probability(1.0), (1.0 - PROB_CLAMP, true));
    }
}
