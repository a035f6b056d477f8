//! Design matrices for the propensity models.
//!
//! A [`ModelSpec`] is an ordered list of terms with the textual form
//! `1 + x0 + x1 + x0^2 + x0:x1`. Covariates are referenced by zero-based
//! position (`x0`) or, when names are supplied, by name (`age^2`).

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Main(usize),
    Power(usize, u32),
    Interaction(usize, usize),
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Term::Intercept => 1.0,
            Term::Main(i) => x[i],
            Term::Power(i, d) => x[i].powi(d as i32),
            Term::Interaction(i, j) => x[i] * x[j],
        }
    }

    fn max_index(&self) -> Option<usize> {
        match *self {
            Term::Intercept => None,
            Term::Main(i) | Term::Power(i, _) => Some(i),
            Term::Interaction(i, j) => Some(i.max(j)),
        }
    }

    fn canonical(&self) -> Term {
        match *self {
            Term::Interaction(i, j) if j < i => Term::Interaction(j, i),
            t => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModelSpec {
    terms: Vec<Term>,
}

impl ModelSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.first() != Some(&Term::Intercept) {
            return Err(Error::InvalidModelSpec("the intercept `1` must be the first term".into()));
        }
        let mut seen = HashSet::new();
        for t in &terms {
            match *t {
                Term::Power(_, d) if d < 2 => {
                    return Err(Error::InvalidModelSpec(format!("power degree must be >= 2, got {d}")))
                }
                Term::Interaction(i, j) if i == j => {
                    return Err(Error::InvalidModelSpec(format!(
                        "self-interaction x{i}:x{i}; write x{i}^2"
                    )))
                }
                _ => {}
            }
            if !seen.insert(t.canonical()) {
                return Err(Error::InvalidModelSpec(format!("duplicate term {}", TermDisplay(t))));
            }
        }
        Ok(Self { terms })
    }

    pub fn intercept_only() -> Self {
        Self { terms: vec![Term::Intercept] }
    }

    /// `1 + x0 + ... + x{p-1}`.
    pub fn main_effects(p: usize) -> Self {
        let mut terms = vec![Term::Intercept];
        terms.extend((0..p).map(Term::Main));
        Self { terms }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Number of design columns.
    pub fn width(&self) -> usize {
        self.terms.len()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.terms.iter().filter_map(Term::max_index).max()
    }

    pub fn check_dimension(&self, p: usize) -> Result<()> {
        match self.max_index() {
            Some(i) if i >= p => Err(Error::IndexOutOfRange { index: i, p }),
            _ => Ok(()),
        }
    }

    /// Parses the textual form, resolving covariate names against `names`
    /// before falling back to positional `xK` references.
    pub fn parse_with_names(text: &str, names: &[String]) -> Result<Self> {
        let resolve = |tok: &str| -> Result<usize> {
            let tok = tok.trim();
            if let Some(i) = names.iter().position(|n| n == tok) {
                return Ok(i);
            }
            tok.strip_prefix('x')
                .and_then(|d| d.parse::<usize>().ok())
                .ok_or_else(|| Error::InvalidModelSpec(format!("unknown covariate `{tok}`")))
        };
        let mut terms = Vec::new();
        for raw in text.split('+') {
            let raw = raw.trim();
            if raw.is_empty() {
                return Err(Error::InvalidModelSpec(format!("empty term in `{text}`")));
            }
            let term = if raw == "1" {
                Term::Intercept
            } else if let Some((a, b)) = raw.split_once(':') {
                Term::Interaction(resolve(a)?, resolve(b)?)
            } else if let Some((a, d)) = raw.split_once('^') {
                let degree = d.trim().parse::<u32>().map_err(|_| {
                    Error::InvalidModelSpec(format!("bad exponent in `{raw}`"))
                })?;
                Term::Power(resolve(a)?, degree)
            } else {
                Term::Main(resolve(raw)?)
            };
            terms.push(term);
        }
        Self::new(terms)
    }

    /// Renders the formula using covariate names where available.
    pub fn to_string_with_names(&self, names: &[String]) -> String {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("x{i}"));
        self.terms
            .iter()
            .map(|t| match *t {
                Term::Intercept => "1".to_string(),
                Term::Main(i) => name(i),
                Term::Power(i, d) => format!("{}^{d}", name(i)),
                Term::Interaction(i, j) => format!("{}:{}", name(i), name(j)),
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }

    /// Evaluates the terms for one covariate vector into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.eval(x);
        }
    }
}

struct TermDisplay<'a>(&'a Term);

impl fmt::Display for TermDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = ModelSpec { terms: vec![*self.0] }.to_string_with_names(&[]);
        f.write_str(&s)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_string_with_names(&[]))
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_names(s, &[])
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelSpec> for String {
    fn from(spec: ModelSpec) -> String {
        spec.to_string()
    }
}

/// Row-major `rows x cols` design matrix; column 0 is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl DesignMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch { what: "design data", expected: rows * cols, found: data.len() });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Evaluates `spec` on each covariate vector, preserving input order.
pub fn build_design<'a, I>(covariates: I, p: usize, spec: &ModelSpec) -> Result<DesignMatrix>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    spec.check_dimension(p)?;
    let cols = spec.width();
    let mut data = Vec::new();
    let mut rows = 0;
    for x in covariates {
        if x.len() != p {
            return Err(Error::DimensionMismatch { row: rows, expected: p, found: x.len() });
        }
        let start = data.len();
        data.resize(start + cols, 0.0);
        spec.eval_into(x, &mut data[start..]);
        rows += 1;
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: 0, field: "design matrix" });
    }
    Ok(DesignMatrix { data, rows, cols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(spec: &str, x: &[f64]) -> Vec<f64> {
        let spec: ModelSpec = spec.parse().unwrap();
        build_design([x], x.len(), &spec).unwrap().row(0).to_vec()
    }

    #[test]
    fn evaluates_terms_in_order() {
        assert_eq!(row("1 + x0", &[2.0]), vec![1.0, 2.0]);
        assert_eq!(row("1 + x0 + x0^2", &[3.0]), vec![1.0, 3.0, 9.0]);
        assert_eq!(row("1 + x0 + x1 + x0:x1", &[2.0, 5.0]), vec![1.0, 2.0, 5.0, 10.0]);
    }

    #[test]
    fn out_of_range_index() {
        let spec: ModelSpec = "1 + x3".parse().unwrap();
        let x = [0.0, 1.0];
        assert_eq!(
            build_design([&x[..]], 2, &spec).unwrap_err(),
            Error::IndexOutOfRange { index: 3, p: 2 }
        );
    }

    #[test]
    fn spec_validation() {
        assert!("x0 + 1".parse::<ModelSpec>().is_err());
        assert!("1 + x0 + x0".parse::<ModelSpec>().is_err());
        assert!("1 + x0:x1 + x1:x0".parse::<ModelSpec>().is_err());
        assert!("1 + x0^1".parse::<ModelSpec>().is_err());
        assert!("1 + 1".parse::<ModelSpec>().is_err());
        assert!("1 + age".parse::<ModelSpec>().is_err());
        assert!("1 +".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn named_covariates() {
        let names = vec!["age".to_string(), "sex".to_string()];
        let spec = ModelSpec::parse_with_names("1 + age + sex + age^2 + age:sex", &names).unwrap();
        assert_eq!(
            spec.terms(),
            &[Term::Intercept, Term::Main(0), Term::Main(1), Term::Power(0, 2), Term::Interaction(0, 1)]
        );
        assert_eq!(spec.to_string(), "1 + x0 + x1 + x0^2 + x0:x1");
        assert_eq!(spec.to_string_with_names(&names), "1 + age + sex + age^2 + age:sex");
    }

    proptest! {
        #[test]
        fn text_form_round_trips(p in 1usize..4, powers in proptest::collection::vec(2u32..4, 0..2)) {
            let mut terms = vec![Term::Intercept];
            terms.extend((0..p).map(Term::Main));
            for (i, d) in powers.iter().enumerate() {
                if i < p { terms.push(Term::Power(i, *d)); }
            }
            if p > 1 { terms.push(Term::Interaction(0, p - 1)); }
            let spec = ModelSpec::new(terms).unwrap();
            prop_assert_eq!(spec.to_string().parse::<ModelSpec>().unwrap(), spec);
        }

        #[test]
        fn main_effects_is_one_bar_x(xs in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..20)) {
            let spec = ModelSpec::main_effects(3);
            let d = build_design(xs.iter().map(|v| v.as_slice()), 3, &spec).unwrap();
            for (r, x) in d.iter_rows().zip(&xs) {
                prop_assert_eq!(r[0], 1.0);
                prop_assert_eq!(&r[1..], x.as_slice());
            }
        }

        #[test]
        fn row_permutation_commutes(xs in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 2), 2..15), k in 0usize..100) {
            let spec: ModelSpec = "1 + x0 + x1^2 + x0:x1".parse().unwrap();
            let d = build_design(xs.iter().map(|v| v.as_slice()), 2, &spec).unwrap();
            let shift = k % xs.len();
            let rotated: Vec<&[f64]> = xs.iter().cycle().skip(shift).take(xs.len()).map(|v| v.as_slice()).collect();
            let dr = build_design(rotated, 2, &spec).unwrap();
            for i in 0..xs.len() {
                prop_assert_eq!(dr.row(i), d.row((i + shift) % xs.len()));
            }
        }
    }
}
