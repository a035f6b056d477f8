//! Combined trial and target-population data.
//!
//! Study id `0` is the target-population sample; ids `1..=m` are the trials.
//! Target units carry covariates only. Trial units carry a treatment arm and an
//! observed outcome as well.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treat,
    Control,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treat, Arm::Control];

    pub fn from_indicator(treated: bool) -> Self {
        if treated {
            Arm::Treat
        } else {
            Arm::Control
        }
    }

    pub fn is_treat(self) -> bool {
        self == Arm::Treat
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Treat => f.write_str("treated"),
            Arm::Control => f.write_str("control"),
        }
    }
}

/// One unit as supplied by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub study: usize,
    pub arm: Option<Arm>,
    pub outcome: Option<f64>,
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn target(covariates: Vec<f64>) -> Self {
        Self { study: 0, arm: None, outcome: None, covariates }
    }

    pub fn trial(study: usize, arm: Arm, outcome: f64, covariates: Vec<f64>) -> Self {
        Self { study, arm: Some(arm), outcome: Some(outcome), covariates }
    }
}

/// Borrowed view of a validated unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit<'a> {
    pub study: usize,
    pub arm: Option<Arm>,
    pub outcome: Option<f64>,
    pub covariates: &'a [f64],
}

/// Validated, immutable dataset stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    m: usize,
    p: usize,
    study: Vec<usize>,
    arm: Vec<Option<Arm>>,
    outcome: Vec<Option<f64>>,
    covariates: Vec<f64>,
    study_sizes: Vec<usize>,
    arm_counts: Vec<(usize, usize)>,
}

/// Validates raw observations for `m` trials plus a target sample.
///
/// The covariate dimension is taken from the first observation.
pub fn validate_dataset<I>(raw: I, m: usize) -> Result<Dataset>
where
    I: IntoIterator<Item = Observation>,
{
    if m == 0 {
        return Err(Error::InvalidStudyCount(m));
    }
    let mut builder: Option<DatasetBuilder> = None;
    for (row, obs) in raw.into_iter().enumerate() {
        let b = builder.get_or_insert_with(|| DatasetBuilder::new(m, obs.covariates.len()));
        b.push(row, obs.study, obs.arm, obs.outcome, &obs.covariates)?;
    }
    builder.ok_or(Error::EmptyInput)?.finish()
}

/// Count of (treated, control) units in trial `s`.
pub fn arm_sizes(ds: &Dataset, s: usize) -> Result<(usize, usize)> {
    ds.check_study(s)?;
    Ok(ds.arm_counts[s])
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.study.len()
    }

    /// `n_s` for study `s` (0 is the target sample).
    pub fn study_size(&self, s: usize) -> usize {
        self.study_sizes.get(s).copied().unwrap_or(0)
    }

    pub fn study_sizes(&self) -> &[usize] {
        &self.study_sizes
    }

    pub fn study_of(&self, i: usize) -> usize {
        self.study[i]
    }

    pub fn arm_of(&self, i: usize) -> Option<Arm> {
        self.arm[i]
    }

    pub fn outcome_of(&self, i: usize) -> Option<f64> {
        self.outcome[i]
    }

    pub fn covariates_of(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.p..(i + 1) * self.p]
    }

    pub fn studies(&self) -> &[usize] {
        &self.study
    }

    pub fn unit(&self, i: usize) -> Unit<'_> {
        Unit {
            study: self.study[i],
            arm: self.arm[i],
            outcome: self.outcome[i],
            covariates: self.covariates_of(i),
        }
    }

    pub fn units(&self) -> impl ExactSizeIterator<Item = Unit<'_>> + '_ {
        (0..self.n()).map(move |i| self.unit(i))
    }

    /// Indices of the units belonging to study `s`, in storage order.
    pub fn indices_of(&self, s: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.study[i] == s).collect()
    }

    pub fn observations(&self) -> Vec<Observation> {
        self.units()
            .map(|u| Observation {
                study: u.study,
                arm: u.arm,
                outcome: u.outcome,
                covariates: u.covariates.to_vec(),
            })
            .collect()
    }

    pub(crate) fn check_study(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.m {
            Err(Error::UnknownStudy { study: s, m: self.m })
        } else {
            Ok(())
        }
    }
}

/// Incremental constructor shared by validation, resampling and simulation.
#[derive(Debug)]
pub(crate) struct DatasetBuilder {
    ds: Dataset,
}

impl DatasetBuilder {
    pub(crate) fn new(m: usize, p: usize) -> Self {
        Self::with_capacity(m, p, 0)
    }

    pub(crate) fn with_capacity(m: usize, p: usize, n: usize) -> Self {
        Self {
            ds: Dataset {
                m,
                p,
                study: Vec::with_capacity(n),
                arm: Vec::with_capacity(n),
                outcome: Vec::with_capacity(n),
                covariates: Vec::with_capacity(n * p),
                study_sizes: vec![0; m + 1],
                arm_counts: vec![(0, 0); m + 1],
            },
        }
    }

    pub(crate) fn push(
        &mut self,
        row: usize,
        study: usize,
        arm: Option<Arm>,
        outcome: Option<f64>,
        covariates: &[f64],
    ) -> Result<()> {
        let ds = &mut self.ds;
        if study > ds.m {
            return Err(Error::StudyOutOfRange { row, study, m: ds.m });
        }
        if covariates.len() != ds.p {
            return Err(Error::DimensionMismatch { row, expected: ds.p, found: covariates.len() });
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row, field: "covariates" });
        }
        if study == 0 {
            if arm.is_some() || outcome.is_some() {
                return Err(Error::TargetHasOutcome { row });
            }
        } else {
            match (arm, outcome) {
                (Some(a), Some(y)) => {
                    if !y.is_finite() {
                        return Err(Error::NonFinite { row, field: "outcome" });
                    }
                    let counts = &mut ds.arm_counts[study];
                    match a {
                        Arm::Treat => counts.0 += 1,
                        Arm::Control => counts.1 += 1,
                    }
                }
                _ => return Err(Error::MissingArm { row }),
            }
        }
        ds.study_sizes[study] += 1;
        ds.study.push(study);
        ds.arm.push(arm);
        ds.outcome.push(outcome);
        ds.covariates.extend_from_slice(covariates);
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<Dataset> {
        let ds = self.ds;
        if ds.study.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ds.study_sizes[0] == 0 {
            return Err(Error::EmptyTarget);
        }
        for s in 1..=ds.m {
            let (t, c) = ds.arm_counts[s];
            if t == 0 {
                return Err(Error::EmptyArm { study: s, arm: Arm::Treat });
            }
            if c == 0 {
                return Err(Error::EmptyArm { study: s, arm: Arm::Control });
            }
        }
        Ok(ds)
    }
}
