use serde::{Deserialize, Serialize};

use super::{CamaError, CamaSpec};
use crate::ndgrad::Tensor;

/// Observed parents `a` and co-parents `c` of the generic variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariates {
    pub a: Tensor,
    pub c: Tensor,
}

impl Covariates {
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            a: self.a.select_rows(idx),
            c: self.c.select_rows(idx),
        }
    }
}

/// Unlabeled observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub x: Tensor,
    pub cov: Option<Covariates>,
}

impl Observations {
    pub fn new(x: Tensor) -> Self {
        Self { x, cov: None }
    }

    pub fn with_covariates(x: Tensor, a: Tensor, c: Tensor) -> Self {
        Self {
            x,
            cov: Some(Covariates { a, c }),
        }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            cov: self.cov.as_ref().map(|c| c.select_rows(idx)),
        }
    }

    pub fn validate(&self, spec: &CamaSpec) -> Result<(), CamaError> {
        check_observed(spec, &self.x, self.cov.as_ref())
    }
}

/// Labeled rows with a per-row flag telling clean data from manipulated data.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub clean: Vec<bool>,
    pub cov: Option<Covariates>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, y: Vec<usize>, clean: Vec<bool>) -> Self {
        Self { x, y, clean, cov: None }
    }

    pub fn all_clean(x: Tensor, y: Vec<usize>) -> Self {
        let n = y.len();
        Self::new(x, y, vec![true; n])
    }

    pub fn with_covariates(mut self, a: Tensor, c: Tensor) -> Self {
        self.cov = Some(Covariates { a, c });
        self
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn manipulated_count(&self) -> usize {
        self.clean.iter().filter(|c| !**c).count()
    }

    pub fn observations(&self) -> Observations {
        Observations {
            x: self.x.clone(),
            cov: self.cov.clone(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            clean: idx.iter().map(|&i| self.clean[i]).collect(),
            cov: self.cov.as_ref().map(|c| c.select_rows(idx)),
        }
    }

    /// Splits into (clean rows, manipulated rows).
    pub fn partition(&self) -> (Self, Self) {
        let (c, m): (Vec<usize>, Vec<usize>) = (0..self.rows()).partition(|&i| self.clean[i]);
        (self.select_rows(&c), self.select_rows(&m))
    }

    pub fn validate(&self, spec: &CamaSpec) -> Result<(), CamaError> {
        if self.clean.len() != self.y.len() {
            return Err(CamaError::BatchMismatch(format!(
                "{} labels but {} clean flags",
                self.y.len(),
                self.clean.len()
            )));
        }
        if self.y.is_empty() {
            return Ok(());
        }
        if self.x.rows() != self.y.len() {
            return Err(CamaError::BatchMismatch(format!(
                "{} rows of x but {} labels",
                self.x.rows(),
                self.y.len()
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&y| y >= spec.classes) {
            return Err(CamaError::BatchMismatch(format!("label {bad} out of range for {} classes", spec.classes)));
        }
        check_observed(spec, &self.x, self.cov.as_ref())
    }
}

fn check_observed(spec: &CamaSpec, x: &Tensor, cov: Option<&Covariates>) -> Result<(), CamaError> {
    if x.rank() != 2 || x.cols() != spec.dim_x {
        return Err(CamaError::BatchMismatch(format!("x has shape {:?}, expected [n, {}]", x.shape(), spec.dim_x)));
    }
    if spec.is_generic() {
        let cov = cov.ok_or(CamaError::MissingCovariates)?;
        let n = x.rows();
        if cov.a.shape() != [n, spec.dim_a()] || cov.c.shape() != [n, spec.dim_c()] {
            return Err(CamaError::BatchMismatch(format!(
                "covariates a {:?} and c {:?} for {n} rows",
                cov.a.shape(),
                cov.c.shape()
            )));
        }
    }
    Ok(())
}

/// Mixing weights and sample counts for the objectives and the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Weight of the clean-data intervention ELBO in the augmented loss.
    pub lambda: f64,
    /// Weight of the labeled term in the fine-tuning loss.
    pub alpha: f64,
    /// `z` samples per class at prediction time.
    pub k: usize,
    /// `m` samples at prediction time.
    pub u: usize,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: 0.5,
            k: 16,
            u: 1,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), CamaError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.lambda) || !unit(self.alpha) {
            return Err(CamaError::InvalidWeights(format!(
                "lambda {} and alpha {} must lie in [0, 1]",
                self.lambda, self.alpha
            )));
        }
        if self.k == 0 || self.u == 0 {
            return Err(CamaError::InvalidWeights("K and U must be at least 1".into()));
        }
        Ok(())
    }
}
