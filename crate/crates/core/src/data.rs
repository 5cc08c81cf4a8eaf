use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's covariates and binary sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Covariate vector including the leading intercept entry.
    pub covariates: Vec<f64>,
    /// Observation times in `[0, 1]`, ascending.
    pub times: Vec<f64>,
    pub responses: Vec<bool>,
}

impl Subject {
    pub fn new(id: impl Into<String>, covariates: Vec<f64>, times: Vec<f64>, responses: Vec<bool>) -> Self {
        Subject {
            id: id.into(),
            covariates,
            times,
            responses,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Binary longitudinal data with scalar covariates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedDataset {
    pub subjects: Vec<Subject>,
    /// Covariate names, intercept included as the first entry.
    pub covariate_names: Vec<String>,
}

impl ObservedDataset {
    pub fn new(subjects: Vec<Subject>, covariate_names: Vec<String>) -> Self {
        ObservedDataset {
            subjects,
            covariate_names,
        }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Number of covariates including the intercept.
    pub fn num_covariates(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.covariates.len())
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    /// `N × q` design matrix.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        let q = self.num_covariates();
        DMatrix::from_fn(self.len(), q, |i, l| self.subjects[i].covariates[l])
    }

    pub fn covariate_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.subjects[i].covariates)
    }

    /// Checks the structural invariants the estimator relies on.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let q = self.num_covariates();
        if q == 0 {
            return Err(Error::Dimension("subjects carry no covariates".into()));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.covariates.len() != q {
                return Err(Error::Dimension(format!(
                    "subject {i} has {} covariates, expected {q}",
                    s.covariates.len()
                )));
            }
            if s.times.len() != s.responses.len() {
                return Err(Error::Dimension(format!(
                    "subject {i} has {} times but {} responses",
                    s.times.len(),
                    s.responses.len()
                )));
            }
            if s.is_empty() {
                return Err(Error::InvalidState(format!("subject {i} has no observations")));
            }
            if let Some(&t) = s.times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::Domain { time: t });
            }
        }
        Ok(())
    }
}
