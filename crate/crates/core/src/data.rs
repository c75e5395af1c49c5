use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations for a prediction task feeding a downstream regression.
///
/// `features` are the model inputs (`k`), `covariates` hold the regression
/// columns (treatment, controls, instruments) addressed by index, and
/// `outcome` carries ground truth wherever `labeled` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub outcome: DVector<f64>,
    pub labeled: Vec<bool>,
    /// Resampling provenance: rows sharing a group are kept in the same fold.
    pub groups: Option<Vec<usize>>,
    /// An externally supplied prediction of the outcome, if any.
    pub proxy: Option<DVector<f64>>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        outcome: DVector<f64>,
        labeled: Vec<bool>,
    ) -> Result<Self> {
        let n = features.nrows();
        let checks = [
            ("covariate rows", covariates.nrows()),
            ("outcome length", outcome.len()),
            ("labeled mask length", labeled.len()),
        ];
        for (what, got) in checks {
            if got != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch {
                what: "covariate names",
                expected: covariates.ncols(),
                got: covariate_names.len(),
            });
        }
        if features.iter().chain(covariates.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite feature or covariate"));
        }
        for (i, l) in labeled.iter().enumerate() {
            if *l && !outcome[i].is_finite() {
                return Err(Error::InvalidDesign("labeled row with non-finite outcome"));
            }
        }
        Ok(Dataset {
            features,
            covariates,
            covariate_names,
            outcome,
            labeled,
            groups: None,
            proxy: None,
        })
    }

    pub fn with_proxy(mut self, proxy: DVector<f64>) -> Result<Self> {
        if proxy.len() != self.n_rows() {
            return Err(Error::DimensionMismatch {
                what: "proxy length",
                expected: self.n_rows(),
                got: proxy.len(),
            });
        }
        self.proxy = Some(proxy);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.iter().filter(|l| **l).count()
    }

    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn unlabeled_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| !self.labeled[i]).collect()
    }

    pub fn group_of(&self, row: usize) -> usize {
        self.groups.as_ref().map_or(row, |g| g[row])
    }

    pub fn covariate(&self, col: usize) -> Result<DVector<f64>> {
        if col >= self.covariates.ncols() {
            return Err(Error::IndexOutOfRange {
                index: col,
                len: self.covariates.ncols(),
            });
        }
        Ok(self.covariates.column(col).into_owned())
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Copy of the given rows (repeats allowed). Groups follow the rows.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows.iter()),
            covariates: self.covariates.select_rows(rows.iter()),
            covariate_names: self.covariate_names.clone(),
            outcome: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.outcome[i])),
            labeled: rows.iter().map(|&i| self.labeled[i]).collect(),
            groups: self
                .groups
                .as_ref()
                .map(|g| rows.iter().map(|&i| g[i]).collect()),
            proxy: self
                .proxy
                .as_ref()
                .map(|p| DVector::from_iterator(rows.len(), rows.iter().map(|&i| p[i]))),
        }
    }

    /// Same rows with a new labeled mask.
    pub fn with_labeled(&self, labeled: Vec<bool>) -> Result<Dataset> {
        if labeled.len() != self.n_rows() {
            return Err(Error::DimensionMismatch {
                what: "labeled mask length",
                expected: self.n_rows(),
                got: labeled.len(),
            });
        }
        let mut out = self.clone();
        out.labeled = labeled;
        Ok(out)
    }

    /// Labeled-only copy in original order.
    pub fn labeled_subset(&self) -> Dataset {
        self.select_rows(&self.labeled_rows())
    }
}
