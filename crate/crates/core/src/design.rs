//! Design-matrix assembly shared by the regression estimators.

use crate::error::{Error, Result};
use crate::linalg::{collinear_columns, Matrix};
use crate::panel::SectorEncoding;

/// A named design matrix (rows are observations).
#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub x: Matrix,
}

impl Design {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Errors naming the columns that are linear combinations of earlier
    /// ones.
    pub fn check_rank(&self) -> Result<()> {
        let bad = collinear_columns(&self.x.weighted_gram(None));
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::RankDeficient(
                bad.into_iter().map(|j| self.names[j].clone()).collect(),
            ))
        }
    }

    /// Removes columns that are identically zero (e.g. a sector absent from
    /// a subsample). Returns the dropped names.
    pub fn drop_zero_columns(&mut self) -> Vec<String> {
        let keep: Vec<usize> = (0..self.ncols())
            .filter(|&j| (0..self.nrows()).any(|i| self.x.get(i, j) != 0.0))
            .collect();
        let dropped = (0..self.ncols())
            .filter(|j| !keep.contains(j))
            .map(|j| self.names[j].clone())
            .collect();
        if keep.len() != self.ncols() {
            self.x = self.x.select_columns(&keep);
            self.names = keep.iter().map(|&j| self.names[j].clone()).collect();
        }
        dropped
    }

    pub fn select_rows(&self, idx: &[usize]) -> Design {
        Design {
            names: self.names.clone(),
            x: self.x.select_rows(idx),
        }
    }
}

/// Column-by-column builder.
#[derive(Default)]
pub struct DesignBuilder {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl DesignBuilder {
    pub fn new(n: usize) -> Self {
        DesignBuilder {
            names: Vec::new(),
            cols: Vec::new(),
            n,
        }
    }

    pub fn intercept(mut self) -> Self {
        self.names.push("intercept".into());
        self.cols.push(vec![1.0; self.n]);
        self
    }

    pub fn column(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.n, "design column length");
        self.names.push(name.into());
        self.cols.push(values);
        self
    }

    /// Indicator columns for the non-reference sectors.
    pub fn sectors(mut self, enc: &SectorEncoding, labels: &[&str]) -> Self {
        assert_eq!(labels.len(), self.n, "sector label count");
        for (name, level) in enc.column_names().into_iter().zip(&enc.levels) {
            self.names.push(name);
            self.cols
                .push(labels.iter().map(|l| (*l == level) as u8 as f64).collect());
        }
        self
    }

    pub fn build(self) -> Design {
        let x = if self.cols.is_empty() {
            Matrix::zeros(self.n, 0)
        } else {
            Matrix::from_columns(&self.cols)
        };
        Design { names: self.names, x }
    }
}
