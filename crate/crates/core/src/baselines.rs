//! Covariate-blind reference estimators: the sample covariance and its
//! off-diagonal soft-thresholded version.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CdcdError, Result};
use crate::linalg::{frobenius_diff, symmetric_inverse, symmetrize};
use crate::sgl::soft_threshold;
use crate::tuning::fold_assignment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    DenseSample,
    SparseSample,
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMethod::DenseSample => "dense-sample",
            BaselineMethod::SparseSample => "sparse-sample",
        })
    }
}

impl FromStr for BaselineMethod {
    type Err = CdcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense-sample" => Ok(BaselineMethod::DenseSample),
            "sparse-sample" => Ok(BaselineMethod::SparseSample),
            other => Err(CdcdError::input(format!("unknown baseline method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEstimate {
    pub sigma: DMatrix<f64>,
    pub method: BaselineMethod,
    /// Soft-threshold level (sparse estimator only).
    pub threshold: Option<f64>,
}

/// Inverse of a baseline estimate; `pseudo_inverse` flags a singular matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub matrix: DMatrix<f64>,
    pub pseudo_inverse: bool,
}

impl BaselineEstimate {
    pub fn precision(&self) -> PrecisionEstimate {
        let (matrix, pseudo_inverse) = symmetric_inverse(&self.sigma);
        PrecisionEstimate { matrix, pseudo_inverse }
    }
}

fn sample_cov(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.nrows() == 0 {
        return Err(CdcdError::input("sample covariance needs at least one row"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(CdcdError::input("responses contain non-finite values"));
    }
    let mut s = y.transpose() * y / y.nrows() as f64;
    symmetrize(&mut s);
    Ok(s)
}

/// `S = sum_i z_i z_i^T / n` on already centred rows.
pub fn dense_sample(y_demeaned: &DMatrix<f64>) -> Result<BaselineEstimate> {
    Ok(BaselineEstimate {
        sigma: sample_cov(y_demeaned)?,
        method: BaselineMethod::DenseSample,
        threshold: None,
    })
}

/// Soft-thresholds the off-diagonal entries; the diagonal is kept.
pub fn soft_threshold_offdiag(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = s.clone();
    for j in 0..s.ncols() {
        for i in 0..s.nrows() {
            if i != j {
                out[(i, j)] = soft_threshold(s[(i, j)], lambda);
            }
        }
    }
    out
}

pub fn sparse_sample(y_demeaned: &DMatrix<f64>, lambda: f64) -> Result<BaselineEstimate> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CdcdError::input(format!("threshold must be >= 0, got {lambda}")));
    }
    let s = sample_cov(y_demeaned)?;
    Ok(BaselineEstimate {
        sigma: soft_threshold_offdiag(&s, lambda),
        method: BaselineMethod::SparseSample,
        threshold: Some(lambda),
    })
}

fn max_offdiag(s: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..s.ncols() {
        for i in 0..s.nrows() {
            if i != j {
                m = m.max(s[(i, j)].abs());
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCv {
    /// Increasing thresholds from 0 to the largest off-diagonal entry.
    pub grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub selected: usize,
}

/// Chooses the threshold minimizing the mean Frobenius distance between the
/// thresholded training covariance and the held-out sample covariance.
/// Ties go to the larger threshold.
pub fn select_threshold(y_demeaned: &DMatrix<f64>, folds: usize, seed: u64, n_grid: usize) -> Result<ThresholdCv> {
    let n = y_demeaned.nrows();
    if n_grid < 2 {
        return Err(CdcdError::input("threshold grid needs at least two points"));
    }
    let full = sample_cov(y_demeaned)?;
    let top = max_offdiag(&full);
    let grid: Vec<f64> = (0..n_grid).map(|i| top * i as f64 / (n_grid - 1) as f64).collect();
    let ids = fold_assignment(n, folds, seed)?;
    let mut mean_loss = vec![0.0; n_grid];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| ids[i] != f).collect();
        let val: Vec<usize> = (0..n).filter(|&i| ids[i] == f).collect();
        let s_train = sample_cov(&y_demeaned.select_rows(train.iter()))?;
        let s_val = sample_cov(&y_demeaned.select_rows(val.iter()))?;
        for (g, &lam) in grid.iter().enumerate() {
            mean_loss[g] += frobenius_diff(&soft_threshold_offdiag(&s_train, lam), &s_val) / folds as f64;
        }
    }
    let mut selected = 0;
    for g in 1..n_grid {
        if mean_loss[g] <= mean_loss[selected] {
            selected = g;
        }
    }
    Ok(ThresholdCv {
        grid,
        mean_loss,
        selected,
    })
}

/// Sparse estimator with a cross-validated threshold.
pub fn sparse_sample_cv(y_demeaned: &DMatrix<f64>, folds: usize, seed: u64) -> Result<(BaselineEstimate, ThresholdCv)> {
    let cv = select_threshold(y_demeaned, folds, seed, 50)?;
    Ok((sparse_sample(y_demeaned, cv.grid[cv.selected])?, cv))
}
