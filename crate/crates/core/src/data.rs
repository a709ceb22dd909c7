use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_dim, CdcdError, Result};
use crate::model::{BetaMatrix, PhiTensor};

/// Responses `y` (n x p, columns in Cholesky order) and covariates `x` (n x q).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y_names: Vec<String>,
    pub x_names: Vec<String>,
    pub truth: Option<Truth>,
}

/// Ground truth attached to simulated data.
#[derive(Debug, Clone)]
pub struct Truth {
    /// `Sigma(x_i)` per subject; subjects at the same covariate level share storage.
    pub sigma: Vec<Arc<DMatrix<f64>>>,
    pub precision: Vec<Arc<DMatrix<f64>>>,
    pub phi: PhiTensor,
    pub beta: BetaMatrix,
    /// Nonzero pattern of `phi`, aligned with its flat storage.
    pub support: Vec<bool>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        let y_names = (1..=y.ncols()).map(|i| format!("y{i}")).collect();
        let x_names = (1..=x.ncols()).map(|i| format!("x{i}")).collect();
        Self::with_names(y, x, y_names, x_names)
    }

    pub fn with_names(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        y_names: Vec<String>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        check_dim("covariate rows", y.nrows(), x.nrows())?;
        check_dim("response names", y.ncols(), y_names.len())?;
        check_dim("covariate names", x.ncols(), x_names.len())?;
        if y.nrows() == 0 {
            return Err(CdcdError::input("dataset has no subjects"));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(CdcdError::input("dataset contains NaN or infinite values"));
        }
        Ok(Dataset {
            y,
            x,
            y_names,
            x_names,
            truth: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Rows `rows` of the dataset, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let y = self.y.select_rows(rows.iter());
        let x = self.x.select_rows(rows.iter());
        let truth = self.truth.as_ref().map(|tr| Truth {
            sigma: rows.iter().map(|&i| tr.sigma[i].clone()).collect(),
            precision: rows.iter().map(|&i| tr.precision[i].clone()).collect(),
            phi: tr.phi.clone(),
            beta: tr.beta.clone(),
            support: tr.support.clone(),
        });
        Dataset {
            y,
            x,
            y_names: self.y_names.clone(),
            x_names: self.x_names.clone(),
            truth,
        }
    }
}
