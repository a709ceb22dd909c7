//! End-to-end estimation: centre, optionally standardize, tune and fit the
//! Cholesky coefficients, then tune and fit the log-variance model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CdcdError, Result};
use crate::model::{column_means, subtract_means, CholeskyModel, Hyperparams, ModelDiagnostics, Scaling};
use crate::sgl::{InteractionDesign, SglConfig, SglSolver};
use crate::tuning::{
    alpha_grid, build_grid_for_design, cross_validate_variance_with, cross_validate_with_folds,
    fold_assignment, s_lambda_cap_heuristic, CvReport, VarCvReport,
};
use crate::variance::{fit_variance, residuals_from, VarConfig};

/// Default support cap in multiples of the sample size.
pub const DEFAULT_CAP_MULTIPLE: f64 = 10.0;

/// Bound on the support of selectable tuning candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SupportCap {
    None,
    /// Fixed count.
    Count(usize),
    /// `ceil(c * n)` nonzero coefficients.
    SampleMultiple(f64),
    /// `floor(sqrt(n) / max(ln p, ln q)) * c`.
    Heuristic(f64),
}

impl SupportCap {
    pub fn resolve(&self, n: usize, p: usize, q: usize) -> Option<usize> {
        match *self {
            SupportCap::None => None,
            SupportCap::Count(c) => Some(c),
            SupportCap::SampleMultiple(c) => Some((c.max(0.0) * n as f64).ceil() as usize),
            SupportCap::Heuristic(c) => Some(s_lambda_cap_heuristic(n, p, q, c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Scale responses and covariates to unit variance before fitting.
    pub standardize: bool,
    pub folds: usize,
    pub seed: u64,
    pub n_alphas: usize,
    pub n_lambda0: usize,
    pub lambda0_ratio: f64,
    pub cap: SupportCap,
    /// Fixed `(lambda, lambda_g)`; skips cross-validation of the Cholesky fit.
    pub penalties: Option<(f64, f64)>,
    /// Fixed `lambda_d`; skips cross-validation of the variance fit.
    pub lambda_d: Option<f64>,
    pub n_lambda_d: usize,
    pub sgl: SglConfig,
    pub var: VarConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            standardize: false,
            folds: 5,
            seed: 0,
            n_alphas: 5,
            n_lambda0: 30,
            lambda0_ratio: 1e-3,
            cap: SupportCap::SampleMultiple(DEFAULT_CAP_MULTIPLE),
            penalties: None,
            lambda_d: None,
            n_lambda_d: 20,
            sgl: SglConfig::default(),
            var: VarConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: CholeskyModel,
    pub cv: Option<CvReport>,
    pub var_cv: Option<VarCvReport>,
}

fn column_sd(m: &DMatrix<f64>, c: usize, mean: f64) -> f64 {
    let n = m.nrows() as f64;
    (m.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Fits the full model. Coefficients refer to the centred (and, when
/// requested, standardized) data; the returned model carries the transforms.
pub fn fit_cdcd(dataset: &Dataset, opts: &FitOptions) -> Result<FitOutput> {
    let (n, p, q) = (dataset.n(), dataset.p(), dataset.q());
    if n < 2 || p < 2 {
        return Err(CdcdError::input(format!(
            "need at least 2 subjects and 2 responses, got n={n}, p={p}"
        )));
    }
    let means = column_means(&dataset.y);
    let mut y = subtract_means(&dataset.y, &means);
    let mut x = dataset.x.clone();
    let scaling = if opts.standardize {
        let y_scale: Vec<f64> = (0..p)
            .map(|c| {
                let s = column_sd(&y, c, 0.0);
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        let x_center = crate::model::column_means(&x);
        let x_scale: Vec<f64> = (0..q)
            .map(|c| {
                let s = column_sd(&x, c, x_center[c]);
                if s > 0.0 { s } else { 1.0 }
            })
            .collect();
        for c in 0..p {
            y.column_mut(c).iter_mut().for_each(|v| *v /= y_scale[c]);
        }
        for c in 0..q {
            x.column_mut(c)
                .iter_mut()
                .for_each(|v| *v = (*v - x_center[c]) / x_scale[c]);
        }
        Some(Scaling {
            y_scale,
            x_center,
            x_scale,
        })
    } else {
        None
    };
    let work = Dataset::with_names(y, x, dataset.y_names.clone(), dataset.x_names.clone())?;

    let (phi, chol_diag, cv, lambda, lambda_g) = match opts.penalties {
        Some((lambda, lambda_g)) => {
            let design = InteractionDesign::from_dataset(&work)?;
            let cfg = SglConfig {
                lambda,
                lambda_g,
                ..opts.sgl.clone()
            };
            let (phi, diag) = SglSolver::new(&design).fit(&cfg, None)?;
            (phi, diag, None, lambda, lambda_g)
        }
        None => {
            let design = InteractionDesign::from_dataset(&work)?;
            let grid = build_grid_for_design(
                &design,
                &alpha_grid(opts.n_alphas),
                opts.n_lambda0,
                opts.lambda0_ratio,
                opts.cap.resolve(n, p, q),
            )?;
            drop(design);
            let ids = fold_assignment(n, opts.folds, opts.seed)?;
            let fit = cross_validate_with_folds(&work, &grid, &ids, opts.seed, &opts.sgl)?;
            let (l, g) = (fit.report.lambda, fit.report.lambda_g);
            (fit.phi, fit.diagnostics, Some(fit.report), l, g)
        }
    };

    let residuals = residuals_from(&work.y, &work.x, &phi)?;
    let (lambda_d, var_cv) = match opts.lambda_d {
        Some(ld) => (ld, None),
        None if q == 0 => (0.0, None),
        None => {
            let ids = fold_assignment(n, opts.folds, opts.seed.wrapping_add(1))?;
            let rep = cross_validate_variance_with(&residuals, &work.x, &ids, opts.n_lambda_d, 1e-3, &opts.var)?;
            (rep.lambda_d, Some(rep))
        }
    };
    let var_cfg = VarConfig {
        lambda_d,
        ..opts.var.clone()
    };
    let (beta, var_diag) = fit_variance(&residuals, &work.x, &var_cfg, None)?;
    if !beta.is_finite() {
        return Err(CdcdError::numerical("variance fit produced non-finite coefficients"));
    }
    let mut model = CholeskyModel::new(phi, beta)?;
    model.column_means = means;
    model.scaling = scaling;
    model.hyperparams = Hyperparams {
        lambda,
        lambda_g,
        lambda_d,
    };
    model.diagnostics = ModelDiagnostics {
        cholesky: chol_diag,
        variance: var_diag,
    };
    Ok(FitOutput { model, cv, var_cv })
}
