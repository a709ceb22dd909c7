//! Blockwise coordinate descent for the Cholesky-factor regressions.
//!
//! Minimizes
//!
//! ```text
//! 1/(2n) || Y[,1:p] - sum_k (Y[,0:p-1] o X[,k]) Phi_k ||_F^2
//!     + lambda * sum_{k>=0} ||Phi_k||_1 + lambda_g * sum_{k>=1} ||Phi_k||_F
//! ```
//!
//! cycling over covariate slices `k = 0..=q`. Slice 0 gets plain lasso
//! coordinate updates. Each slice `k >= 1` is first tested against the sparse
//! group lasso zero condition and either cleared or updated entry by entry with
//! the fixed-point form `S(b, lambda) / (a + lambda_g / ||Phi_k||_F)`.
//!
//! Gradients are evaluated in covariance form: every regressor that becomes
//! active has its column of the interaction Gram matrix cached, so a
//! coordinate gradient costs `O(|active set of t|)` instead of `O(n)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, CdcdError, Result};
use crate::linalg::{axpy, dot};
use crate::model::{pair_index, PhiTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SglConfig {
    /// Element-wise (lasso) penalty.
    pub lambda: f64,
    /// Group penalty on slices `k >= 1`.
    pub lambda_g: f64,
    pub max_sweeps: usize,
    /// Relative objective decrease over one full cycle that counts as converged.
    pub tol: f64,
    /// Maximum number of active-set passes between two full sweeps.
    pub active_set_refresh: usize,
    /// Largest stationarity residual accepted at convergence.
    pub kkt_tol: f64,
    /// Abandon the fit once more coefficients than this are nonzero.
    pub support_limit: Option<usize>,
}

impl Default for SglConfig {
    fn default() -> Self {
        SglConfig {
            lambda: 0.0,
            lambda_g: 0.0,
            max_sweeps: 500,
            tol: 1e-6,
            active_set_refresh: 10,
            kkt_tol: 1e-4,
            support_limit: None,
        }
    }
}

impl SglConfig {
    pub fn with_penalties(lambda: f64, lambda_g: f64) -> Self {
        SglConfig {
            lambda,
            lambda_g,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CdcdError::input(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return Err(CdcdError::input(format!(
                "lambda_g must be >= 0, got {}",
                self.lambda_g
            )));
        }
        if !(self.tol > 0.0) || !(self.kkt_tol > 0.0) {
            return Err(CdcdError::input("tolerances must be positive"));
        }
        if self.max_sweeps == 0 {
            return Err(CdcdError::input("max_sweeps must be at least 1"));
        }
        Ok(())
    }
}

/// Convergence record of a coordinate-descent or MM fit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub sweeps_run: usize,
    /// Objective at the start and after every full cycle.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub kkt_violation: f64,
    /// Coefficients pinned to zero because their regressor column vanishes.
    pub degenerate_coords: usize,
    /// The fit was abandoned after exceeding `support_limit`.
    #[serde(default)]
    pub support_exceeded: bool,
}

impl FitDiagnostics {
    /// Largest increase between consecutive trace entries (0 for a monotone trace).
    pub fn max_objective_increase(&self) -> f64 {
        self.objective_trace
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// `sign(a) * max(|a| - lambda, 0)`.
#[inline]
pub fn soft_threshold(a: f64, lambda: f64) -> f64 {
    if a > lambda {
        a - lambda
    } else if a < -lambda {
        a + lambda
    } else {
        0.0
    }
}

/// The interaction regressors `Y[,j] o X[,k]` of the sequential regressions.
///
/// Regressor `(j, k)` (predecessor `j < p-1`, slice `k <= q`, with `X[,0] = 1`)
/// has flat id `k * (p-1) + j`.
#[derive(Debug, Clone)]
pub struct InteractionDesign {
    n: usize,
    p: usize,
    q: usize,
    y: Vec<f64>,
    x_aug: Vec<f64>,
    z: Vec<f64>,
    norms: Vec<f64>,
    zy: Vec<f64>,
    degenerate: Vec<bool>,
}

impl InteractionDesign {
    pub fn new(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Self> {
        check_dim("covariate rows", y.nrows(), x.nrows())?;
        let (n, p, q) = (y.nrows(), y.ncols(), x.ncols());
        if n < 2 || p < 2 {
            return Err(CdcdError::input(format!(
                "need at least 2 subjects and 2 responses, got n={n}, p={p}"
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(CdcdError::input("data contain NaN or infinite values"));
        }
        let y_flat: Vec<f64> = y.as_slice().to_vec();
        let mut x_aug = vec![1.0; n * (q + 1)];
        x_aug[n..].copy_from_slice(x.as_slice());

        let m = p - 1;
        let n_reg = m * (q + 1);
        let mut z = vec![0.0; n * n_reg];
        let nf = n as f64;
        for k in 0..=q {
            let xk = &x_aug[k * n..(k + 1) * n];
            for j in 0..m {
                let yj = &y_flat[j * n..(j + 1) * n];
                let col = &mut z[(k * m + j) * n..(k * m + j + 1) * n];
                for i in 0..n {
                    col[i] = yj[i] * xk[i];
                }
            }
        }
        let norms: Vec<f64> = (0..n_reg)
            .map(|r| {
                let c = &z[r * n..(r + 1) * n];
                dot(c, c) / nf
            })
            .collect();
        let scale = norms.iter().copied().fold(0.0, f64::max).max(1.0);
        let degenerate = norms.iter().map(|v| *v <= 1e-14 * scale).collect();
        let mut zy = vec![0.0; n_reg * m];
        for t in 1..p {
            let yt = &y_flat[t * n..(t + 1) * n];
            for r in 0..n_reg {
                zy[(t - 1) * n_reg + r] = dot(&z[r * n..(r + 1) * n], yt) / nf;
            }
        }
        Ok(InteractionDesign {
            n,
            p,
            q,
            y: y_flat,
            x_aug,
            z,
            norms,
            zy,
            degenerate,
        })
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Self::new(&data.y, &data.x)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn n_regressors(&self) -> usize {
        (self.p - 1) * (self.q + 1)
    }

    #[inline]
    pub fn regressor(&self, j: usize, k: usize) -> usize {
        k * (self.p - 1) + j
    }

    /// Column `Y[,j] o X[,k]`.
    pub fn interaction(&self, j: usize, k: usize) -> &[f64] {
        let r = self.regressor(j, k);
        &self.z[r * self.n..(r + 1) * self.n]
    }

    fn z_col(&self, r: usize) -> &[f64] {
        &self.z[r * self.n..(r + 1) * self.n]
    }

    /// Response column `t` (0-based).
    pub fn y_col(&self, t: usize) -> &[f64] {
        &self.y[t * self.n..(t + 1) * self.n]
    }

    /// Augmented covariate column; `k = 0` is the column of ones.
    pub fn x_col(&self, k: usize) -> &[f64] {
        &self.x_aug[k * self.n..(k + 1) * self.n]
    }

    /// `||Y[,j] o X[,k]||^2 / n`.
    pub fn column_norm(&self, j: usize, k: usize) -> f64 {
        self.norms[self.regressor(j, k)]
    }

    pub fn is_degenerate(&self, j: usize, k: usize) -> bool {
        self.degenerate[self.regressor(j, k)]
    }

    #[inline]
    fn zy(&self, t: usize, r: usize) -> f64 {
        self.zy[(t - 1) * self.n_regressors() + r]
    }

    fn check_phi(&self, phi: &PhiTensor) -> Result<()> {
        check_dim("phi p", self.p, phi.p())?;
        check_dim("phi q", self.q, phi.q())
    }

    /// Residual matrix `Y[,1:p] - sum_k (Y[,0:p-1] o X[,k]) Phi_k`, n x (p-1).
    pub fn residuals(&self, phi: &PhiTensor) -> Result<DMatrix<f64>> {
        self.check_phi(phi)?;
        let (n, p) = (self.n, self.p);
        let mut out = DMatrix::zeros(n, p - 1);
        let vals = phi.as_slice();
        let n_pairs = phi.n_pairs();
        for t in 1..p {
            let mut r = self.y_col(t).to_vec();
            for k in 0..=self.q {
                for j in 0..t {
                    let v = vals[k * n_pairs + pair_index(t, j)];
                    if v != 0.0 {
                        axpy(-v, self.interaction(j, k), &mut r);
                    }
                }
            }
            out.column_mut(t - 1).copy_from_slice(&r);
        }
        Ok(out)
    }

    /// Unpenalized least-squares loss `1/(2n) ||residuals||_F^2`.
    pub fn loss(&self, phi: &PhiTensor) -> Result<f64> {
        let r = self.residuals(phi)?;
        Ok(r.iter().map(|v| v * v).sum::<f64>() / (2.0 * self.n as f64))
    }
}

/// Penalty `lambda ||phi||_1 + lambda_g sum_{k>=1} ||Phi_k||_F`.
pub fn penalty(phi: &PhiTensor, cfg: &SglConfig) -> f64 {
    let l1: f64 = phi.as_slice().iter().map(|v| v.abs()).sum();
    let group: f64 = (1..=phi.q()).map(|k| phi.group_norm(k)).sum();
    cfg.lambda * l1 + cfg.lambda_g * group
}

/// Penalized objective.
pub fn objective(phi: &PhiTensor, design: &InteractionDesign, cfg: &SglConfig) -> Result<f64> {
    Ok(design.loss(phi)? + penalty(phi, cfg))
}

/// Norm of the soft-thresholded gradient block, restricted to valid `(t, j)`.
fn thresholded_block_norm(grad: impl Iterator<Item = f64>, lambda: f64) -> f64 {
    grad.map(|g| {
        let s = soft_threshold(g, lambda);
        s * s
    })
    .sum::<f64>()
    .sqrt()
}

/// Zero condition for slice `k >= 1` given the partial residual `R_k`
/// (n x (p-1), column `t-1` for response `t`) that excludes slice `k`.
///
/// True iff `|| vech S_lambda((Y o X_k)^T R_k / n) ||_2 <= lambda_g`.
pub fn group_zero_check(
    k: usize,
    partial_residual: &DMatrix<f64>,
    design: &InteractionDesign,
    cfg: &SglConfig,
) -> bool {
    let n = design.n() as f64;
    let p = design.p();
    let grads = (1..p).flat_map(|t| {
        let r = partial_residual.column(t - 1);
        (0..t)
            .filter(move |&j| !design.is_degenerate(j, k))
            .map(move |j| {
                design
                    .interaction(j, k)
                    .iter()
                    .zip(r.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / n
            })
    });
    thresholded_block_norm(grads, cfg.lambda) <= cfg.lambda_g
}

/// Coordinate minimizer given the inner product `b = z^T R_{t,j,k} / n`.
///
/// `S(b, lambda) / (a + 1{k != 0} lambda_g / ||Phi_k||_F)` with `a` the column
/// norm; a slice with zero norm pins the entry to zero when `lambda_g > 0`.
#[inline]
pub fn coordinate_value(inner: f64, col_norm: f64, group_norm: f64, k: usize, cfg: &SglConfig) -> f64 {
    let s = soft_threshold(inner, cfg.lambda);
    if s == 0.0 {
        return 0.0;
    }
    let mut denom = col_norm;
    if k != 0 && cfg.lambda_g > 0.0 {
        if group_norm <= 0.0 {
            return 0.0;
        }
        denom += cfg.lambda_g / group_norm;
    }
    if denom <= 0.0 {
        0.0
    } else {
        s / denom
    }
}

/// Update of a single entry `phi[t, j, k]` from its partial residual
/// `R_{t,j,k}` (response `t` minus every fitted term except this entry).
///
/// A vanishing regressor column yields 0.
pub fn update_entry(
    t: usize,
    j: usize,
    k: usize,
    partial_residual: &[f64],
    design: &InteractionDesign,
    phi_k_frobenius: f64,
    cfg: &SglConfig,
) -> Result<f64> {
    if t >= design.p() || j >= t || k > design.q() {
        return Err(CdcdError::input(format!("invalid coordinate (t={t}, j={j}, k={k})")));
    }
    check_dim("partial residual length", design.n(), partial_residual.len())?;
    if design.is_degenerate(j, k) {
        return Ok(0.0);
    }
    let inner = dot(design.interaction(j, k), partial_residual) / design.n() as f64;
    Ok(coordinate_value(
        inner,
        design.column_norm(j, k),
        phi_k_frobenius,
        k,
        cfg,
    ))
}

/// Smallest penalties producing an empty fit.
///
/// The first value is `max |(Y[,j] o X[,k])^T Y[,t]| / n` over valid
/// `(t, j, k)`, which zeroes every entry when `lambda_g = 0`. The second is the
/// largest group gradient norm `|| vech (Y o X_k)^T R / n ||_2`, `k >= 1`, where
/// `R` is the residual of the unpenalized population-slice fit; it zeroes
/// every covariate slice when `lambda = 0`.
pub fn lambda_max(design: &InteractionDesign) -> (f64, f64) {
    let (n, p, q) = (design.n(), design.p(), design.q());
    let mut elem: f64 = 0.0;
    for t in 1..p {
        for k in 0..=q {
            for j in 0..t {
                elem = elem.max(design.zy(t, design.regressor(j, k)).abs());
            }
        }
    }
    let resid = population_ols_residuals(design);
    let nf = n as f64;
    let mut group: f64 = 0.0;
    for k in 1..=q {
        let mut sq = 0.0;
        for t in 1..p {
            let r = &resid[(t - 1) * n..t * n];
            for j in 0..t {
                let g = dot(design.interaction(j, k), r) / nf;
                sq += g * g;
            }
        }
        group = group.max(sq.sqrt());
    }
    (elem, group)
}

/// Residuals of regressing each `y_t` on `y_0..y_{t-1}` by least squares,
/// via modified Gram-Schmidt with one reorthogonalization pass.
fn population_ols_residuals(design: &InteractionDesign) -> Vec<f64> {
    let (n, p) = (design.n(), design.p());
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut out = vec![0.0; n * (p - 1)];
    for t in 1..p {
        let mut v = design.y_col(t - 1).to_vec();
        let orig = dot(&v, &v).sqrt();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &v);
                axpy(-c, b, &mut v);
            }
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-10 * orig.max(f64::MIN_POSITIVE) && nv > 0.0 {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
        let mut r = design.y_col(t).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &r);
                axpy(-c, b, &mut r);
            }
        }
        out[(t - 1) * n..t * n].copy_from_slice(&r);
    }
    out
}

/// Lazily computed columns of the interaction Gram matrix `Z^T Z / n`.
#[derive(Debug, Default)]
pub struct GramCache {
    cols: Vec<Box<[f64]>>,
    computed: usize,
}

impl GramCache {
    fn ensure(&mut self, design: &InteractionDesign, r: usize) {
        if self.cols.is_empty() {
            self.cols = (0..design.n_regressors()).map(|_| Box::default()).collect();
        }
        if !self.cols[r].is_empty() {
            return;
        }
        let zr = design.z_col(r);
        let nf = design.n() as f64;
        let col: Box<[f64]> = (0..design.n_regressors())
            .map(|s| dot(design.z_col(s), zr) / nf)
            .collect();
        self.cols[r] = col;
        self.computed += 1;
    }

    #[inline]
    fn col(&self, r: usize) -> &[f64] {
        &self.cols[r]
    }

    /// Number of Gram columns materialized so far.
    pub fn computed_columns(&self) -> usize {
        self.computed
    }
}

/// Coordinate-descent solver bound to one design; reuses its Gram cache
/// across fits (e.g. along a tuning path).
pub struct SglSolver<'a> {
    design: &'a InteractionDesign,
    cache: GramCache,
}

impl<'a> SglSolver<'a> {
    pub fn new(design: &'a InteractionDesign) -> Self {
        SglSolver {
            design,
            cache: GramCache::default(),
        }
    }

    pub fn design(&self) -> &InteractionDesign {
        self.design
    }

    pub fn cache(&self) -> &GramCache {
        &self.cache
    }

    pub fn fit(
        &mut self,
        cfg: &SglConfig,
        warm_start: Option<&PhiTensor>,
    ) -> Result<(PhiTensor, FitDiagnostics)> {
        cfg.validate()?;
        let design = self.design;
        let phi0 = match warm_start {
            Some(w) => {
                design.check_phi(w)?;
                w.clone()
            }
            None => PhiTensor::zeros(design.p(), design.q()),
        };
        let mut state = CdState::new(design, &mut self.cache, cfg, phi0);
        let mut diag = FitDiagnostics {
            degenerate_coords: state.degenerate_count(),
            ..Default::default()
        };
        let mut prev = state.objective();
        diag.objective_trace.push(prev);
        for sweep in 1..=cfg.max_sweeps {
            state.full_sweep();
            let pass_tol = 0.01 * cfg.kkt_tol;
            for _ in 0..cfg.active_set_refresh {
                if state.active_pass() < pass_tol {
                    break;
                }
            }
            let obj = state.objective();
            diag.objective_trace.push(obj);
            diag.sweeps_run = sweep;
            if cfg.support_limit.is_some_and(|lim| state.phi.support_size() > lim) {
                diag.support_exceeded = true;
                break;
            }
            let rel = (prev - obj) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.tol {
                let kkt = state.kkt();
                diag.kkt_violation = kkt;
                if kkt <= cfg.kkt_tol {
                    diag.converged = true;
                    break;
                }
            }
            prev = obj;
        }
        if !diag.converged {
            diag.kkt_violation = state.kkt();
        }
        let phi = state.into_phi();
        Ok((phi, diag))
    }

    /// Largest violation of the optimality conditions at `phi`.
    pub fn kkt_violation(&mut self, phi: &PhiTensor, cfg: &SglConfig) -> Result<f64> {
        self.design.check_phi(phi)?;
        let state = CdState::new(self.design, &mut self.cache, cfg, phi.clone());
        Ok(state.kkt())
    }
}

/// Fits the Cholesky-factor coefficients on a (demeaned) dataset.
pub fn fit(
    dataset: &Dataset,
    cfg: &SglConfig,
    warm_start: Option<&PhiTensor>,
) -> Result<(PhiTensor, FitDiagnostics)> {
    let design = InteractionDesign::from_dataset(dataset)?;
    SglSolver::new(&design).fit(cfg, warm_start)
}

/// Largest violation of the optimality conditions at `phi`.
pub fn kkt_violation(phi: &PhiTensor, design: &InteractionDesign, cfg: &SglConfig) -> Result<f64> {
    SglSolver::new(design).kkt_violation(phi, cfg)
}

struct CdState<'a> {
    d: &'a InteractionDesign,
    cache: &'a mut GramCache,
    cfg: &'a SglConfig,
    phi: PhiTensor,
    /// Per response `t`: (regressor id, flat phi index) of nonzero entries.
    active: Vec<Vec<(usize, usize)>>,
    group_sq: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> CdState<'a> {
    fn new(
        d: &'a InteractionDesign,
        cache: &'a mut GramCache,
        cfg: &'a SglConfig,
        mut phi: PhiTensor,
    ) -> Self {
        let p = d.p();
        let n_pairs = phi.n_pairs();
        let mut active = vec![Vec::new(); p];
        for idx in 0..phi.len() {
            let (t, j, k) = phi.coords(idx);
            let r = d.regressor(j, k);
            if d.degenerate[r] {
                phi.as_mut_slice()[idx] = 0.0;
            }
            if phi.as_slice()[idx] != 0.0 {
                cache.ensure(d, r);
                active[t].push((r, idx));
            }
        }
        let group_sq = (0..=d.q()).map(|k| phi.group_norm(k).powi(2)).collect();
        CdState {
            d,
            cache,
            cfg,
            phi,
            active,
            group_sq,
            scratch: vec![0.0; n_pairs],
        }
    }

    fn degenerate_count(&self) -> usize {
        let mut count = 0;
        for t in 1..self.d.p() {
            for k in 0..=self.d.q() {
                for j in 0..t {
                    if self.d.is_degenerate(j, k) {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    fn into_phi(self) -> PhiTensor {
        self.phi
    }

    /// `z_r^T r_t / n` with `r_t` the current full residual of response `t`.
    #[inline]
    fn grad(&self, t: usize, r: usize) -> f64 {
        let vals = self.phi.as_slice();
        let mut g = self.d.zy(t, r);
        for &(a, ai) in &self.active[t] {
            g -= self.cache.col(a)[r] * vals[ai];
        }
        g
    }

    /// Gradient with every slice-`k` term of response `t` added back.
    #[inline]
    fn grad_without_group(&self, t: usize, r: usize, k: usize) -> f64 {
        let m = self.d.p() - 1;
        let vals = self.phi.as_slice();
        let mut g = self.d.zy(t, r);
        for &(a, ai) in &self.active[t] {
            if a / m != k {
                g -= self.cache.col(a)[r] * vals[ai];
            }
        }
        g
    }

    fn set(&mut self, t: usize, k: usize, r: usize, idx: usize, new: f64) {
        let old = self.phi.as_slice()[idx];
        if old == new {
            return;
        }
        if old == 0.0 {
            self.cache.ensure(self.d, r);
            self.active[t].push((r, idx));
        } else if new == 0.0 {
            let list = &mut self.active[t];
            if let Some(pos) = list.iter().position(|&(_, i)| i == idx) {
                list.swap_remove(pos);
            }
        }
        self.phi.as_mut_slice()[idx] = new;
        self.group_sq[k] = (self.group_sq[k] + new * new - old * old).max(0.0);
    }

    fn refresh_group_norms(&mut self) {
        for k in 0..=self.d.q() {
            self.group_sq[k] = self.phi.slice(k).iter().map(|v| v * v).sum();
        }
    }

    /// One coordinate update; returns `|change| * column norm`.
    fn update(&mut self, t: usize, j: usize, k: usize) -> f64 {
        let r = self.d.regressor(j, k);
        let idx = k * self.phi.n_pairs() + pair_index(t, j);
        if self.d.degenerate[r] {
            self.set(t, k, r, idx, 0.0);
            return 0.0;
        }
        let a = self.d.norms[r];
        let old = self.phi.as_slice()[idx];
        let inner = self.grad(t, r) + a * old;
        let new = coordinate_value(inner, a, self.group_sq[k].sqrt(), k, self.cfg);
        self.set(t, k, r, idx, new);
        (new - old).abs() * a
    }

    fn full_sweep(&mut self) {
        self.refresh_group_norms();
        let p = self.d.p();
        for t in 1..p {
            for j in 0..t {
                self.update(t, j, 0);
            }
        }
        for k in 1..=self.d.q() {
            self.group_step(k);
        }
    }

    fn group_step(&mut self, k: usize) {
        let p = self.d.p();
        let lambda = self.cfg.lambda;
        let mut scratch = std::mem::take(&mut self.scratch);
        let mut sq = 0.0;
        for t in 1..p {
            for j in 0..t {
                let r = self.d.regressor(j, k);
                let g = if self.d.degenerate[r] {
                    0.0
                } else {
                    self.grad_without_group(t, r, k)
                };
                scratch[pair_index(t, j)] = g;
                let s = soft_threshold(g, lambda);
                sq += s * s;
            }
        }
        let s_norm = sq.sqrt();
        let n_pairs = self.phi.n_pairs();
        if s_norm <= self.cfg.lambda_g {
            for t in 1..p {
                for j in 0..t {
                    let idx = k * n_pairs + pair_index(t, j);
                    if self.phi.as_slice()[idx] != 0.0 {
                        self.set(t, k, self.d.regressor(j, k), idx, 0.0);
                    }
                }
            }
            self.group_sq[k] = 0.0;
        } else {
            if self.group_sq[k] == 0.0 {
                // Proximal-gradient step from zero; the trace of the slice Gram
                // bounds the Lipschitz constant of every response's block.
                let lipschitz: f64 = (0..p - 1).map(|j| self.d.norms[self.d.regressor(j, k)]).sum();
                let scale = (1.0 - self.cfg.lambda_g / s_norm) / lipschitz;
                for t in 1..p {
                    for j in 0..t {
                        let v = scale * soft_threshold(scratch[pair_index(t, j)], lambda);
                        if v != 0.0 {
                            let r = self.d.regressor(j, k);
                            self.set(t, k, r, k * n_pairs + pair_index(t, j), v);
                        }
                    }
                }
            }
            for t in 1..p {
                for j in 0..t {
                    self.update(t, j, k);
                }
            }
        }
        self.scratch = scratch;
    }

    /// Updates only the current nonzero coordinates; returns the largest change.
    fn active_pass(&mut self) -> f64 {
        self.refresh_group_norms();
        let m = self.d.p() - 1;
        let mut max_change: f64 = 0.0;
        let mut snapshot = Vec::new();
        for t in 1..self.d.p() {
            snapshot.clear();
            snapshot.extend_from_slice(&self.active[t]);
            for &(r, _) in &snapshot {
                let (k, j) = (r / m, r % m);
                max_change = max_change.max(self.update(t, j, k));
            }
        }
        max_change
    }

    fn objective(&self) -> f64 {
        let n = self.d.n();
        let mut loss = 0.0;
        let vals = self.phi.as_slice();
        let mut resid = vec![0.0; n];
        for t in 1..self.d.p() {
            resid.copy_from_slice(self.d.y_col(t));
            for &(r, idx) in &self.active[t] {
                axpy(-vals[idx], self.d.z_col(r), &mut resid);
            }
            loss += dot(&resid, &resid);
        }
        loss / (2.0 * n as f64) + penalty(&self.phi, self.cfg)
    }

    fn kkt(&self) -> f64 {
        let (p, q) = (self.d.p(), self.d.q());
        let (lambda, lambda_g) = (self.cfg.lambda, self.cfg.lambda_g);
        let vals = self.phi.as_slice();
        let n_pairs = self.phi.n_pairs();
        let mut worst: f64 = 0.0;
        for k in 0..=q {
            let group_norm = self.phi.group_norm(k);
            if k >= 1 && group_norm == 0.0 {
                let mut sq = 0.0;
                for t in 1..p {
                    for j in 0..t {
                        let r = self.d.regressor(j, k);
                        if !self.d.degenerate[r] {
                            let s = soft_threshold(self.grad(t, r), lambda);
                            sq += s * s;
                        }
                    }
                }
                worst = worst.max(sq.sqrt() - lambda_g);
                continue;
            }
            for t in 1..p {
                for j in 0..t {
                    let r = self.d.regressor(j, k);
                    if self.d.degenerate[r] {
                        continue;
                    }
                    let g = self.grad(t, r);
                    let v = vals[k * n_pairs + pair_index(t, j)];
                    let viol = if v == 0.0 {
                        g.abs() - lambda
                    } else {
                        let mut s = g - lambda * v.signum();
                        if k >= 1 {
                            s -= lambda_g * v / group_norm;
                        }
                        s.abs()
                    };
                    worst = worst.max(viol);
                }
            }
        }
        worst.max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_data(n: usize, p: usize, q: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        (y, x)
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(2.5, 1.0), 1.5);
        assert_eq!(soft_threshold(-0.3, 1.0), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
        for x in [-3.0, -0.1, 0.0, 0.7, 12.0] {
            assert_eq!(soft_threshold(x, 0.0), x);
        }
    }

    #[test]
    fn design_norms_match_recomputation() {
        let (y, x) = random_data(30, 4, 2, 1);
        let d = InteractionDesign::new(&y, &x).unwrap();
        assert!(d.x_col(0).iter().all(|v| *v == 1.0));
        for k in 0..=2 {
            for j in 0..3 {
                let col: Vec<f64> = (0..30)
                    .map(|i| y[(i, j)] * if k == 0 { 1.0 } else { x[(i, k - 1)] })
                    .collect();
                let norm = col.iter().map(|v| v * v).sum::<f64>() / 30.0;
                assert!((norm - d.column_norm(j, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn objective_at_zero_is_half_mean_square() {
        let (y, x) = random_data(25, 3, 2, 2);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let phi = PhiTensor::zeros(3, 2);
        let expected: f64 = (1..3)
            .map(|t| y.column(t).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / 50.0;
        let got = objective(&phi, &d, &SglConfig::with_penalties(1.0, 1.0)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn penalty_of_single_entry() {
        let mut phi = PhiTensor::zeros(2, 1);
        phi.set(1, 0, 1, -0.7).unwrap();
        let pen = penalty(&phi, &SglConfig::with_penalties(1.0, 2.0));
        assert!((pen - 3.0 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn group_check_full_thresholding() {
        let (y, x) = random_data(40, 4, 2, 3);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let resid = DMatrix::from_fn(40, 3, |i, c| y[(i, c + 1)]);
        let huge = SglConfig::with_penalties(1e6, 0.0);
        assert!(group_zero_check(1, &resid, &d, &huge));
        let none = SglConfig::with_penalties(0.0, 0.0);
        assert!(!group_zero_check(1, &resid, &d, &none));
    }

    #[test]
    fn update_entry_cases() {
        // Orthogonal-ish design with q = 0: the lambda = 0 update is the OLS ratio.
        let (y, x) = random_data(50, 2, 0, 4);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let cfg = SglConfig::with_penalties(0.0, 0.0);
        let r: Vec<f64> = d.y_col(1).to_vec();
        let v = update_entry(1, 0, 0, &r, &d, 0.0, &cfg).unwrap();
        let ratio = dot(d.y_col(0), &r) / dot(d.y_col(0), d.y_col(0));
        assert!((v - ratio).abs() < 1e-12);
        let big = SglConfig::with_penalties(1e3, 0.0);
        assert_eq!(update_entry(1, 0, 0, &r, &d, 0.0, &big).unwrap(), 0.0);
        assert!(update_entry(1, 1, 0, &r, &d, 0.0, &cfg).is_err());
    }

    #[test]
    fn zero_covariate_column_is_pinned() {
        let (y, mut x) = random_data(40, 3, 2, 5);
        x.column_mut(1).fill(0.0);
        let d = InteractionDesign::new(&y, &x).unwrap();
        assert!(d.is_degenerate(0, 2));
        let r = d.y_col(1).to_vec();
        let cfg = SglConfig::with_penalties(0.0, 0.0);
        assert_eq!(update_entry(1, 0, 2, &r, &d, 1.0, &cfg).unwrap(), 0.0);
        let (phi, diag) = SglSolver::new(&d)
            .fit(&SglConfig::with_penalties(0.01, 0.01), None)
            .unwrap();
        assert!(phi.slice(2).iter().all(|v| *v == 0.0));
        assert_eq!(diag.degenerate_coords, 3);
        assert!(diag.converged);
    }

    #[test]
    fn large_penalties_give_empty_fit_in_one_sweep() {
        let (y, x) = random_data(60, 4, 3, 6);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let (lmax, gmax) = lambda_max(&d);
        let cfg = SglConfig::with_penalties(lmax * 1.01, gmax * 1.01);
        let (phi, diag) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        assert_eq!(phi.support_size(), 0);
        assert_eq!(diag.sweeps_run, 1);
        assert!(diag.converged);
        let cfg = SglConfig::with_penalties(lmax * 1.0000001, 0.0);
        let (phi, _) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        assert_eq!(phi.support_size(), 0);
    }

    #[test]
    fn lambda_max_orthogonal_data_is_zero() {
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let d = InteractionDesign::new(&y, &x).unwrap();
        assert_eq!(lambda_max(&d), (0.0, 0.0));
    }

    #[test]
    fn group_lambda_max_zeroes_covariate_slices() {
        for seed in 0..5 {
            let (y, x) = random_data(80, 4, 3, 100 + seed);
            let d = InteractionDesign::new(&y, &x).unwrap();
            let (_, gmax) = lambda_max(&d);
            let mut cfg = SglConfig::with_penalties(0.0, gmax * 1.0001);
            cfg.tol = 1e-12;
            let (phi, _) = SglSolver::new(&d).fit(&cfg, None).unwrap();
            for k in 1..=3 {
                assert!(phi.slice(k).iter().all(|v| *v == 0.0), "seed {seed}, slice {k}");
            }
            assert!(phi.slice(0).iter().any(|v| *v != 0.0));
            // just below the threshold one slice activates
            let mut cfg = SglConfig::with_penalties(0.0, gmax * 0.95);
            cfg.tol = 1e-12;
            let (phi, _) = SglSolver::new(&d).fit(&cfg, None).unwrap();
            assert!(!phi.active_groups().is_empty(), "seed {seed}");
        }
    }

    #[test]
    fn simple_regression_slope() {
        // y2 = 0.5 y1 + e, e ~ N(0, 0.1^2); oracle is the closed-form slope.
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut y = DMatrix::zeros(n, 2);
        for i in 0..n {
            let y1: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            y[(i, 0)] = y1;
            y[(i, 1)] = 0.5 * y1 + 0.1 * e;
        }
        let x = DMatrix::zeros(n, 0);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let mut cfg = SglConfig::with_penalties(0.0, 0.0);
        cfg.tol = 1e-12;
        let (phi, diag) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        let slope = dot(d.y_col(0), d.y_col(1)) / dot(d.y_col(0), d.y_col(0));
        let est = phi.get(1, 0, 0).unwrap();
        assert!((est - slope).abs() < 1e-10);
        assert!((est - 0.5).abs() < 0.02);
        assert!(diag.converged);
    }

    #[test]
    fn trace_is_monotone_and_kkt_holds() {
        for seed in 0..6 {
            let (y, x) = random_data(70, 5, 3, 40 + seed);
            let d = InteractionDesign::new(&y, &x).unwrap();
            let (lmax, gmax) = lambda_max(&d);
            let cfg = SglConfig::with_penalties(0.1 * lmax, 0.1 * gmax);
            let (phi, diag) = SglSolver::new(&d).fit(&cfg, None).unwrap();
            assert!(diag.converged, "seed {seed}");
            assert!(diag.max_objective_increase() <= 1e-10);
            assert!(diag.kkt_violation <= 1e-4);
            let direct = kkt_violation(&phi, &d, &cfg).unwrap();
            assert!((direct - diag.kkt_violation).abs() < 1e-12);
            let obj = objective(&phi, &d, &cfg).unwrap();
            assert!((obj - diag.objective_trace.last().unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let (y, x) = random_data(70, 4, 2, 77);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let (lmax, gmax) = lambda_max(&d);
        let mut cfg = SglConfig::with_penalties(0.05 * lmax, 0.05 * gmax);
        cfg.tol = 1e-12;
        cfg.kkt_tol = 1e-9;
        let mut solver = SglSolver::new(&d);
        let (cold, _) = solver.fit(&cfg, None).unwrap();
        let mut prev = cfg.clone();
        prev.lambda *= 3.0;
        let (w, _) = solver.fit(&prev, None).unwrap();
        let (warm, _) = solver.fit(&cfg, Some(&w)).unwrap();
        let diff = cold
            .as_slice()
            .iter()
            .zip(warm.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "diff {diff}");
    }

    #[test]
    fn support_limit_abandons_dense_fits() {
        let (y, x) = random_data(40, 6, 3, 21);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let mut cfg = SglConfig::with_penalties(1e-4, 1e-4);
        let (free, _) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        assert!(free.support_size() > 10);
        cfg.support_limit = Some(10);
        let (_, diag) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        assert!(diag.support_exceeded && !diag.converged);
        cfg.support_limit = Some(free.len());
        let (_, diag) = SglSolver::new(&d).fit(&cfg, None).unwrap();
        assert!(!diag.support_exceeded);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let (y, x) = random_data(10, 3, 1, 8);
        let d = InteractionDesign::new(&y, &x).unwrap();
        let mut solver = SglSolver::new(&d);
        assert!(solver.fit(&SglConfig::with_penalties(-1.0, 0.0), None).is_err());
        let wrong = PhiTensor::zeros(4, 1);
        assert!(solver
            .fit(&SglConfig::with_penalties(0.1, 0.1), Some(&wrong))
            .is_err());
        let one = DMatrix::zeros(1, 3);
        assert!(InteractionDesign::new(&one, &DMatrix::zeros(1, 1)).is_err());
        let mut bad = y.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(InteractionDesign::new(&bad, &x).is_err());
    }
}
