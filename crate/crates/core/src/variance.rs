//! Log-variance regression on the innovations of the fitted Cholesky factor.
//!
//! Minimizes `1/(2n) sum_{i,t} (e_it^2 - exp(x_i^T beta_t))^2
//! + lambda_d sum_{k>=1} ||beta_{.,k}||_2` by cycling over covariate blocks
//! with majorize-minimize steps. Each step uses the local curvature
//! `h* = (2/n) sum_i exp(2 eta) x_ik^2` as the surrogate's quadratic term; a
//! step that fails to decrease the objective is halved.

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{check_dim, CdcdError, Result};
use crate::model::{clamped_exp, pair_index, BetaMatrix, PhiTensor};
use crate::sgl::FitDiagnostics;

#[derive(Debug, Clone, PartialEq)]
pub struct VarConfig {
    pub lambda_d: f64,
    pub max_iters: usize,
    /// Relative objective change over one cycle that counts as converged.
    pub tol: f64,
    pub step_halving_max: usize,
    /// Largest (scaled) stationarity residual accepted at convergence.
    pub kkt_tol: f64,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig {
            lambda_d: 0.0,
            max_iters: 500,
            tol: 1e-6,
            step_halving_max: 20,
            kkt_tol: 1e-4,
        }
    }
}

impl VarConfig {
    pub fn with_lambda(lambda_d: f64) -> Self {
        VarConfig {
            lambda_d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return Err(CdcdError::input(format!(
                "lambda_d must be >= 0, got {}",
                self.lambda_d
            )));
        }
        if !(self.tol > 0.0) || !(self.kkt_tol > 0.0) || self.max_iters == 0 {
            return Err(CdcdError::input("variance solver needs positive tolerances and iterations"));
        }
        Ok(())
    }
}

/// Fitted innovations `e_it`; column 0 is the first response itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub eps_hat: DMatrix<f64>,
}

impl ResidualMatrix {
    pub fn new(eps_hat: DMatrix<f64>) -> Result<Self> {
        if eps_hat.iter().any(|v| !v.is_finite()) {
            return Err(CdcdError::input("residuals contain non-finite values"));
        }
        Ok(ResidualMatrix { eps_hat })
    }

    pub fn n(&self) -> usize {
        self.eps_hat.nrows()
    }

    pub fn p(&self) -> usize {
        self.eps_hat.ncols()
    }

    pub fn subset(&self, rows: &[usize]) -> ResidualMatrix {
        ResidualMatrix {
            eps_hat: self.eps_hat.select_rows(rows.iter()),
        }
    }
}

/// `e_it = y_it - sum_{j<t} sum_k phi_tjk x_ik y_ij` (with `x_i0 = 1`).
pub fn compute_residuals(dataset: &Dataset, phi: &PhiTensor) -> Result<ResidualMatrix> {
    residuals_from(&dataset.y, &dataset.x, phi)
}

pub fn residuals_from(y: &DMatrix<f64>, x: &DMatrix<f64>, phi: &PhiTensor) -> Result<ResidualMatrix> {
    check_dim("covariate rows", y.nrows(), x.nrows())?;
    check_dim("phi p", y.ncols(), phi.p())?;
    check_dim("phi q", x.ncols(), phi.q())?;
    let (n, p, q) = (y.nrows(), y.ncols(), x.ncols());
    let n_pairs = phi.n_pairs();
    let vals = phi.as_slice();
    let mut eps = y.clone();
    for t in 1..p {
        for j in 0..t {
            let pair = pair_index(t, j);
            for i in 0..n {
                let mut f = vals[pair];
                for k in 1..=q {
                    let v = vals[k * n_pairs + pair];
                    if v != 0.0 {
                        f += v * x[(i, k - 1)];
                    }
                }
                if f != 0.0 {
                    eps[(i, t)] -= f * y[(i, j)];
                }
            }
        }
    }
    ResidualMatrix::new(eps)
}

fn check_x(residuals: &ResidualMatrix, x: &DMatrix<f64>) -> Result<()> {
    check_dim("covariate rows", residuals.n(), x.nrows())?;
    if residuals.n() == 0 {
        return Err(CdcdError::input("no subjects"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CdcdError::input("covariates contain non-finite values"));
    }
    Ok(())
}

fn check_beta(beta: &BetaMatrix, residuals: &ResidualMatrix, x: &DMatrix<f64>) -> Result<()> {
    check_dim("beta p", residuals.p(), beta.p())?;
    check_dim("beta q", x.ncols(), beta.q())
}

/// Unpenalized loss `1/(2n) sum (e^2 - exp(eta))^2`.
pub fn var_loss(beta: &BetaMatrix, residuals: &ResidualMatrix, x: &DMatrix<f64>) -> Result<f64> {
    check_x(residuals, x)?;
    check_beta(beta, residuals, x)?;
    let state = VarState::new(residuals, x, beta.clone(), false);
    Ok(state.loss.iter().sum())
}

/// Penalized objective.
pub fn var_objective(
    beta: &BetaMatrix,
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    cfg: &VarConfig,
) -> Result<f64> {
    let loss = var_loss(beta, residuals, x)?;
    let pen: f64 = (1..=beta.q()).map(|k| beta.group_norm(k)).sum();
    Ok(loss + cfg.lambda_d * pen)
}

/// Gradient `g_tk` of the smooth loss and MM curvature `h*_tk`.
pub fn mm_gradient_curvature(
    beta: &BetaMatrix,
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    t: usize,
    k: usize,
) -> Result<(f64, f64)> {
    check_x(residuals, x)?;
    check_beta(beta, residuals, x)?;
    if t >= beta.p() || k > beta.q() {
        return Err(CdcdError::input(format!("invalid coordinate (t={t}, k={k})")));
    }
    if !beta.is_finite() {
        return Err(CdcdError::input("beta contains non-finite values"));
    }
    let state = VarState::new(residuals, x, beta.clone(), false);
    Ok(state.grad_curv(t, k))
}

/// Smallest `lambda_d` whose fit has every covariate block at zero: the
/// largest block gradient norm at the intercept-only solution.
pub fn lambda_d_max(residuals: &ResidualMatrix, x: &DMatrix<f64>) -> Result<f64> {
    check_x(residuals, x)?;
    let (p, q) = (residuals.p(), x.ncols());
    let mut beta = BetaMatrix::zeros(p, q);
    for t in 0..p {
        let m = mean_square(residuals, t);
        beta.set(t, 0, if m > 0.0 { m.ln() } else { -30.0 });
    }
    let state = VarState::new(residuals, x, beta, false);
    Ok((1..=q)
        .map(|k| {
            (0..p)
                .map(|t| state.grad_curv(t, k).0.powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}

fn mean_square(residuals: &ResidualMatrix, t: usize) -> f64 {
    let col = residuals.eps_hat.column(t);
    col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64
}

/// Intercept-only starting point `beta_t0 = log(mean e_t^2 + 1e-8)`.
pub fn initial_beta(residuals: &ResidualMatrix, q: usize) -> BetaMatrix {
    let p = residuals.p();
    let mut beta = BetaMatrix::zeros(p, q);
    for t in 0..p {
        beta.set(t, 0, (mean_square(residuals, t) + 1e-8).ln());
    }
    beta
}

pub fn fit_variance(
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    cfg: &VarConfig,
    warm_start: Option<&BetaMatrix>,
) -> Result<(BetaMatrix, FitDiagnostics)> {
    cfg.validate()?;
    check_x(residuals, x)?;
    let beta0 = match warm_start {
        Some(b) => {
            check_beta(b, residuals, x)?;
            if !b.is_finite() {
                return Err(CdcdError::input("warm start contains non-finite values"));
            }
            b.clone()
        }
        None => initial_beta(residuals, x.ncols()),
    };
    let mut state = VarState::new(residuals, x, beta0, true);
    // certify on the caller's coordinates, where `var_kkt_violation` measures
    let kkt = |s: &VarState| VarState::new(residuals, x, s.original_beta(), false).kkt(cfg.lambda_d);
    let p = residuals.p();
    let mut diag = FitDiagnostics {
        degenerate_coords: (1..=state.q).filter(|&k| state.x_sq_sum[k] == 0.0).count() * p,
        ..Default::default()
    };
    let mut prev = state.objective(cfg.lambda_d);
    diag.objective_trace.push(prev);
    for iter in 1..=cfg.max_iters {
        for k in 0..=state.q {
            state.block_step(k, cfg);
        }
        let obj = state.objective(cfg.lambda_d);
        diag.objective_trace.push(obj);
        diag.sweeps_run = iter;
        let rel = (prev - obj).abs() / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.tol {
            diag.kkt_violation = kkt(&state);
            if diag.kkt_violation <= cfg.kkt_tol {
                diag.converged = true;
                break;
            }
        }
        prev = obj;
    }
    if !diag.converged {
        diag.kkt_violation = kkt(&state);
    }
    Ok((state.original_beta(), diag))
}

/// Largest scaled violation of the stationarity conditions at `beta`.
///
/// Gradients are divided by `max(1, mean e^4)` so the threshold does not
/// depend on the scale of the residuals.
pub fn var_kkt_violation(
    beta: &BetaMatrix,
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    cfg: &VarConfig,
) -> Result<f64> {
    check_x(residuals, x)?;
    check_beta(beta, residuals, x)?;
    Ok(VarState::new(residuals, x, beta.clone(), false).kkt(cfg.lambda_d))
}

/// Minimizer of `sum_t h_t/2 (b_t - v_t)^2 + lambda ||b||`.
///
/// The solution is `b_t = h_t v_t / (h_t + lambda / s)` with `s = ||b||`, and
/// `s` is the root of a decreasing scalar equation found by bisection.
pub(crate) fn weighted_group_prox(v: &[f64], h: &[f64], lambda: f64) -> Vec<f64> {
    let hv_norm = v.iter().zip(h).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
    if hv_norm <= lambda {
        return vec![0.0; v.len()];
    }
    if lambda == 0.0 {
        return v.to_vec();
    }
    // f(s) = sum (h v / (h s + lambda))^2 - 1 is decreasing with a root in (0, ||v||].
    let f = |s: f64| -> f64 {
        v.iter()
            .zip(h)
            .map(|(a, b)| (a * b / (b * s + lambda)).powi(2))
            .sum::<f64>()
            - 1.0
    };
    let mut lo = 0.0;
    let mut hi = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let s = 0.5 * (lo + hi);
    v.iter().zip(h).map(|(a, b)| b * a / (b + lambda / s)).collect()
}

struct VarState {
    n: usize,
    p: usize,
    q: usize,
    /// Squared residuals, response-major.
    s2: Vec<f64>,
    /// Augmented covariates, column-major with a leading column of ones.
    x: Vec<f64>,
    x_sq_sum: Vec<f64>,
    eta: Vec<f64>,
    e: Vec<f64>,
    /// Per-response contribution to the smooth loss.
    loss: Vec<f64>,
    beta: BetaMatrix,
    x_mean: Vec<f64>,
    grad_scale: f64,
}

impl VarState {
    /// With `centre`, covariates are centred internally and the intercepts
    /// absorb the shift, which decouples the blocks without changing the problem.
    fn new(residuals: &ResidualMatrix, x: &DMatrix<f64>, mut beta: BetaMatrix, centre: bool) -> Self {
        let (n, p, q) = (residuals.n(), residuals.p(), x.ncols());
        let s2: Vec<f64> = residuals.eps_hat.iter().map(|v| v * v).collect();
        let mut xa = vec![1.0; n * (q + 1)];
        xa[n..].copy_from_slice(x.as_slice());
        let mut x_mean = vec![0.0; q + 1];
        if centre && n > 0 {
            for k in 1..=q {
                let col = &mut xa[k * n..(k + 1) * n];
                let m = col.iter().sum::<f64>() / n as f64;
                col.iter_mut().for_each(|v| *v -= m);
                x_mean[k] = m;
            }
            for t in 0..p {
                let shift: f64 = (1..=q).map(|k| beta.get(t, k) * x_mean[k]).sum();
                beta.set(t, 0, beta.get(t, 0) + shift);
            }
        }
        let x_sq_sum = (0..=q)
            .map(|k| xa[k * n..(k + 1) * n].iter().map(|v| v * v).sum())
            .collect();
        let mean_s4 = s2.iter().map(|v| v * v).sum::<f64>() / s2.len().max(1) as f64;
        let mut st = VarState {
            n,
            p,
            q,
            s2,
            x: xa,
            x_sq_sum,
            eta: vec![0.0; n * p],
            e: vec![0.0; n * p],
            loss: vec![0.0; p],
            beta,
            x_mean,
            grad_scale: mean_s4.max(1.0),
        };
        for t in 0..p {
            st.refresh_response(t);
        }
        st
    }

    /// Coefficients on the original covariate scale.
    /// Coefficients on the caller's (uncentred) covariates.
    fn original_beta(&self) -> BetaMatrix {
        let mut beta = self.beta.clone();
        for t in 0..self.p {
            let shift: f64 = (1..=self.q).map(|k| beta.get(t, k) * self.x_mean[k]).sum();
            beta.set(t, 0, beta.get(t, 0) - shift);
        }
        beta
    }

    fn xk(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    fn refresh_response(&mut self, t: usize) {
        let n = self.n;
        let mut loss = 0.0;
        for i in 0..n {
            let mut eta = 0.0;
            for k in 0..=self.q {
                let b = self.beta.get(t, k);
                if b != 0.0 {
                    eta += b * self.x[k * n + i];
                }
            }
            let e = clamped_exp(eta);
            self.eta[t * n + i] = eta;
            self.e[t * n + i] = e;
            let r = self.s2[t * n + i] - e;
            loss += r * r;
        }
        self.loss[t] = loss / (2.0 * n as f64);
    }

    fn penalty(&self, lambda_d: f64) -> f64 {
        lambda_d * (1..=self.q).map(|k| self.beta.group_norm(k)).sum::<f64>()
    }

    fn objective(&self, lambda_d: f64) -> f64 {
        self.loss.iter().sum::<f64>() + self.penalty(lambda_d)
    }

    fn grad_curv(&self, t: usize, k: usize) -> (f64, f64) {
        let n = self.n;
        let xk = self.xk(k);
        let e = &self.e[t * n..(t + 1) * n];
        let s2 = &self.s2[t * n..(t + 1) * n];
        let (mut g, mut h) = (0.0, 0.0);
        for i in 0..n {
            let ei = e[i];
            g += (ei - s2[i]) * ei * xk[i];
            h += 2.0 * ei * ei * xk[i] * xk[i];
        }
        (g / n as f64, h / n as f64)
    }

    /// Loss of response `t` after shifting `beta_tk` by `delta`, with the
    /// updated `eta` and `exp(eta)` written into the buffers.
    fn trial(&self, t: usize, k: usize, delta: f64, eta: &mut [f64], e: &mut [f64]) -> f64 {
        let n = self.n;
        let xk = self.xk(k);
        let mut loss = 0.0;
        for i in 0..n {
            let v = self.eta[t * n + i] + delta * xk[i];
            let ev = clamped_exp(v);
            eta[i] = v;
            e[i] = ev;
            let r = self.s2[t * n + i] - ev;
            loss += r * r;
        }
        loss / (2.0 * n as f64)
    }

    fn block_step(&mut self, k: usize, cfg: &VarConfig) {
        let (n, p) = (self.n, self.p);
        if self.x_sq_sum[k] == 0.0 {
            return;
        }
        let gc: Vec<(f64, f64)> = (0..p).map(|t| self.grad_curv(t, k)).collect();
        let old: Vec<f64> = self.beta.group(k).to_vec();
        let mut proposal = old.clone();
        if k == 0 {
            for t in 0..p {
                let (g, h) = gc[t];
                if h > 0.0 {
                    proposal[t] = old[t] - g / h;
                }
            }
        } else {
            let h: Vec<f64> = gc.iter().map(|v| v.1).collect();
            if h.iter().any(|v| !(*v > 0.0)) {
                return;
            }
            let v: Vec<f64> = (0..p).map(|t| old[t] - gc[t].0 / h[t]).collect();
            proposal = weighted_group_prox(&v, &h, cfg.lambda_d);
        }
        let delta: Vec<f64> = (0..p).map(|t| proposal[t] - old[t]).collect();
        if delta.iter().all(|d| *d == 0.0) {
            return;
        }
        let changed: Vec<usize> = (0..p).filter(|&t| delta[t] != 0.0).collect();
        let old_obj = self.objective(cfg.lambda_d);
        let old_pen_k = if k == 0 { 0.0 } else { cfg.lambda_d * self.beta.group_norm(k) };
        let base = old_obj - old_pen_k - changed.iter().map(|&t| self.loss[t]).sum::<f64>();
        let mut eta_buf = vec![0.0; n * changed.len()];
        let mut e_buf = vec![0.0; n * changed.len()];
        let mut losses = vec![0.0; changed.len()];
        let mut step = 1.0;
        for _ in 0..=cfg.step_halving_max {
            let mut obj = base;
            for (c, &t) in changed.iter().enumerate() {
                let l = self.trial(
                    t,
                    k,
                    step * delta[t],
                    &mut eta_buf[c * n..(c + 1) * n],
                    &mut e_buf[c * n..(c + 1) * n],
                );
                losses[c] = l;
                obj += l;
            }
            if k > 0 {
                let norm = (0..p)
                    .map(|t| (old[t] + step * delta[t]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                obj += cfg.lambda_d * norm;
            }
            if obj <= old_obj {
                for (c, &t) in changed.iter().enumerate() {
                    self.eta[t * n..(t + 1) * n].copy_from_slice(&eta_buf[c * n..(c + 1) * n]);
                    self.e[t * n..(t + 1) * n].copy_from_slice(&e_buf[c * n..(c + 1) * n]);
                    self.loss[t] = losses[c];
                }
                let group = self.beta.group_mut(k);
                for t in 0..p {
                    group[t] = if step == 1.0 {
                        proposal[t]
                    } else {
                        old[t] + step * delta[t]
                    };
                }
                return;
            }
            step *= 0.5;
        }
    }

    fn kkt(&self, lambda_d: f64) -> f64 {
        let p = self.p;
        let mut worst: f64 = 0.0;
        for k in 0..=self.q {
            if self.x_sq_sum[k] == 0.0 {
                continue;
            }
            let g: Vec<f64> = (0..p).map(|t| self.grad_curv(t, k).0).collect();
            let viol = if k == 0 {
                g.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
            } else {
                let norm = self.beta.group_norm(k);
                if norm == 0.0 {
                    g.iter().map(|v| v * v).sum::<f64>().sqrt() - lambda_d
                } else {
                    let b = self.beta.group(k);
                    (0..p)
                        .map(|t| (g[t] + lambda_d * b[t] / norm).powi(2))
                        .sum::<f64>()
                        .sqrt()
                }
            };
            worst = worst.max(viol);
        }
        worst.max(0.0) / self.grad_scale
    }
}
