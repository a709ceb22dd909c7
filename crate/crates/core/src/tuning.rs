//! Cross-validated selection of the penalty levels.
//!
//! The Cholesky penalties are parameterized as `lambda = alpha * lambda0` and
//! `lambda_g = (1 - alpha) * lambda0`. For every `alpha` a warm-started path
//! runs down a log-spaced `lambda0` grid; candidates are scored by held-out
//! prediction error of the sequential regressions. The variance penalty is
//! tuned afterwards on the fixed residuals.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, CdcdError, Result};
use crate::linalg::log_spaced_desc;
use crate::model::{pair_index, PhiTensor};
use crate::sgl::{soft_threshold, FitDiagnostics, InteractionDesign, SglConfig, SglSolver};
use crate::variance::{fit_variance, lambda_d_max, var_loss, ResidualMatrix, VarConfig};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// `n` mixing weights; five gives [`DEFAULT_ALPHAS`], otherwise evenly spaced
/// over `[0.05, 0.95]`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        5 => DEFAULT_ALPHAS.to_vec(),
        _ => (0..n).map(|i| 0.05 + 0.9 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// `floor(sqrt(n) / max(ln p, ln q)) * c`, the support size at which the
/// theoretical error bounds stop shrinking.
pub fn s_lambda_cap_heuristic(n: usize, p: usize, q: usize, c: f64) -> usize {
    let denom = (p.max(2) as f64).ln().max((q.max(2) as f64).ln());
    ((n as f64).sqrt() / denom).floor() as usize * c.max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub alphas: Vec<f64>,
    /// Decreasing `lambda0` values, one vector per alpha.
    pub lambda0_per_alpha: Vec<Vec<f64>>,
    /// Candidates whose fitted support exceeds this are not selectable.
    pub s_lambda_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub alpha: f64,
    pub lambda0: f64,
}

impl Candidate {
    pub fn lambda(&self) -> f64 {
        self.alpha * self.lambda0
    }

    pub fn lambda_g(&self) -> f64 {
        (1.0 - self.alpha) * self.lambda0
    }

    pub fn config(&self, template: &SglConfig) -> SglConfig {
        SglConfig {
            lambda: self.lambda(),
            lambda_g: self.lambda_g(),
            ..template.clone()
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        check_dim("lambda0 grids", self.alphas.len(), self.lambda0_per_alpha.len())?;
        if self.alphas.is_empty() {
            return Err(CdcdError::input("tuning grid has no alpha values"));
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(CdcdError::input("alpha values must lie in (0, 1]"));
        }
        if self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CdcdError::input("alpha values must be strictly increasing"));
        }
        for g in &self.lambda0_per_alpha {
            if g.is_empty() || g.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(CdcdError::input("lambda0 grids must be non-empty and nonnegative"));
            }
            if g.windows(2).any(|w| w[0] <= w[1]) {
                return Err(CdcdError::input("lambda0 grids must be strictly decreasing"));
            }
        }
        Ok(())
    }

    /// All candidates, alpha-major.
    pub fn candidates(&self) -> Vec<Candidate> {
        self.alphas
            .iter()
            .zip(&self.lambda0_per_alpha)
            .flat_map(|(&alpha, grid)| grid.iter().map(move |&lambda0| Candidate { alpha, lambda0 }))
            .collect()
    }

    fn offset(&self, a: usize) -> usize {
        self.lambda0_per_alpha[..a].iter().map(Vec::len).sum()
    }
}

/// Smallest `lambda0` at which the fit with `(alpha lambda0, (1 - alpha) lambda0)`
/// is identically zero.
pub fn lambda0_max(design: &InteractionDesign, alpha: f64) -> f64 {
    let (p, q, n) = (design.p(), design.q(), design.n() as f64);
    let grad = |t: usize, j: usize, k: usize| -> f64 {
        crate::linalg::dot(design.interaction(j, k), design.y_col(t)) / n
    };
    let mut best: f64 = 0.0;
    let mut g0: f64 = 0.0;
    for t in 1..p {
        for j in 0..t {
            g0 = g0.max(grad(t, j, 0).abs());
        }
    }
    if alpha > 0.0 {
        best = best.max(g0 / alpha);
    }
    for k in 1..=q {
        let g: Vec<f64> = (1..p).flat_map(|t| (0..t).map(move |j| (t, j))).map(|(t, j)| grad(t, j, k)).collect();
        let excess = |l0: f64| -> f64 {
            let s: f64 = g.iter().map(|v| soft_threshold(*v, alpha * l0).powi(2)).sum();
            s.sqrt() - (1.0 - alpha) * l0
        };
        let gmax = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if gmax == 0.0 {
            continue;
        }
        // excess is decreasing; at gmax / alpha the thresholded gradient vanishes,
        // and for alpha = 0 the root is the plain group norm.
        let mut hi = if alpha > 0.0 {
            gmax / alpha
        } else {
            g.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        if excess(hi) > 0.0 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        best = best.max(hi);
    }
    best * (1.0 + 1e-10)
}

pub fn build_grid_for_design(
    design: &InteractionDesign,
    alphas: &[f64],
    n_lambda0: usize,
    min_ratio: f64,
    cap: Option<usize>,
) -> Result<TuningGrid> {
    if n_lambda0 == 0 {
        return Err(CdcdError::input("lambda0 grid needs at least one point"));
    }
    if !(min_ratio > 0.0 && min_ratio < 1.0) {
        return Err(CdcdError::input("lambda0 ratio must lie in (0, 1)"));
    }
    let mut lambda0_per_alpha = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let top = lambda0_max(design, a);
        let grid = if top > 0.0 {
            log_spaced_desc(top, min_ratio, n_lambda0)
        } else {
            vec![0.0]
        };
        lambda0_per_alpha.push(grid);
    }
    let grid = TuningGrid {
        alphas: alphas.to_vec(),
        lambda0_per_alpha,
        s_lambda_cap: cap,
    };
    grid.validate()?;
    Ok(grid)
}

/// Grid with `n_alphas` mixing weights and `n_lambda0` points per path down
/// to `1e-3 * lambda0_max(alpha)`.
pub fn build_grid(dataset: &Dataset, n_alphas: usize, n_lambda0: usize, cap: Option<usize>) -> Result<TuningGrid> {
    let design = InteractionDesign::from_dataset(dataset)?;
    build_grid_for_design(&design, &alpha_grid(n_alphas), n_lambda0, 1e-3, cap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda: f64,
    pub lambda_g: f64,
    /// Support of the full-data fit (absent once the path was truncated).
    pub support: Option<usize>,
    /// The full-data fit ran; false past a support-cap or early-stopping cut.
    #[serde(default)]
    pub evaluated: bool,
    pub feasible: bool,
    pub mean_loss: Option<f64>,
    pub se_loss: Option<f64>,
    pub fold_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: usize,
    pub seed: u64,
    /// Fold of each subject.
    pub fold_ids: Vec<usize>,
    pub candidates: Vec<CandidateResult>,
    pub selected: usize,
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda: f64,
    pub lambda_g: f64,
    pub s_lambda_cap: Option<usize>,
    /// Fits (full data and folds) that stopped at the sweep limit.
    pub unconverged_fits: usize,
}

/// Seeded random partition of `n` subjects into `folds` groups of nearly equal size.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(CdcdError::input("cross-validation needs at least 2 folds"));
    }
    if n < 2 * folds {
        return Err(CdcdError::input(format!(
            "{n} subjects are too few for {folds} folds (each fold needs at least 2)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut ids = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ids[i] = pos % folds;
    }
    Ok(ids)
}

fn split(fold_ids: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, &f) in fold_ids.iter().enumerate() {
        if f == fold {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn check_folds(n: usize, fold_ids: &[usize]) -> Result<usize> {
    check_dim("fold assignment", n, fold_ids.len())?;
    let folds = fold_ids.iter().copied().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(CdcdError::input("cross-validation needs at least 2 folds"));
    }
    for f in 0..folds {
        let size = fold_ids.iter().filter(|&&v| v == f).count();
        if size < 2 || n - size < 2 {
            return Err(CdcdError::input(format!("fold {f} has fewer than 2 subjects")));
        }
    }
    Ok(folds)
}

/// Sparse copy of a coefficient tensor.
#[derive(Debug, Clone)]
struct SparsePhi {
    p: usize,
    q: usize,
    entries: Vec<(usize, f64)>,
}

impl SparsePhi {
    fn from_phi(phi: &PhiTensor) -> Self {
        SparsePhi {
            p: phi.p(),
            q: phi.q(),
            entries: phi
                .as_slice()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        }
    }

    fn to_phi(&self) -> PhiTensor {
        let mut phi = PhiTensor::zeros(self.p, self.q);
        for &(i, v) in &self.entries {
            phi.as_mut_slice()[i] = v;
        }
        phi
    }
}

/// Result of cross-validating the Cholesky penalties, together with the
/// full-data fit at the selected candidate.
#[derive(Debug, Clone)]
pub struct CvFit {
    pub report: CvReport,
    pub phi: PhiTensor,
    pub diagnostics: FitDiagnostics,
}

/// Cross-validation with a seeded random fold assignment.
pub fn cross_validate(dataset: &Dataset, grid: &TuningGrid, folds: usize, seed: u64) -> Result<CvReport> {
    let fold_ids = fold_assignment(dataset.n(), folds, seed)?;
    Ok(cross_validate_with_folds(dataset, grid, &fold_ids, seed, &SglConfig::default())?.report)
}

/// Consecutive non-improving penalties after which an alpha path stops.
pub const PATH_PATIENCE: usize = 3;

struct FoldDesigns {
    train: InteractionDesign,
    val: InteractionDesign,
}

/// Cross-validation with explicit fold labels `0..L`.
///
/// Each alpha path runs from the largest penalty downwards with the
/// full-data fit and all fold fits in lockstep. A path ends at the first
/// candidate whose support exceeds the cap, or once its mean validation loss
/// has not improved for [`PATH_PATIENCE`] consecutive penalties; candidates
/// beyond that point are reported as not evaluated.
pub fn cross_validate_with_folds(
    dataset: &Dataset,
    grid: &TuningGrid,
    fold_ids: &[usize],
    seed: u64,
    template: &SglConfig,
) -> Result<CvFit> {
    grid.validate()?;
    let n_folds = check_folds(dataset.n(), fold_ids)?;
    let design = InteractionDesign::from_dataset(dataset)?;
    let candidates = grid.candidates();
    let cap = grid.s_lambda_cap;

    let folds: Vec<FoldDesigns> = (0..n_folds)
        .into_par_iter()
        .map(|f| {
            let (train, val) = split(fold_ids, f);
            Ok(FoldDesigns {
                train: InteractionDesign::from_dataset(&dataset.subset(&train))?,
                val: InteractionDesign::from_dataset(&dataset.subset(&val))?,
            })
        })
        .collect::<Result<_>>()?;
    // Fold fits only need a bound that stops runaway paths; selection
    // feasibility is judged on the full data.
    let fold_limits: Vec<Option<usize>> = folds.iter().map(|f| cap.map(|c| (2 * c).max(f.train.n()))).collect();
    let mut full_solver = SglSolver::new(&design);
    let mut fold_solvers: Vec<SglSolver> = folds.iter().map(|f| SglSolver::new(&f.train)).collect();

    let mut full_fits: Vec<Option<(SparsePhi, FitDiagnostics)>> = vec![None; candidates.len()];
    let mut supports: Vec<Option<usize>> = vec![None; candidates.len()];
    let mut evaluated = vec![false; candidates.len()];
    let mut per_fold: Vec<Vec<Option<f64>>> = vec![vec![None; candidates.len()]; n_folds];
    let mut unconverged = 0;
    for (a, lambdas) in grid.lambda0_per_alpha.iter().enumerate() {
        let alpha = grid.alphas[a];
        let mut warm: Option<PhiTensor> = None;
        let mut fold_warm: Vec<Option<PhiTensor>> = vec![None; n_folds];
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for (l, &lambda0) in lambdas.iter().enumerate() {
            let idx = grid.offset(a) + l;
            let base = Candidate { alpha, lambda0 }.config(template);
            let cfg = SglConfig {
                support_limit: cap,
                ..base.clone()
            };
            let (phi, diag) = full_solver.fit(&cfg, warm.as_ref())?;
            let support = phi.support_size();
            if diag.support_exceeded || cap.is_some_and(|c| support > c) {
                break;
            }
            evaluated[idx] = true;
            unconverged += usize::from(!diag.converged);
            supports[idx] = Some(support);
            full_fits[idx] = Some((SparsePhi::from_phi(&phi), diag));
            warm = Some(phi);

            let outcomes: Vec<Result<(Option<f64>, Option<PhiTensor>, bool)>> = fold_solvers
                .par_iter_mut()
                .zip(fold_warm.par_iter())
                .zip(folds.par_iter().zip(fold_limits.par_iter()))
                .map(|((solver, w), (fd, limit))| {
                    let cfg = SglConfig {
                        support_limit: *limit,
                        ..base.clone()
                    };
                    let (phi, diag) = solver.fit(&cfg, w.as_ref())?;
                    if diag.support_exceeded {
                        return Ok((None, None, false));
                    }
                    Ok((Some(fd.val.loss(&phi)?), Some(phi), diag.converged))
                })
                .collect();
            let mut complete = true;
            let mut total = 0.0;
            for (f, o) in outcomes.into_iter().enumerate() {
                let (loss, phi, converged) = o?;
                match loss {
                    Some(v) => {
                        unconverged += usize::from(!converged);
                        per_fold[f][idx] = Some(v);
                        total += v;
                        fold_warm[f] = phi;
                    }
                    None => complete = false,
                }
            }
            // a fold path that ran away rules out every smaller penalty too
            if !complete {
                break;
            }
            let mean = total / n_folds as f64;
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= PATH_PATIENCE {
                    break;
                }
            }
        }
    }

    let mut results = Vec::with_capacity(candidates.len());
    let mut selected: Option<usize> = None;
    for (idx, c) in candidates.iter().enumerate() {
        let feasible = full_fits[idx].is_some() && per_fold.iter().all(|f| f[idx].is_some());
        let fold_losses: Vec<f64> = if feasible {
            per_fold.iter().filter_map(|f| f[idx]).collect()
        } else {
            Vec::new()
        };
        let (mean, se) = if feasible {
            let (m, sd) = mean_sd(&fold_losses);
            (Some(m), Some(sd / (n_folds as f64).sqrt()))
        } else {
            (None, None)
        };
        if let Some(m) = mean {
            let better = match selected {
                None => true,
                Some(s) => {
                    let best: &CandidateResult = &results[s];
                    let bm = best.mean_loss.unwrap_or(f64::INFINITY);
                    m < bm || (m == bm && c.lambda0 > best.lambda0)
                }
            };
            if better {
                selected = Some(idx);
            }
        }
        results.push(CandidateResult {
            alpha: c.alpha,
            lambda0: c.lambda0,
            lambda: c.lambda(),
            lambda_g: c.lambda_g(),
            support: supports[idx],
            evaluated: evaluated[idx],
            feasible,
            mean_loss: mean,
            se_loss: se,
            fold_losses,
        });
    }
    let sel = selected.ok_or_else(|| CdcdError::input("no feasible tuning candidate"))?;
    let (sparse, diagnostics) = full_fits[sel].take().expect("selected candidate is feasible");
    let c = candidates[sel];
    Ok(CvFit {
        report: CvReport {
            folds: n_folds,
            seed,
            fold_ids: fold_ids.to_vec(),
            candidates: results,
            selected: sel,
            alpha: c.alpha,
            lambda0: c.lambda0,
            lambda: c.lambda(),
            lambda_g: c.lambda_g(),
            s_lambda_cap: cap,
            unconverged_fits: unconverged,
        },
        phi: sparse.to_phi(),
        diagnostics,
    })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarCvReport {
    /// Evaluated penalties (the path stops early once validation loss keeps rising).
    pub lambda_d_grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub se_loss: Vec<f64>,
    pub selected: usize,
    pub lambda_d: f64,
}

/// Consecutive non-improving grid points after which the variance path stops.
pub const VAR_PATIENCE: usize = 3;

/// Selects `lambda_d` by `folds`-fold cross-validation of the variance fit.
pub fn cross_validate_variance(
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let ids = fold_assignment(residuals.n(), folds, seed)?;
    Ok(cross_validate_variance_with(residuals, x, &ids, 20, 1e-3, &VarConfig::default())?.lambda_d)
}

/// Variance cross-validation over `n_grid` log-spaced values from the
/// smallest all-zero `lambda_d` down to `min_ratio` times it. Ties go to the
/// larger penalty; the path stops after [`VAR_PATIENCE`] non-improving points.
pub fn cross_validate_variance_with(
    residuals: &ResidualMatrix,
    x: &DMatrix<f64>,
    fold_ids: &[usize],
    n_grid: usize,
    min_ratio: f64,
    template: &VarConfig,
) -> Result<VarCvReport> {
    check_dim("covariate rows", residuals.n(), x.nrows())?;
    let n_folds = check_folds(residuals.n(), fold_ids)?;
    let top = lambda_d_max(residuals, x)?;
    let grid = if top > 0.0 && n_grid > 0 {
        log_spaced_desc(top * (1.0 + 1e-4), min_ratio, n_grid)
    } else {
        vec![0.0]
    };
    struct FoldData {
        r_train: ResidualMatrix,
        x_train: DMatrix<f64>,
        r_val: ResidualMatrix,
        x_val: DMatrix<f64>,
        warm: Option<crate::model::BetaMatrix>,
    }
    let mut fold_data: Vec<FoldData> = (0..n_folds)
        .map(|f| {
            let (train, val) = split(fold_ids, f);
            FoldData {
                r_train: residuals.subset(&train),
                x_train: x.select_rows(train.iter()),
                r_val: residuals.subset(&val),
                x_val: x.select_rows(val.iter()),
                warm: None,
            }
        })
        .collect();
    // The path walks down the grid on all folds in lockstep and stops once the
    // mean validation loss has failed to improve for `VAR_PATIENCE` points.
    let mut mean_loss = Vec::with_capacity(grid.len());
    let mut se_loss = Vec::with_capacity(grid.len());
    let mut selected = 0;
    let mut stale = 0;
    for (g, &ld) in grid.iter().enumerate() {
        let cfg = VarConfig {
            lambda_d: ld,
            ..template.clone()
        };
        let losses: Vec<Result<f64>> = fold_data
            .par_iter_mut()
            .map(|fd| {
                let (beta, _) = fit_variance(&fd.r_train, &fd.x_train, &cfg, fd.warm.as_ref())?;
                let loss = var_loss(&beta, &fd.r_val, &fd.x_val)?;
                fd.warm = Some(beta);
                Ok(loss)
            })
            .collect();
        let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
        let (m, sd) = mean_sd(&losses);
        mean_loss.push(m);
        se_loss.push(sd / (n_folds as f64).sqrt());
        // Grid is decreasing, so keeping the first minimum favours the larger penalty.
        if m < mean_loss[selected] {
            selected = g;
            stale = 0;
        } else if g > 0 {
            stale += 1;
            if stale >= VAR_PATIENCE {
                break;
            }
        }
    }
    let lambda_d = grid[selected];
    let mut lambda_d_grid = grid;
    lambda_d_grid.truncate(mean_loss.len());
    Ok(VarCvReport {
        lambda_d,
        lambda_d_grid,
        mean_loss,
        se_loss,
        selected,
    })
}

/// Number of `(t, j)` pairs for which some covariate slice is active.
pub fn active_pair_count(phi: &PhiTensor) -> usize {
    let p = phi.p();
    (1..p)
        .flat_map(|t| (0..t).map(move |j| (t, j)))
        .filter(|&(t, j)| (0..=phi.q()).any(|k| phi.as_slice()[k * phi.n_pairs() + pair_index(t, j)] != 0.0))
        .count()
}
