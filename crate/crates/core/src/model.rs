//! The covariate-dependent Cholesky parameterization and per-subject assembly.
//!
//! A fitted model holds the coefficient tensor `phi[t, j, k]` (regression of
//! response `t` on its predecessor `j`, modulated by covariate `k`, with `k = 0`
//! the population slice) and the log-variance coefficients `beta[t, k]`.
//! For a covariate vector `x` the model yields
//!
//! ```text
//! T(x)_{tj} = -(phi[t,j,0] + sum_k phi[t,j,k] x_k)      j < t,   T(x)_{tt} = 1
//! D(x)_t    = exp(beta[t,0] + sum_k beta[t,k] x_k)
//! Sigma(x)  = T(x)^{-1} D(x) T(x)^{-T},   Sigma(x)^{-1} = T(x)^T D(x)^{-1} T(x)
//! ```
//!
//! All indices in this module are 0-based: responses `t` in `0..p`, predecessors
//! `j < t`, covariate slices `k` in `0..=q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CdcdError, Result};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::sgl::FitDiagnostics;

/// Exponents of the log-variance model are clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
pub const EXP_CLAMP: f64 = 30.0;

#[inline]
pub(crate) fn clamped_exp(eta: f64) -> f64 {
    eta.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// Dense storage of `phi[t, j, k]` for all strictly-lower pairs `j < t`.
///
/// Slices are contiguous: slice `k` holds the `p(p-1)/2` pairs ordered by
/// `t` ascending, then `j` ascending, i.e. pair index `t(t-1)/2 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiTensor {
    p: usize,
    q: usize,
    values: Vec<f64>,
}

#[inline]
pub fn pair_index(t: usize, j: usize) -> usize {
    t * (t - 1) / 2 + j
}

impl PhiTensor {
    pub fn zeros(p: usize, q: usize) -> Self {
        let n_pairs = p * p.saturating_sub(1) / 2;
        PhiTensor {
            p,
            q,
            values: vec![0.0; n_pairs * (q + 1)],
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Number of strictly-lower pairs, `p(p-1)/2`.
    pub fn n_pairs(&self) -> usize {
        self.p * self.p.saturating_sub(1) / 2
    }

    /// Total number of coefficients, `p(p-1)/2 * (q+1)`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat storage index of `(t, j, k)`; fails unless `j < t < p` and `k <= q`.
    pub fn index(&self, t: usize, j: usize, k: usize) -> Result<usize> {
        if t >= self.p || j >= t || k > self.q {
            return Err(CdcdError::input(format!(
                "phi index (t={t}, j={j}, k={k}) outside j < t < {}, k <= {}",
                self.p, self.q
            )));
        }
        Ok(k * self.n_pairs() + pair_index(t, j))
    }

    pub fn get(&self, t: usize, j: usize, k: usize) -> Result<f64> {
        Ok(self.values[self.index(t, j, k)?])
    }

    pub fn set(&mut self, t: usize, j: usize, k: usize, value: f64) -> Result<()> {
        let idx = self.index(t, j, k)?;
        self.values[idx] = value;
        Ok(())
    }

    /// Inverse of [`PhiTensor::index`].
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let n_pairs = self.n_pairs();
        let k = idx / n_pairs;
        let mut pair = idx % n_pairs;
        let mut t = 1;
        while pair >= t {
            pair -= t;
            t += 1;
        }
        (t, pair, k)
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.n_pairs();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.n_pairs();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Frobenius norm of slice `k`.
    pub fn group_norm(&self, k: usize) -> f64 {
        self.slice(k).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Number of exactly nonzero coefficients.
    pub fn support_size(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Covariate slices `k >= 1` with at least one nonzero entry.
    pub fn active_groups(&self) -> Vec<usize> {
        (1..=self.q).filter(|&k| self.slice(k).iter().any(|v| *v != 0.0)).collect()
    }

    /// Nonzero entries as `(t, j, k, value)`, 0-based.
    pub fn nonzeros(&self) -> Vec<(usize, usize, usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(idx, v)| {
                let (t, j, k) = self.coords(idx);
                (t, j, k, *v)
            })
            .collect()
    }

    /// `T_k` as a `p x p` matrix: unit diagonal for `k = 0`, zero diagonal
    /// otherwise, `-phi[t,j,k]` below the diagonal.
    pub fn t_slice(&self, k: usize) -> DMatrix<f64> {
        let p = self.p;
        let mut m = if k == 0 {
            DMatrix::identity(p, p)
        } else {
            DMatrix::zeros(p, p)
        };
        let s = self.slice(k);
        for t in 1..p {
            for j in 0..t {
                m[(t, j)] = -s[pair_index(t, j)];
            }
        }
        m
    }
}

/// Log-variance coefficients `beta[t, k]`, `k = 0` the intercept.
///
/// Stored covariate-major so that each group `beta[., k]` is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMatrix {
    p: usize,
    q: usize,
    values: Vec<f64>,
}

impl BetaMatrix {
    pub fn zeros(p: usize, q: usize) -> Self {
        BetaMatrix {
            p,
            q,
            values: vec![0.0; p * (q + 1)],
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.values[k * self.p + t]
    }

    #[inline]
    pub fn set(&mut self, t: usize, k: usize, value: f64) {
        self.values[k * self.p + t] = value;
    }

    pub fn group(&self, k: usize) -> &[f64] {
        &self.values[k * self.p..(k + 1) * self.p]
    }

    pub fn group_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.p..(k + 1) * self.p]
    }

    pub fn group_norm(&self, k: usize) -> f64 {
        self.group(k).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Linear predictor `beta[t,0] + sum_k beta[t,k] x_k`.
    pub fn linear_predictor(&self, t: usize, x: &[f64]) -> f64 {
        let mut eta = self.get(t, 0);
        for (k, xk) in x.iter().enumerate() {
            eta += self.get(t, k + 1) * xk;
        }
        eta
    }
}

/// Column standardization applied before fitting.
///
/// The stored coefficients refer to `y_s = (y - mean) / y_scale` and
/// `x_s = (x - x_center) / x_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub y_scale: Vec<f64>,
    pub x_center: Vec<f64>,
    pub x_scale: Vec<f64>,
}

impl Scaling {
    pub fn standardize_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.x_center)
            .zip(&self.x_scale)
            .map(|((v, c), s)| (v - c) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub cholesky: FitDiagnostics,
    pub variance: FitDiagnostics,
}

/// A fitted covariate-dependent Cholesky decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyModel {
    pub phi: PhiTensor,
    pub beta: BetaMatrix,
    /// Empirical response means removed before fitting (original scale).
    pub column_means: Vec<f64>,
    pub scaling: Option<Scaling>,
    pub hyperparams: Hyperparams,
    pub diagnostics: ModelDiagnostics,
}

/// Per-subject covariance assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectCov {
    pub sigma: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub t_matrix: DMatrix<f64>,
    pub d_diag: DVector<f64>,
}

impl SubjectCov {
    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.sigma)
    }
}

impl CholeskyModel {
    pub fn new(phi: PhiTensor, beta: BetaMatrix) -> Result<Self> {
        check_dim("model p (phi vs beta)", phi.p(), beta.p())?;
        check_dim("model q (phi vs beta)", phi.q(), beta.q())?;
        if !beta.is_finite() || phi.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(CdcdError::input("model coefficients must be finite"));
        }
        let p = phi.p();
        Ok(CholeskyModel {
            phi,
            beta,
            column_means: vec![0.0; p],
            scaling: None,
            hyperparams: Hyperparams::default(),
            diagnostics: ModelDiagnostics::default(),
        })
    }

    pub fn p(&self) -> usize {
        self.phi.p()
    }

    pub fn q(&self) -> usize {
        self.phi.q()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        check_dim("covariate vector", self.q(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CdcdError::input("covariate vector contains non-finite values"));
        }
        Ok(())
    }

    /// Unit lower-triangular `T(x)`.
    pub fn build_t(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        let p = self.p();
        let mut t_mat = DMatrix::identity(p, p);
        let n_pairs = self.phi.n_pairs();
        let vals = self.phi.as_slice();
        for t in 1..p {
            for j in 0..t {
                let pair = pair_index(t, j);
                let mut f = vals[pair];
                for (k, xk) in x.iter().enumerate() {
                    f += vals[(k + 1) * n_pairs + pair] * xk;
                }
                t_mat[(t, j)] = -f;
            }
        }
        Ok(t_mat)
    }

    /// Diagonal of `D(x)`, every entry in `[e^-30, e^30]`.
    pub fn build_d(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_x(x)?;
        let p = self.p();
        Ok(DVector::from_iterator(
            p,
            (0..p).map(|t| clamped_exp(self.beta.linear_predictor(t, x))),
        ))
    }

    /// Covariance and precision of a subject with covariates `x` (model scale).
    pub fn assemble(&self, x: &[f64]) -> Result<SubjectCov> {
        let t_mat = self.build_t(x)?;
        let d = self.build_d(x)?;
        if d.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(CdcdError::numerical("non-positive variance in D(x)"));
        }
        assemble_from_factors(t_mat, d)
    }

    /// Like [`CholeskyModel::assemble`] but takes covariates on the original
    /// scale and returns matrices for the original (unstandardized) responses.
    pub fn assemble_original(&self, x_raw: &[f64]) -> Result<SubjectCov> {
        let Some(scaling) = &self.scaling else {
            return self.assemble(x_raw);
        };
        self.check_x(x_raw)?;
        let cov = self.assemble(&scaling.standardize_x(x_raw))?;
        let s = &scaling.y_scale;
        let p = self.p();
        let mut out = cov;
        for a in 0..p {
            for b in 0..p {
                out.sigma[(a, b)] *= s[a] * s[b];
                out.precision[(a, b)] /= s[a] * s[b];
                out.t_matrix[(a, b)] *= s[a] / s[b];
            }
            out.d_diag[a] *= s[a] * s[a];
        }
        Ok(out)
    }

    /// Subtracts the stored column means from `y_raw` (rows are subjects).
    pub fn predict_mean_adjust(&self, y_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("response columns", self.p(), y_raw.ncols())?;
        if y_raw.nrows() == 0 {
            return Err(CdcdError::input("at least one subject is required"));
        }
        Ok(subtract_means(y_raw, &self.column_means))
    }
}

/// Builds `Sigma = T^{-1} D T^{-T}` by two triangular solves and
/// `Sigma^{-1} = T^T D^{-1} T` directly.
pub(crate) fn assemble_from_factors(t_mat: DMatrix<f64>, d: DVector<f64>) -> Result<SubjectCov> {
    let p = t_mat.nrows();
    let mut precision = DMatrix::zeros(p, p);
    for t in 0..p {
        let w = 1.0 / d[t];
        for a in 0..=t {
            let ta = t_mat[(t, a)];
            if ta == 0.0 {
                continue;
            }
            for b in 0..=a {
                precision[(a, b)] += ta * t_mat[(t, b)] * w;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            precision[(b, a)] = precision[(a, b)];
        }
    }
    let w = t_mat
        .solve_lower_triangular(&DMatrix::from_diagonal(&d))
        .ok_or_else(|| CdcdError::numerical("singular T(x)"))?;
    let mut sigma = t_mat
        .solve_lower_triangular(&w.transpose())
        .ok_or_else(|| CdcdError::numerical("singular T(x)"))?;
    symmetrize(&mut sigma);
    Ok(SubjectCov {
        sigma,
        precision,
        t_matrix: t_mat,
        d_diag: d,
    })
}

pub fn column_means(y: &DMatrix<f64>) -> Vec<f64> {
    let n = y.nrows().max(1) as f64;
    (0..y.ncols()).map(|c| y.column(c).sum() / n).collect()
}

pub(crate) fn subtract_means(y: &DMatrix<f64>, means: &[f64]) -> DMatrix<f64> {
    let mut out = y.clone();
    for (c, m) in means.iter().enumerate() {
        for v in out.column_mut(c).iter_mut() {
            *v -= m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model_with(p: usize, q: usize) -> CholeskyModel {
        CholeskyModel::new(PhiTensor::zeros(p, q), BetaMatrix::zeros(p, q)).unwrap()
    }

    #[test]
    fn index_rejects_upper_pairs() {
        let phi = PhiTensor::zeros(4, 2);
        assert!(phi.index(2, 2, 0).is_err());
        assert!(phi.index(1, 3, 0).is_err());
        assert!(phi.index(3, 0, 3).is_err());
        assert_eq!(phi.len(), 6 * 3);
        for idx in 0..phi.len() {
            let (t, j, k) = phi.coords(idx);
            assert_eq!(phi.index(t, j, k).unwrap(), idx);
        }
    }

    #[test]
    fn zero_model_gives_identity() {
        let m = model_with(4, 2);
        let t = m.build_t(&[0.3, -1.2]).unwrap();
        assert_eq!(t, DMatrix::identity(4, 4));
        let d = m.build_d(&[0.3, -1.2]).unwrap();
        assert!(d.iter().all(|v| *v == 1.0));
        let cov = m.assemble(&[1.0, 2.0]).unwrap();
        assert_eq!(cov.sigma, DMatrix::identity(4, 4));
        assert_eq!(cov.precision, DMatrix::identity(4, 4));
    }

    #[test]
    fn build_t_linear_combination() {
        let mut m = model_with(2, 1);
        m.phi.set(1, 0, 0, 0.2).unwrap();
        m.phi.set(1, 0, 1, 0.3).unwrap();
        let t = m.build_t(&[1.0]).unwrap();
        assert_eq!(t[(0, 0)], 1.0);
        assert_eq!(t[(1, 1)], 1.0);
        assert_eq!(t[(0, 1)], 0.0);
        assert!((t[(1, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn x_zero_selects_population_slice() {
        let mut m = model_with(3, 2);
        let vals = [0.4, -0.7, 1.1, 0.25, -0.5, 0.9, 0.3, 0.2, -0.1];
        m.phi.as_mut_slice().copy_from_slice(&vals);
        let t = m.build_t(&[0.0, 0.0]).unwrap();
        assert_eq!(t, m.phi.t_slice(0));
        assert!((t[(1, 0)] + 0.4).abs() < 1e-15);
        assert!((t[(2, 0)] - 0.7).abs() < 1e-15);
        assert!((t[(2, 1)] + 1.1).abs() < 1e-15);
    }

    #[test]
    fn build_d_values() {
        let mut m = model_with(3, 1);
        for t in 0..3 {
            m.beta.set(t, 0, 4.0_f64.ln());
        }
        let d = m.build_d(&[0.7]).unwrap();
        assert!(d.iter().all(|v| (v - 4.0).abs() < 1e-12));

        let mut m = model_with(1, 1);
        m.beta.set(0, 1, 1.0);
        let d = m.build_d(&[2.0]).unwrap();
        assert!((d[0] - 7.38905609893065).abs() < 1e-12);
    }

    #[test]
    fn build_d_clamps_exponent() {
        let mut m = model_with(1, 1);
        m.beta.set(0, 1, 1.0);
        let d = m.build_d(&[1000.0]).unwrap();
        assert_eq!(d[0], 30.0_f64.exp());
        let d = m.build_d(&[-1000.0]).unwrap();
        assert_eq!(d[0], (-30.0_f64).exp());
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let m = model_with(3, 2);
        assert!(matches!(m.build_t(&[1.0]), Err(CdcdError::Dimension { .. })));
        assert!(m.build_d(&[1.0, 2.0, 3.0]).is_err());
        assert!(m.assemble(&[f64::NAN, 0.0]).is_err());
        assert!(m.predict_mean_adjust(&DMatrix::zeros(2, 4)).is_err());
        assert!(CholeskyModel::new(PhiTensor::zeros(3, 2), BetaMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn two_by_two_sigma_by_hand() {
        // T21 = -0.5, D = diag(1, 0.75). Direct algebra:
        // T^{-1} = [[1,0],[0.5,1]], Sigma = T^{-1} D T^{-T} = [[1, .5], [.5, .25 + .75]].
        let mut m = model_with(2, 0);
        m.phi.set(1, 0, 0, 0.5).unwrap();
        m.beta.set(1, 0, 0.75_f64.ln());
        let cov = m.assemble(&[]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert!((&cov.sigma - &expected).abs().max() < 1e-12);
        let prod = &cov.sigma * &cov.precision;
        assert!((prod - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    }

    /// Neumann-series route: Sigma = (sum_j F^j) D (sum_j F^j)^T with T = I - F.
    fn neumann_sigma(t: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
        let p = t.nrows();
        let f = DMatrix::<f64>::identity(p, p) - t;
        let mut series = DMatrix::<f64>::identity(p, p);
        let mut power = DMatrix::<f64>::identity(p, p);
        for _ in 1..p {
            power = &power * &f;
            series += &power;
        }
        &series * DMatrix::from_diagonal(d) * series.transpose()
    }

    #[test]
    fn mean_adjust_examples() {
        let mut m = model_with(3, 0);
        let y = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 0.5, 5.0, 3.0, -0.5]);
        m.column_means = column_means(&y);
        assert_eq!(m.column_means, vec![5.0, 2.0, 0.0]);
        let adj = m.predict_mean_adjust(&y).unwrap();
        assert_eq!(adj.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(adj.column(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0]);
        assert_eq!(adj.column(2).iter().copied().collect::<Vec<_>>(), vec![0.5, -0.5]);
    }

    #[test]
    fn original_scale_assembly_rescales() {
        let mut m = model_with(2, 1);
        m.phi.set(1, 0, 0, 0.5).unwrap();
        m.phi.set(1, 0, 1, 0.2).unwrap();
        m.beta.set(0, 1, 0.3);
        m.scaling = Some(Scaling {
            y_scale: vec![2.0, 0.5],
            x_center: vec![1.0],
            x_scale: vec![4.0],
        });
        let raw = m.assemble_original(&[3.0]).unwrap();
        let std = m.assemble(&[0.5]).unwrap();
        assert!((raw.sigma[(0, 1)] - std.sigma[(0, 1)] * 1.0).abs() < 1e-12);
        assert!((raw.sigma[(0, 0)] - std.sigma[(0, 0)] * 4.0).abs() < 1e-12);
        let prod = &raw.sigma * &raw.precision;
        assert!((prod - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-10);
        // T_raw Sigma_raw T_raw^T = D_raw
        let back = &raw.t_matrix * &raw.sigma * raw.t_matrix.transpose();
        assert!((back[(1, 0)]).abs() < 1e-10);
        assert!((back[(1, 1)] - raw.d_diag[1]).abs() < 1e-10);
    }

    fn arb_model(max_p: usize, max_q: usize) -> impl Strategy<Value = (CholeskyModel, Vec<f64>, Vec<f64>)> {
        (2..=max_p, 0..=max_q).prop_flat_map(|(p, q)| {
            let n_phi = p * (p - 1) / 2 * (q + 1);
            (
                proptest::collection::vec(-1.0..1.0f64, n_phi),
                proptest::collection::vec(-0.5..0.5f64, p * (q + 1)),
                proptest::collection::vec(-2.0..2.0f64, q),
                proptest::collection::vec(-2.0..2.0f64, q),
            )
                .prop_map(move |(phi_vals, beta_vals, x1, x2)| {
                    let mut phi = PhiTensor::zeros(p, q);
                    phi.as_mut_slice().copy_from_slice(&phi_vals);
                    let mut beta = BetaMatrix::zeros(p, q);
                    for k in 0..=q {
                        for t in 0..p {
                            beta.set(t, k, beta_vals[k * p + t]);
                        }
                    }
                    (CholeskyModel::new(phi, beta).unwrap(), x1, x2)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn assembled_sigma_is_spd_and_inverse((m, x, _) in arb_model(6, 3)) {
            let cov = m.assemble(&x).unwrap();
            let p = m.p();
            prop_assert!(cov.min_eigenvalue() > 0.0);
            for a in 0..p {
                for b in 0..p {
                    prop_assert!((cov.sigma[(a, b)] - cov.sigma[(b, a)]).abs() <= 1e-10);
                }
            }
            let inv = cov.sigma.clone().try_inverse().unwrap();
            let rel = (&inv - &cov.precision).norm() / cov.precision.norm();
            prop_assert!(rel < 1e-6, "relative inverse error {rel}");
            let neumann = neumann_sigma(&cov.t_matrix, &cov.d_diag);
            let rel = (&neumann - &cov.sigma).norm() / cov.sigma.norm();
            prop_assert!(rel < 1e-10);
        }

        #[test]
        fn build_t_is_affine((m, x1, x2) in arb_model(5, 3), alpha in 0.0..1.0f64) {
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let t_mix = m.build_t(&mix).unwrap();
            let t1 = m.build_t(&x1).unwrap();
            let t2 = m.build_t(&x2).unwrap();
            let combo = t1 * alpha + t2 * (1.0 - alpha);
            prop_assert!((t_mix - combo).abs().max() < 1e-12);
        }

        #[test]
        fn zero_covariates_recover_population((m, _, _) in arb_model(5, 3)) {
            let x0 = vec![0.0; m.q()];
            prop_assert_eq!(m.build_t(&x0).unwrap(), m.phi.t_slice(0));
            let d = m.build_d(&x0).unwrap();
            for t in 0..m.p() {
                prop_assert!((d[t] - m.beta.get(t, 0).exp()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn precision_matches_inverse_at_p_100() {
        let p = 100;
        let mut m = model_with(p, 1);
        let mut state = 17u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for v in m.phi.as_mut_slice().iter_mut() {
            *v = 0.1 * next();
        }
        for t in 0..p {
            m.beta.set(t, 0, 0.5 * next());
            m.beta.set(t, 1, 0.5 * next());
        }
        let cov = m.assemble(&[0.8]).unwrap();
        let inv = cov.sigma.clone().try_inverse().unwrap();
        let rel = (&inv - &cov.precision).norm() / cov.precision.norm();
        assert!(rel < 1e-6, "relative error {rel}");
        assert!(cov.min_eigenvalue() > 0.0);
    }
}
