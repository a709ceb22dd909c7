//! Synthetic data with covariate-dependent covariance: AR(1), hub and random
//! Cholesky-factor structures, each switched on by the first covariate.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Truth};
use crate::error::{CdcdError, Result};
use crate::linalg::{min_eigenvalue, modified_cholesky, spd_inverse, symmetrize};
use crate::model::{pair_index, BetaMatrix, PhiTensor};

/// Magnitude below which a true coefficient counts as zero.
pub const SUPPORT_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Ar1,
    Hub,
    Random,
}

impl FromStr for StructureKind {
    type Err = CdcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar1" => Ok(StructureKind::Ar1),
            "hub" => Ok(StructureKind::Hub),
            "random" => Ok(StructureKind::Random),
            other => Err(CdcdError::input(format!(
                "unknown structure '{other}' (expected ar1, hub or random)"
            ))),
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::Ar1 => "ar1",
            StructureKind::Hub => "hub",
            StructureKind::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceStructure {
    pub kind: StructureKind,
    pub p: usize,
    /// AR(1) correlation decay.
    pub rho: f64,
    /// Hub block size; the first member of each block is its hub.
    pub hub_block: usize,
    /// Extra hub precision when the covariate is on.
    pub hub_boost: f64,
    /// Fraction of strictly lower entries of `T_1` that are nonzero (random structure).
    pub edge_fraction: f64,
    pub edge_value: f64,
    /// Seed for the random structure's edge positions.
    pub seed: u64,
}

impl CovarianceStructure {
    pub fn new(kind: StructureKind, p: usize) -> Self {
        CovarianceStructure {
            kind,
            p,
            rho: 0.5,
            hub_block: 10,
            hub_boost: 4.5,
            edge_fraction: 0.05,
            edge_value: -0.5,
            seed: 0,
        }
    }

    pub fn ar1(p: usize) -> Self {
        Self::new(StructureKind::Ar1, p)
    }

    pub fn hub(p: usize) -> Self {
        Self::new(StructureKind::Hub, p)
    }

    pub fn random(p: usize, seed: u64) -> Self {
        CovarianceStructure {
            seed,
            ..Self::new(StructureKind::Random, p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(CdcdError::input("structure needs p >= 2"));
        }
        match self.kind {
            StructureKind::Ar1 => {
                if !(self.rho > -1.0 && self.rho < 1.0) {
                    return Err(CdcdError::input(format!("rho must lie in (-1, 1), got {}", self.rho)));
                }
            }
            StructureKind::Hub => {
                if self.hub_block < 2 || self.p % self.hub_block != 0 {
                    return Err(CdcdError::input(format!(
                        "p = {} must be a multiple of the hub block size {}",
                        self.p, self.hub_block
                    )));
                }
                if !self.hub_boost.is_finite() {
                    return Err(CdcdError::input("hub_boost must be finite"));
                }
            }
            StructureKind::Random => {
                if !(self.edge_fraction > 0.0 && self.edge_fraction < 1.0) {
                    return Err(CdcdError::input(format!(
                        "edge_fraction must lie in (0, 1), got {}",
                        self.edge_fraction
                    )));
                }
                if !self.edge_value.is_finite() {
                    return Err(CdcdError::input("edge_value must be finite"));
                }
            }
        }
        Ok(())
    }

    /// Strictly lower triangular `T_1` of the random structure.
    pub fn random_t1(&self) -> DMatrix<f64> {
        let p = self.p;
        let n_lower = p * (p - 1) / 2;
        let n_edges = ((self.edge_fraction * n_lower as f64).round() as usize).min(n_lower);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut picked = sample(&mut rng, n_lower, n_edges).into_vec();
        picked.sort_unstable();
        let mut t1 = DMatrix::zeros(p, p);
        for idx in picked {
            let (t, j) = unpair(idx);
            t1[(t, j)] = self.edge_value;
        }
        t1
    }
}

fn unpair(mut idx: usize) -> (usize, usize) {
    let mut t = 1;
    while idx >= t {
        idx -= t;
        t += 1;
    }
    (t, idx)
}

/// Covariance `Sigma(x)` and precision `Omega(x)`; only `x[0]` enters.
pub fn sigma_of_x(structure: &CovarianceStructure, x: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    structure.validate()?;
    let x1 = *x
        .first()
        .ok_or_else(|| CdcdError::input("structures need at least one covariate"))?;
    if !x1.is_finite() {
        return Err(CdcdError::input("covariate is not finite"));
    }
    let p = structure.p;
    let (mut sigma, mut omega) = match structure.kind {
        StructureKind::Ar1 => {
            let sigma = DMatrix::from_fn(p, p, |j, k| {
                if j == k {
                    1.0
                } else {
                    structure.rho.powi(j.abs_diff(k) as i32) * x1
                }
            });
            let omega = spd_inverse(&sigma)?;
            (sigma, omega)
        }
        StructureKind::Hub => {
            let b = structure.hub_block;
            let omega = DMatrix::from_fn(p, p, |j, k| {
                let hub_j = j % b == 0;
                if j == k {
                    if hub_j {
                        0.5 + structure.hub_boost * x1
                    } else {
                        0.5
                    }
                } else if j / b == k / b && (hub_j || k % b == 0) {
                    -0.5 * x1
                } else {
                    0.0
                }
            });
            let sigma = spd_inverse(&omega)?;
            (sigma, omega)
        }
        StructureKind::Random => {
            let t = DMatrix::identity(p, p) + structure.random_t1() * x1;
            let t_inv = t
                .solve_lower_triangular(&DMatrix::identity(p, p))
                .ok_or_else(|| CdcdError::numerical("singular Cholesky factor"))?;
            (&t_inv * t_inv.transpose(), t.transpose() * &t)
        }
    };
    symmetrize(&mut sigma);
    symmetrize(&mut omega);
    let min_eig = min_eigenvalue(&sigma);
    if !(min_eig > 1e-8) {
        return Err(CdcdError::numerical(format!(
            "structure is not positive definite at x1 = {x1} (min eigenvalue {min_eig})"
        )));
    }
    Ok((sigma, omega))
}

/// True coefficients from the modified Cholesky factorization at `x1 = 0`
/// and `x1 = 1`; exact for binary `x1`. Coefficients below [`SUPPORT_EPS`]
/// are set to zero.
pub fn true_parameters(structure: &CovarianceStructure, q: usize) -> Result<(PhiTensor, BetaMatrix)> {
    if q == 0 {
        return Err(CdcdError::input("structures need q >= 1"));
    }
    let p = structure.p;
    let mut x = vec![0.0; q];
    let (s0, _) = sigma_of_x(structure, &x)?;
    x[0] = 1.0;
    let (s1, _) = sigma_of_x(structure, &x)?;
    let (t0, d0) = modified_cholesky(&s0)?;
    let (t1, d1) = modified_cholesky(&s1)?;
    let mut phi = PhiTensor::zeros(p, q);
    let n_pairs = phi.n_pairs();
    let vals = phi.as_mut_slice();
    for t in 1..p {
        for j in 0..t {
            let a = -t0[(t, j)];
            let b = -(t1[(t, j)] - t0[(t, j)]);
            let pair = pair_index(t, j);
            vals[pair] = if a.abs() > SUPPORT_EPS { a } else { 0.0 };
            vals[n_pairs + pair] = if b.abs() > SUPPORT_EPS { b } else { 0.0 };
        }
    }
    let mut beta = BetaMatrix::zeros(p, q);
    for t in 0..p {
        let b0 = d0[t].ln();
        let b1 = d1[t].ln() - b0;
        beta.set(t, 0, b0);
        beta.set(t, 1, if b1.abs() > SUPPORT_EPS { b1 } else { 0.0 });
    }
    Ok((phi, beta))
}

/// Coordinates `(t, j, k)` of the nonzero true coefficients.
pub fn true_support(structure: &CovarianceStructure, q: usize) -> Result<Vec<(usize, usize, usize)>> {
    let (phi, _) = true_parameters(structure, q)?;
    Ok(phi.nonzeros().into_iter().map(|(t, j, k, _)| (t, j, k)).collect())
}

/// Ground truth for covariate rows `x` (only the first column enters).
pub fn truth_for(structure: &CovarianceStructure, x: &DMatrix<f64>) -> Result<Truth> {
    let q = x.ncols();
    let (phi, beta) = true_parameters(structure, q)?;
    let mut cache: Vec<(u64, Arc<DMatrix<f64>>, Arc<DMatrix<f64>>)> = Vec::new();
    let mut sigma = Vec::with_capacity(x.nrows());
    let mut precision = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let x1 = x[(i, 0)];
        let hit = cache.iter().position(|c| c.0 == x1.to_bits());
        let pos = match hit {
            Some(pos) => pos,
            None => {
                let mut xv = vec![0.0; q];
                xv[0] = x1;
                let (s, o) = sigma_of_x(structure, &xv)?;
                cache.push((x1.to_bits(), Arc::new(s), Arc::new(o)));
                cache.len() - 1
            }
        };
        sigma.push(cache[pos].1.clone());
        precision.push(cache[pos].2.clone());
    }
    let support = phi.as_slice().iter().map(|v| *v != 0.0).collect();
    Ok(Truth {
        sigma,
        precision,
        phi,
        beta,
        support,
    })
}

/// Draws `n` subjects: `x_ik ~ Bernoulli(0.5)` and `y_i ~ N(0, Sigma(x_i))`.
pub fn generate(structure: &CovarianceStructure, n: usize, q: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || q == 0 {
        return Err(CdcdError::input("simulation needs n >= 1 and q >= 1"));
    }
    structure.validate()?;
    let p = structure.p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, q);
    for i in 0..n {
        for k in 0..q {
            x[(i, k)] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    // Only x1 matters, so two covariance levels cover every subject.
    let mut levels: Vec<(Arc<DMatrix<f64>>, Arc<DMatrix<f64>>, DMatrix<f64>)> = Vec::with_capacity(2);
    for x1 in [0.0, 1.0] {
        let mut xv = vec![0.0; q];
        xv[0] = x1;
        let (s, o) = sigma_of_x(structure, &xv)?;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| CdcdError::numerical("covariance is not positive definite"))?
            .l();
        levels.push((Arc::new(s), Arc::new(o), chol));
    }
    let mut y = DMatrix::zeros(n, p);
    let mut sigma = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    for i in 0..n {
        let level = &levels[usize::from(x[(i, 0)] == 1.0)];
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let yi = &level.2 * z;
        y.row_mut(i).copy_from(&yi.transpose());
        sigma.push(level.0.clone());
        precision.push(level.1.clone());
    }
    let (phi, beta) = true_parameters(structure, q)?;
    let support = phi.as_slice().iter().map(|v| *v != 0.0).collect();
    let mut data = Dataset::new(y, x)?;
    data.truth = Some(Truth {
        sigma,
        precision,
        phi,
        beta,
        support,
    });
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CholeskyModel;

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn ar1_and_random_reduce_to_identity_when_off() {
        for s in [CovarianceStructure::ar1(6), CovarianceStructure::random(6, 3)] {
            let (sigma, omega) = sigma_of_x(&s, &[0.0, 1.0]).unwrap();
            assert!(max_abs_diff(&sigma, &DMatrix::identity(6, 6)) < 1e-15);
            assert!(max_abs_diff(&omega, &DMatrix::identity(6, 6)) < 1e-15);
        }
    }

    #[test]
    fn hub_off_has_constant_diagonal_precision() {
        let (sigma, omega) = sigma_of_x(&CovarianceStructure::hub(10), &[0.0]).unwrap();
        assert!(max_abs_diff(&omega, &(DMatrix::identity(10, 10) * 0.5)) < 1e-15);
        assert!(max_abs_diff(&sigma, &(DMatrix::identity(10, 10) * 2.0)) < 1e-12);
    }

    #[test]
    fn ar1_display() {
        let (sigma, _) = sigma_of_x(&CovarianceStructure::ar1(3), &[1.0]).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        assert!(max_abs_diff(&sigma, &expected) < 1e-15);
    }

    #[test]
    fn hub_block_schur_complement_and_spectrum() {
        let (_, omega) = sigma_of_x(&CovarianceStructure::hub(10), &[1.0]).unwrap();
        // Schur complement of the leaves in the hub entry: 5 - 9 * 0.25 / 0.5.
        let leaves = omega.view((1, 1), (9, 9)).into_owned();
        let cross = omega.view((0, 1), (1, 9)).into_owned();
        let leaves_inv = spd_inverse(&leaves).unwrap();
        let schur = omega[(0, 0)] - (&cross * leaves_inv * cross.transpose())[(0, 0)];
        assert!((schur - 0.5).abs() < 1e-12);
        // Spectrum oracle: the hub/leaf-sum subspace gives a 2x2 block
        // [[5, -1.5], [-1.5, 0.5]]; the other leaf directions have eigenvalue 0.5.
        let small = (5.5 - (4.5f64.powi(2) + 4.0 * 2.25).sqrt()) / 2.0;
        assert!((min_eigenvalue(&omega) - small).abs() < 1e-12);
    }

    #[test]
    fn true_support_shapes() {
        let (phi, beta) = true_parameters(&CovarianceStructure::ar1(3), 4).unwrap();
        assert!(phi.slice(0).iter().all(|v| *v == 0.0));
        // Factorizing the 3x3 AR(1) matrix: each coordinate regresses on its predecessor with 0.5.
        assert!((phi.get(1, 0, 1).unwrap() - 0.5).abs() < 1e-12);
        assert!((phi.get(2, 1, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(phi.get(2, 0, 1).unwrap(), 0.0);
        for k in 2..=4 {
            assert!(phi.slice(k).iter().all(|v| *v == 0.0));
        }
        assert_eq!(beta.get(0, 1), 0.0);
        assert!((beta.get(1, 1) - 0.75f64.ln()).abs() < 1e-12);

        let s = CovarianceStructure::random(20, 9);
        let t1 = s.random_t1();
        let support = true_support(&s, 2).unwrap();
        let expected: Vec<_> = (1..20)
            .flat_map(|t| (0..t).map(move |j| (t, j)))
            .filter(|&(t, j)| t1[(t, j)] != 0.0)
            .map(|(t, j)| (t, j, 1))
            .collect();
        let mut got = support.clone();
        got.sort();
        let mut exp = expected.clone();
        exp.sort();
        assert_eq!(got, exp);
        assert_eq!(expected.len(), (0.05f64 * 190.0).round() as usize);
    }

    #[test]
    fn hub_truth_is_leaf_on_hub() {
        let (phi, beta) = true_parameters(&CovarianceStructure::hub(20), 2).unwrap();
        assert!(phi.slice(0).iter().all(|v| *v == 0.0));
        let nz = phi.nonzeros();
        assert_eq!(nz.len(), 18);
        for (t, j, k, v) in nz {
            assert_eq!(k, 1);
            assert_eq!(j, (t / 10) * 10);
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(beta.group(1).iter().all(|v| *v == 0.0));
        assert!(beta.group(0).iter().all(|v| (v - 2f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn truth_round_trips_through_model() {
        for s in [
            CovarianceStructure::ar1(8),
            CovarianceStructure::hub(10),
            CovarianceStructure::random(8, 4),
        ] {
            let (phi, beta) = true_parameters(&s, 2).unwrap();
            let model = CholeskyModel::new(phi, beta).unwrap();
            for x1 in [0.0, 1.0] {
                let (sigma, _) = sigma_of_x(&s, &[x1, 1.0]).unwrap();
                let t = model.build_t(&[x1, 1.0]).unwrap();
                let d = &t * &sigma * t.transpose();
                for i in 0..s.p {
                    for j in 0..s.p {
                        if i != j {
                            assert!(d[(i, j)].abs() < 1e-10);
                        }
                    }
                }
                let cov = model.assemble(&[x1, 1.0]).unwrap();
                assert!(max_abs_diff(&cov.sigma, &sigma) < 1e-10);
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_consistent() {
        let s = CovarianceStructure::ar1(5);
        let a = generate(&s, 50, 3, 11).unwrap();
        let b = generate(&s, 50, 3, 11).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
        let c = generate(&s, 50, 3, 12).unwrap();
        assert_ne!(a.y, c.y);
        let truth = a.truth.as_ref().unwrap();
        assert_eq!(truth.sigma.len(), 50);
        for i in 0..50 {
            let (sigma, _) = sigma_of_x(&s, &a.x_row(i)).unwrap();
            assert_eq!(*truth.sigma[i], sigma);
        }
    }

    #[test]
    fn large_sample_moments() {
        let s = CovarianceStructure::ar1(5);
        let data = generate(&s, 20000, 2, 5).unwrap();
        let mean_x = data.x.iter().sum::<f64>() / data.x.len() as f64;
        assert!((mean_x - 0.5).abs() < 0.01);
        let rows: Vec<usize> = (0..20000).filter(|&i| data.x[(i, 0)] == 1.0).collect();
        let y1 = data.y.select_rows(rows.iter());
        let cov = y1.transpose() * &y1 / rows.len() as f64;
        let (target, _) = sigma_of_x(&s, &[1.0, 0.0]).unwrap();
        assert!(max_abs_diff(&cov, &target) < 0.05);
    }

    #[test]
    fn every_structure_is_positive_definite() {
        for seed in 0..20 {
            for s in [
                CovarianceStructure::ar1(30),
                CovarianceStructure::hub(30),
                CovarianceStructure::random(30, seed),
            ] {
                for x1 in [0.0, 1.0] {
                    let (sigma, omega) = sigma_of_x(&s, &[x1]).unwrap();
                    assert!(min_eigenvalue(&sigma) > 1e-8);
                    assert!(min_eigenvalue(&omega) > 1e-8);
                }
            }
        }
    }

    #[test]
    fn invalid_structures() {
        let mut s = CovarianceStructure::hub(15);
        assert!(sigma_of_x(&s, &[1.0]).is_err());
        s = CovarianceStructure::ar1(4);
        s.rho = 1.0;
        assert!(s.validate().is_err());
        assert!(generate(&CovarianceStructure::ar1(4), 0, 1, 0).is_err());
        assert!("banded".parse::<StructureKind>().is_err());
        assert_eq!("AR1".parse::<StructureKind>().unwrap(), StructureKind::Ar1);
    }
}
