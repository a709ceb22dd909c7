//! Helpers shared by the integration tests: random instances and an
//! accelerated proximal-gradient solver for the sparse-group-lasso objective
//! that is built directly from the data, without the library's solver.

#![allow(dead_code)]

use cdcd::PhiTensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
}

pub fn binary(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
}

/// Regressors of response `t`: columns `y_j * x_k` ordered by `k`, then `j < t`,
/// with `x_0 = 1`.
pub fn regressors(y: &DMatrix<f64>, x: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let n = y.nrows();
    let q = x.ncols();
    DMatrix::from_fn(n, t * (q + 1), |i, c| {
        let (k, j) = (c / t, c % t);
        let xk = if k == 0 { 1.0 } else { x[(i, k - 1)] };
        y[(i, j)] * xk
    })
}

pub struct OracleFit {
    pub phi: PhiTensor,
    pub iterations: usize,
    pub objective: f64,
}

fn soft(a: f64, l: f64) -> f64 {
    a.signum() * (a.abs() - l).max(0.0)
}

/// Accelerated proximal gradient with adaptive restart on
/// `1/(2n) sum_t ||y_t - Z_t theta_t||^2 + lambda ||theta||_1 + lambda_g sum_{k>=1} ||theta_(k)||_2`.
pub fn fista_sgl(y: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64, lambda_g: f64, max_iter: usize) -> OracleFit {
    let (n, p, q) = (y.nrows(), y.ncols(), x.ncols());
    let nf = n as f64;
    let zs: Vec<DMatrix<f64>> = (1..p).map(|t| regressors(y, x, t)).collect();
    let grams: Vec<DMatrix<f64>> = zs.iter().map(|z| z.transpose() * z / nf).collect();
    let zty: Vec<DVector<f64>> = (1..p).map(|t| zs[t - 1].transpose() * y.column(t) / nf).collect();
    let lip = grams
        .iter()
        .map(|g| SymmetricEigen::new(g.clone()).eigenvalues.max())
        .fold(0.0, f64::max)
        .max(1e-12);
    let step = 1.0 / lip;

    // theta[t-1] has length t*(q+1), laid out like the regressor columns
    let zero: Vec<DVector<f64>> = (1..p).map(|t| DVector::zeros(t * (q + 1))).collect();
    let objective = |th: &[DVector<f64>]| -> f64 {
        let mut loss = 0.0;
        for t in 1..p {
            let r = y.column(t) - &zs[t - 1] * &th[t - 1];
            loss += r.norm_squared() / (2.0 * nf);
        }
        let l1: f64 = th.iter().map(|v| v.iter().map(|a| a.abs()).sum::<f64>()).sum();
        let mut grp = 0.0;
        for k in 1..=q {
            let mut s = 0.0;
            for t in 1..p {
                for j in 0..t {
                    s += th[t - 1][k * t + j].powi(2);
                }
            }
            grp += s.sqrt();
        }
        loss + lambda * l1 + lambda_g * grp
    };
    let prox = |v: &mut [DVector<f64>]| {
        for e in v.iter_mut() {
            e.iter_mut().for_each(|a| *a = soft(*a, step * lambda));
        }
        for k in 1..=q {
            let mut s = 0.0;
            for t in 1..p {
                for j in 0..t {
                    s += v[t - 1][k * t + j].powi(2);
                }
            }
            let s = s.sqrt();
            let scale = if s > 0.0 { (1.0 - step * lambda_g / s).max(0.0) } else { 0.0 };
            for t in 1..p {
                for j in 0..t {
                    v[t - 1][k * t + j] *= scale;
                }
            }
        }
    };

    let mut theta = zero.clone();
    let mut mom = zero;
    let mut tk = 1.0f64;
    let mut prev_obj = objective(&theta);
    let mut iterations = max_iter;
    for it in 0..max_iter {
        let mut next: Vec<DVector<f64>> = (1..p)
            .map(|t| {
                let g = &grams[t - 1] * &mom[t - 1] - &zty[t - 1];
                &mom[t - 1] - g * step
            })
            .collect();
        prox(&mut next);
        let obj = objective(&next);
        let t_next = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        let diff: f64 = next
            .iter()
            .zip(&theta)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if obj > prev_obj {
            // restart the momentum when the objective goes up
            mom = theta.clone();
            tk = 1.0;
            continue;
        }
        mom = next
            .iter()
            .zip(&theta)
            .map(|(a, b)| a + (a - b) * ((tk - 1.0) / t_next))
            .collect();
        theta = next;
        tk = t_next;
        prev_obj = obj;
        if diff < 1e-14 {
            iterations = it + 1;
            break;
        }
    }
    let mut phi = PhiTensor::zeros(p, q);
    for t in 1..p {
        for k in 0..=q {
            for j in 0..t {
                phi.set(t, j, k, theta[t - 1][k * t + j]).unwrap();
            }
        }
    }
    OracleFit {
        phi,
        iterations,
        objective: prev_obj,
    }
}

/// Largest `|Z_t^T y_t| / n` over all responses: the lasso penalty above
/// which every coefficient vanishes when `lambda_g = 0`.
pub fn max_correlation(y: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    (1..y.ncols())
        .map(|t| (regressors(y, x, t).transpose() * y.column(t) / n).amax())
        .fold(0.0, f64::max)
}

/// One random oracle instance: `(y, x, lambda, lambda_g)`.
pub fn oracle_instance(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, f64, f64) {
    let mut r = rng(seed);
    let p = r.random_range(2..=4);
    let q = r.random_range(0..=2);
    let n = r.random_range(40..=100);
    let mut y = gaussian(&mut r, n, p);
    let x = binary(&mut r, n, q);
    // correlate later responses with earlier ones so solutions are not all zero
    for t in 1..p {
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..t {
                let w = 0.4 + if q > 0 { 0.5 * x[(i, 0)] } else { 0.0 };
                s += w * y[(i, j)];
            }
            y[(i, t)] += s / t as f64;
        }
    }
    let top = max_correlation(&y, &x);
    let lambda = top * r.random_range(0.01..0.3);
    let lambda_g = top * r.random_range(0.0..0.3);
    (y, x, lambda, lambda_g)
}
