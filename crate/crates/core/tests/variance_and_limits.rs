mod common;

use cdcd::variance::{fit_variance, mm_gradient_curvature, var_kkt_violation, var_loss};
use cdcd::{fit_cdcd, BetaMatrix, Dataset, FitOptions, ResidualMatrix, SglConfig, VarConfig};
use nalgebra::DMatrix;
use rand::Rng;

fn random_beta(r: &mut rand_chacha::ChaCha8Rng, p: usize, q: usize) -> BetaMatrix {
    let mut b = BetaMatrix::zeros(p, q);
    for t in 0..p {
        for k in 0..=q {
            b.set(t, k, r.random_range(-1.0..1.0));
        }
    }
    b
}

#[test]
fn mm_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut r = common::rng(seed);
        let (n, p, q) = (r.random_range(10..60), r.random_range(1..5), r.random_range(1..4));
        let res = ResidualMatrix::new(common::gaussian(&mut r, n, p)).unwrap();
        let x = common::gaussian(&mut r, n, q);
        let beta = random_beta(&mut r, p, q);
        let (t, k) = (r.random_range(0..p), r.random_range(0..=q));
        let (g, h) = mm_gradient_curvature(&beta, &res, &x, t, k).unwrap();
        let step = 1e-5;
        let mut up = beta.clone();
        up.set(t, k, beta.get(t, k) + step);
        let mut down = beta.clone();
        down.set(t, k, beta.get(t, k) - step);
        let fd = (var_loss(&up, &res, &x).unwrap() - var_loss(&down, &res, &x).unwrap()) / (2.0 * step);
        let rel = (g - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(rel);
        assert!(rel <= 1e-5, "seed {seed}: analytic {g}, finite difference {fd}");
        assert!(h > 0.0);
    }
    assert!(worst <= 1e-5);
}

#[test]
fn intercept_only_fit_is_log_mean_square() {
    for seed in 0..20 {
        let mut r = common::rng(1000 + seed);
        let (n, p) = (r.random_range(5..200), r.random_range(1..6));
        let scale = r.random_range(0.1..10.0);
        let e = common::gaussian(&mut r, n, p) * scale;
        let res = ResidualMatrix::new(e.clone()).unwrap();
        let cfg = VarConfig {
            tol: 1e-14,
            kkt_tol: 1e-8,
            ..VarConfig::with_lambda(0.0)
        };
        let (beta, diag) = fit_variance(&res, &DMatrix::zeros(n, 0), &cfg, None).unwrap();
        assert!(diag.converged, "seed {seed}: kkt {:e}", diag.kkt_violation);
        for t in 0..p {
            let ms = e.column(t).iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((beta.get(t, 0) - ms.ln()).abs() < 1e-6, "seed {seed} t {t}");
        }
    }
}

#[test]
fn converged_variance_fits_pass_kkt_and_descend() {
    for seed in 0..30 {
        let mut r = common::rng(2000 + seed);
        let (n, p, q) = (r.random_range(30..120), r.random_range(2..6), r.random_range(1..5));
        let x = common::binary(&mut r, n, q);
        let mut e = common::gaussian(&mut r, n, p);
        for i in 0..n {
            e[(i, 0)] *= (0.5 * x[(i, 0)]).exp();
        }
        let res = ResidualMatrix::new(e).unwrap();
        let cfg = VarConfig::with_lambda(r.random_range(0.0..0.5));
        let (beta, diag) = fit_variance(&res, &x, &cfg, None).unwrap();
        if diag.converged {
            assert!(var_kkt_violation(&beta, &res, &x, &cfg).unwrap() <= cfg.kkt_tol);
        }
        assert!(diag.max_objective_increase() <= 1e-10, "seed {seed}");
    }
}

#[test]
fn classical_limit_reassembles_sample_covariance() {
    let (n, p) = (500, 10);
    let mut r = common::rng(77);
    let a = common::gaussian(&mut r, p, p) * 0.4 + DMatrix::identity(p, p);
    let y = common::gaussian(&mut r, n, p) * a.transpose();
    let data = Dataset::new(y.clone(), DMatrix::zeros(n, 0)).unwrap();
    let opts = FitOptions {
        penalties: Some((0.0, 0.0)),
        lambda_d: Some(0.0),
        sgl: SglConfig {
            tol: 1e-15,
            kkt_tol: 1e-11,
            max_sweeps: 50_000,
            ..SglConfig::default()
        },
        var: VarConfig {
            tol: 1e-15,
            kkt_tol: 1e-12,
            ..VarConfig::default()
        },
        ..FitOptions::default()
    };
    let model = fit_cdcd(&data, &opts).unwrap().model;
    let sigma = model.assemble(&[]).unwrap().sigma;
    let means: Vec<f64> = (0..p).map(|c| y.column(c).mean()).collect();
    let yc = DMatrix::from_fn(n, p, |i, c| y[(i, c)] - means[c]);
    let s = yc.transpose() * &yc / n as f64;
    let rel = (&sigma - &s).norm() / s.norm();
    assert!(rel <= 1e-6, "relative error {rel:e}");
}
