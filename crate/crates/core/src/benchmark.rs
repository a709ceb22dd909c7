//! Replicated simulation benchmark: generate, fit every method, evaluate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{dense_sample, sparse_sample_cv, BaselineEstimate};
use crate::data::Dataset;
use crate::error::{CdcdError, Result};
use crate::linalg::min_eigenvalue;
use crate::metrics::{
    phi_l2_error, precision_error, sigma_error, support_rates, BenchmarkReport, FprDenominator, ReplicateRecord,
};
use crate::model::{column_means, subtract_means};
use crate::pipeline::{fit_cdcd, FitOptions};
use crate::simgen::{generate, CovarianceStructure, StructureKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cdcd,
    DenseSample,
    SparseSample,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cdcd, Method::DenseSample, Method::SparseSample];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cdcd => "cdcd",
            Method::DenseSample => "dense-sample",
            Method::SparseSample => "sparse-sample",
        })
    }
}

impl FromStr for Method {
    type Err = CdcdError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| CdcdError::input(format!("unknown method '{s}' (expected cdcd, dense-sample or sparse-sample)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    /// Label used in reports.
    pub name: String,
    pub structure: CovarianceStructure,
    pub n: usize,
    pub q: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub fit: FitOptions,
    pub fpr_denominator: FprDenominator,
    /// Draw new random-structure edges for every replicate.
    pub redraw_random: bool,
}

impl BenchmarkConfig {
    pub fn new(structure: CovarianceStructure, n: usize, q: usize, replicates: usize, seed: u64) -> Self {
        BenchmarkConfig {
            name: format!("{}_n{}_p{}_q{}", structure.kind, n, structure.p, q),
            structure,
            n,
            q,
            replicates,
            seed,
            methods: Method::ALL.to_vec(),
            fit: FitOptions::default(),
            fpr_denominator: FprDenominator::AllSlices,
            redraw_random: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(CdcdError::input("benchmark needs at least one method"));
        }
        if self.replicates == 0 {
            return Err(CdcdError::input("benchmark needs at least one replicate"));
        }
        if self.n < 2 || self.q < 1 {
            return Err(CdcdError::input("benchmark needs n >= 2 and q >= 1"));
        }
        self.structure.validate()
    }

    /// Structure used for replicate `r`.
    pub fn replicate_structure(&self, r: usize) -> CovarianceStructure {
        let mut s = self.structure.clone();
        if s.kind == StructureKind::Random && self.redraw_random {
            s.seed = derive_seed(self.seed, r, 1);
        }
        s
    }
}

/// Independent per-replicate seed: word `word` of ChaCha8 stream `r`.
pub fn derive_seed(seed: u64, r: usize, word: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    let mut v = 0;
    for _ in 0..=word {
        v = rng.next_u64();
    }
    v
}

/// Seed for the data of replicate `r`.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r, 0)
}

/// Positive-definiteness assertions on assembled subject covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdStats {
    pub checks: usize,
    pub violations: usize,
    pub min_eigenvalue: f64,
}

impl Default for PdStats {
    fn default() -> Self {
        PdStats {
            checks: 0,
            violations: 0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl PdStats {
    fn record(&mut self, ev: f64) {
        self.checks += 1;
        if !(ev > 0.0) {
            self.violations += 1;
        }
        self.min_eigenvalue = self.min_eigenvalue.min(ev);
    }

    fn merge(&mut self, other: &PdStats) {
        self.checks += other.checks;
        self.violations += other.violations;
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub config: String,
    pub replicate: usize,
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    pub pd: PdStats,
    pub timings: Vec<PhaseTiming>,
}

struct ReplicateOutcome {
    records: Vec<ReplicateRecord>,
    pd: PdStats,
    timings: Vec<PhaseTiming>,
}

fn baseline_record(est: &BaselineEstimate, data: &Dataset, allow_pinv: bool, rec: &mut ReplicateRecord) -> Result<()> {
    let truth = data.truth.as_ref().ok_or_else(|| CdcdError::input("benchmark data has no truth"))?;
    rec.sigma_err = Some(sigma_error(&vec![&est.sigma; data.n()], &truth.sigma)?);
    let prec = est.precision();
    // A singular sample covariance has no inverse to compare; the pseudo-inverse
    // is only reported for the thresholded estimator.
    if !prec.pseudo_inverse || allow_pinv {
        rec.precision_err = Some(precision_error(&vec![&prec.matrix; data.n()], &truth.precision)?);
    }
    Ok(())
}

fn cdcd_record(
    cfg: &BenchmarkConfig,
    data: &Dataset,
    seed: u64,
    rec: &mut ReplicateRecord,
    pd: &mut PdStats,
) -> Result<()> {
    let truth = data.truth.as_ref().ok_or_else(|| CdcdError::input("benchmark data has no truth"))?;
    let opts = FitOptions {
        seed,
        ..cfg.fit.clone()
    };
    let model = fit_cdcd(data, &opts)?.model;
    let mut sig = Vec::with_capacity(data.n());
    let mut prec = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let cov = model.assemble_original(&data.x_row(i))?;
        pd.record(min_eigenvalue(&cov.sigma));
        sig.push(cov.sigma);
        prec.push(cov.precision);
    }
    rec.sigma_err = Some(sigma_error(&sig, &truth.sigma)?);
    rec.precision_err = Some(precision_error(&prec, &truth.precision)?);
    // Coefficients are only comparable with the truth on the unstandardized scale.
    if model.scaling.is_none() {
        rec.l2_sq_err = Some(phi_l2_error(&model.phi, &truth.phi)?);
        let rates = support_rates(&model.phi, &truth.support, cfg.fpr_denominator)?;
        rec.tpr = rates.tpr;
        rec.fpr = rates.fpr;
    }
    Ok(())
}

fn run_replicate(cfg: &BenchmarkConfig, r: usize) -> ReplicateOutcome {
    let seed = replicate_seed(cfg.seed, r);
    let mut timings = Vec::new();
    let mut pd = PdStats::default();
    let blank = |m: Method| ReplicateRecord {
        config: cfg.name.clone(),
        method: m.to_string(),
        replicate: r,
        ..Default::default()
    };
    let t0 = Instant::now();
    let data = generate(&cfg.replicate_structure(r), cfg.n, cfg.q, seed);
    timings.push(PhaseTiming {
        config: cfg.name.clone(),
        replicate: r,
        phase: "generate".into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    let data = match data {
        Ok(d) => d,
        Err(e) => {
            let records = cfg
                .methods
                .iter()
                .map(|&m| ReplicateRecord {
                    error: Some(format!("generation failed: {e}")),
                    ..blank(m)
                })
                .collect();
            return ReplicateOutcome { records, pd, timings };
        }
    };
    let y: DMatrix<f64> = subtract_means(&data.y, &column_means(&data.y));
    let mut records = Vec::with_capacity(cfg.methods.len());
    for &m in &cfg.methods {
        let mut rec = blank(m);
        let t0 = Instant::now();
        let res = match m {
            Method::Cdcd => cdcd_record(cfg, &data, seed, &mut rec, &mut pd),
            Method::DenseSample => dense_sample(&y).and_then(|e| baseline_record(&e, &data, false, &mut rec)),
            Method::SparseSample => sparse_sample_cv(&y, cfg.fit.folds, seed)
                .and_then(|(e, _)| baseline_record(&e, &data, true, &mut rec)),
        };
        let secs = t0.elapsed().as_secs_f64();
        match res {
            Ok(()) => rec.runtime = Some(secs),
            Err(e) => {
                rec = ReplicateRecord {
                    error: Some(e.to_string()),
                    ..blank(m)
                }
            }
        }
        timings.push(PhaseTiming {
            config: cfg.name.clone(),
            replicate: r,
            phase: m.to_string(),
            seconds: secs,
        });
        records.push(rec);
    }
    ReplicateOutcome { records, pd, timings }
}

/// Runs every configuration; replicates run in parallel on the current
/// rayon pool. Failures are recorded in the report and never abort the run.
pub fn run_benchmark(configs: &[BenchmarkConfig]) -> Result<BenchmarkRun> {
    for c in configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize)> = configs
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.replicates).map(move |r| (ci, r)))
        .collect();
    let outcomes: Vec<ReplicateOutcome> = jobs.par_iter().map(|&(ci, r)| run_replicate(&configs[ci], r)).collect();
    let mut run = BenchmarkRun::default();
    for o in outcomes {
        run.report.records.extend(o.records);
        run.pd.merge(&o.pd);
        run.timings.extend(o.timings);
    }
    Ok(run)
}
