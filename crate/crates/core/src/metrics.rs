//! Evaluation metrics: per-subject Frobenius errors, coefficient error and
//! support recovery, plus the replicate report built from them.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CdcdError, Result};
use crate::linalg::frobenius_diff;
use crate::model::PhiTensor;

/// `n^-1 sum_i ||A_i - B_i||_F`.
pub fn mean_frobenius_error<A, B>(estimates: &[A], truth: &[B]) -> Result<f64>
where
    A: Borrow<DMatrix<f64>>,
    B: Borrow<DMatrix<f64>>,
{
    check_dim("number of subjects", truth.len(), estimates.len())?;
    if truth.is_empty() {
        return Err(CdcdError::input("no subjects to compare"));
    }
    let mut total = 0.0;
    for (a, b) in estimates.iter().zip(truth) {
        let (a, b) = (a.borrow(), b.borrow());
        check_dim("matrix rows", b.nrows(), a.nrows())?;
        check_dim("matrix columns", b.ncols(), a.ncols())?;
        total += frobenius_diff(a, b);
    }
    Ok(total / truth.len() as f64)
}

/// Average Frobenius error of the subject covariances.
pub fn sigma_error<A, B>(estimates: &[A], truth: &[B]) -> Result<f64>
where
    A: Borrow<DMatrix<f64>>,
    B: Borrow<DMatrix<f64>>,
{
    mean_frobenius_error(estimates, truth)
}

/// Average Frobenius error of the subject precision matrices.
pub fn precision_error<A, B>(estimates: &[A], truth: &[B]) -> Result<f64>
where
    A: Borrow<DMatrix<f64>>,
    B: Borrow<DMatrix<f64>>,
{
    mean_frobenius_error(estimates, truth)
}

/// Squared Euclidean distance over every `(t, j, k)` coordinate.
pub fn phi_l2_error(fitted: &PhiTensor, truth: &PhiTensor) -> Result<f64> {
    check_dim("phi p", truth.p(), fitted.p())?;
    check_dim("phi q", truth.q(), fitted.q())?;
    Ok(fitted
        .as_slice()
        .iter()
        .zip(truth.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Which coordinates count as true negatives for the false positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprDenominator {
    /// Every coordinate, including the population slice `k = 0`.
    #[default]
    AllSlices,
    /// Only the covariate slices `k >= 1`.
    CovariateSlices,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportRates {
    /// Undefined when the true support is empty.
    pub tpr: Option<f64>,
    /// Undefined when every coordinate is truly nonzero.
    pub fpr: Option<f64>,
}

/// True and false positive rates of the exact-zero pattern of `fitted`.
/// `true_support` is aligned with the flat storage of the tensor.
pub fn support_rates(fitted: &PhiTensor, true_support: &[bool], denominator: FprDenominator) -> Result<SupportRates> {
    check_dim("support length", fitted.len(), true_support.len())?;
    let slice_len = fitted.n_pairs();
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (idx, (&v, &truth)) in fitted.as_slice().iter().zip(true_support).enumerate() {
        let selected = v != 0.0;
        if truth {
            pos += 1;
            tp += usize::from(selected);
        } else if denominator == FprDenominator::AllSlices || idx >= slice_len {
            neg += 1;
            fp += usize::from(selected);
        }
    }
    Ok(SupportRates {
        tpr: (pos > 0).then(|| tp as f64 / pos as f64),
        fpr: (neg > 0).then(|| fp as f64 / neg as f64),
    })
}

/// Mean, sample standard deviation and `sd / sqrt(count)` of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
}

impl Aggregate {
    /// `None` for an empty sample. A single value has zero spread.
    pub fn from_values(values: &[f64]) -> Option<Aggregate> {
        let count = values.len();
        if count == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let sd = if count > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Aggregate {
            count,
            mean,
            sd,
            se: sd / (count as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SigmaError,
    PrecisionError,
    L2SqError,
    Tpr,
    Fpr,
    Runtime,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::SigmaError,
        Metric::PrecisionError,
        Metric::L2SqError,
        Metric::Tpr,
        Metric::Fpr,
        Metric::Runtime,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::SigmaError => "sigma_error",
            Metric::PrecisionError => "precision_error",
            Metric::L2SqError => "l2_sq_error",
            Metric::Tpr => "tpr",
            Metric::Fpr => "fpr",
            Metric::Runtime => "runtime",
        }
    }

    pub fn from_name(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// One method evaluated on one replicate. Missing metrics are `None`
/// (e.g. no coefficient metrics for the baselines, or a failed fit).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub config: String,
    pub method: String,
    pub replicate: usize,
    pub sigma_err: Option<f64>,
    pub precision_err: Option<f64>,
    pub l2_sq_err: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    /// Wall-clock seconds.
    pub runtime: Option<f64>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::SigmaError => self.sigma_err,
            Metric::PrecisionError => self.precision_err,
            Metric::L2SqError => self.l2_sq_err,
            Metric::Tpr => self.tpr,
            Metric::Fpr => self.fpr,
            Metric::Runtime => self.runtime,
        }
    }

    fn metric_mut(&mut self, m: Metric) -> &mut Option<f64> {
        match m {
            Metric::SigmaError => &mut self.sigma_err,
            Metric::PrecisionError => &mut self.precision_err,
            Metric::L2SqError => &mut self.l2_sq_err,
            Metric::Tpr => &mut self.tpr,
            Metric::Fpr => &mut self.fpr,
            Metric::Runtime => &mut self.runtime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config: String,
    pub method: String,
    pub metric: Metric,
    pub stats: Aggregate,
    /// Replicates of this config and method that failed.
    pub failures: usize,
}

/// Replicate-level results; aggregates are always recomputed from the records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub records: Vec<ReplicateRecord>,
}

impl BenchmarkReport {
    pub fn new(records: Vec<ReplicateRecord>) -> Self {
        BenchmarkReport { records }
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    /// (config, method) pairs in first-appearance order.
    pub fn groups(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|(c, m)| *c == r.config && *m == r.method) {
                out.push((r.config.clone(), r.method.clone()));
            }
        }
        out
    }

    pub fn aggregate(&self, config: &str, method: &str, metric: Metric) -> Option<Aggregate> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.config == config && r.method == method)
            .filter_map(|r| r.metric(metric))
            .collect();
        Aggregate::from_values(&vals)
    }

    pub fn aggregates(&self) -> Vec<AggregateRow> {
        let mut out = Vec::new();
        for (config, method) in self.groups() {
            let failures = self
                .records
                .iter()
                .filter(|r| r.config == config && r.method == method && r.error.is_some())
                .count();
            for metric in Metric::ALL {
                if let Some(stats) = self.aggregate(&config, &method, metric) {
                    out.push(AggregateRow {
                        config: config.clone(),
                        method: method.clone(),
                        metric,
                        stats,
                        failures,
                    });
                }
            }
        }
        out
    }

    /// Long format: `config,method,replicate,metric,value`; failures appear
    /// as a row with metric `error` and the message in place of the value.
    pub fn write_long_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["config", "method", "replicate", "metric", "value"])?;
        for r in &self.records {
            let rep = r.replicate.to_string();
            for m in Metric::ALL {
                if let Some(v) = r.metric(m) {
                    wtr.write_record([&r.config, &r.method, &rep, m.name(), &format!("{v:.16e}")])?;
                }
            }
            if let Some(e) = &r.error {
                wtr.write_record([r.config.as_str(), &r.method, &rep, "error", e])?;
            }
        }
        wtr.flush().map_err(|e| CdcdError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_long_csv<R: std::io::Read>(r: R) -> Result<BenchmarkReport> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["config", "method", "replicate", "metric", "value"] {
            return Err(CdcdError::input(
                "benchmark CSV header must be config,method,replicate,metric,value",
            ));
        }
        let mut records: Vec<ReplicateRecord> = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |what: &str| CdcdError::input(format!("benchmark CSV row {}: {what}", line + 2));
            let replicate: usize = row[2].parse().map_err(|_| bad("replicate is not an integer"))?;
            let pos = records
                .iter()
                .position(|r| r.config == row[0] && r.method == row[1] && r.replicate == replicate);
            let idx = match pos {
                Some(i) => i,
                None => {
                    records.push(ReplicateRecord {
                        config: row[0].to_string(),
                        method: row[1].to_string(),
                        replicate,
                        ..Default::default()
                    });
                    records.len() - 1
                }
            };
            let rec = &mut records[idx];
            if &row[3] == "error" {
                rec.error = Some(row[4].to_string());
            } else {
                let m = Metric::from_name(&row[3]).ok_or_else(|| bad("unknown metric"))?;
                let v: f64 = row[4].parse().map_err(|_| bad("value is not a number"))?;
                *rec.metric_mut(m) = Some(v);
            }
        }
        Ok(BenchmarkReport { records })
    }

    /// Two tables: covariance and precision errors by method, then
    /// coefficient error and support recovery. Cells read `mean (se)`.
    pub fn to_markdown(&self) -> String {
        let groups = self.groups();
        let mut configs: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for (c, m) in &groups {
            if !configs.contains(&c.as_str()) {
                configs.push(c);
            }
            if !methods.contains(&m.as_str()) {
                methods.push(m);
            }
        }
        let cell = |c: &str, m: &str, metric: Metric| -> String {
            match self.aggregate(c, m, metric) {
                Some(a) => format!("{:.3} ({:.3})", a.mean, a.se),
                None => "n/a".to_string(),
            }
        };
        let mut s = String::new();
        let _ = writeln!(s, "### Average error for individual covariance matrices\n");
        let _ = writeln!(s, "| config | method | Sigma error | Sigma^-1 error | runtime (s) | failures |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for c in &configs {
            for m in &methods {
                if !groups.iter().any(|(gc, gm)| gc == c && gm == m) {
                    continue;
                }
                let failures = self
                    .records
                    .iter()
                    .filter(|r| r.config == *c && r.method == *m && r.error.is_some())
                    .count();
                let _ = writeln!(
                    s,
                    "| {c} | {m} | {} | {} | {} | {failures} |",
                    cell(c, m, Metric::SigmaError),
                    cell(c, m, Metric::PrecisionError),
                    cell(c, m, Metric::Runtime),
                );
            }
        }
        let coef: Vec<(&str, &str)> = groups
            .iter()
            .filter(|(c, m)| self.aggregate(c, m, Metric::L2SqError).is_some())
            .map(|(c, m)| (c.as_str(), m.as_str()))
            .collect();
        if !coef.is_empty() {
            let _ = writeln!(s, "\n### Coefficient recovery\n");
            let _ = writeln!(s, "| config | method | l2^2 error | TPR | FPR |");
            let _ = writeln!(s, "|---|---|---|---|---|");
            for (c, m) in coef {
                let _ = writeln!(
                    s,
                    "| {c} | {m} | {} | {} | {} |",
                    cell(c, m, Metric::L2SqError),
                    cell(c, m, Metric::Tpr),
                    cell(c, m, Metric::Fpr),
                );
            }
        }
        s
    }
}
