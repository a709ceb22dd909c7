//! CSV matrices, model JSON and truth JSON.
//!
//! Matrices are comma-separated with a mandatory header row and one subject
//! per row; values are written with 17 significant digits so a write/read
//! cycle is exact. JSON indices for responses are 1-based; the covariate
//! index `k` is 0 for the population term and `1..=q` for covariates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Truth};
use crate::error::{check_dim, CdcdError, Result};
use crate::model::{BetaMatrix, CholeskyModel, Hyperparams, ModelDiagnostics, PhiTensor, Scaling};
use crate::simgen::{sigma_of_x, truth_for, CovarianceStructure};

pub const MODEL_FORMAT: &str = "cdcd-model";
pub const TRUTH_FORMAT: &str = "cdcd-truth";
pub const FORMAT_VERSION: u32 = 1;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CdcdError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CdcdError::io(path, e))
}

/// Parses a headed numeric CSV; `source` names the input in error messages.
pub fn read_matrix_from<R: Read>(reader: R, source: &str) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if names.is_empty() || names.iter().all(String::is_empty) {
        return Err(CdcdError::input(format!("{source}: missing header row")));
    }
    let cols = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CdcdError::input(format!("{source}: {e}")))?;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                CdcdError::input(format!(
                    "{source}: row {}, column '{}': '{cell}' is not a number",
                    rows + 1,
                    names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(CdcdError::input(format!(
                    "{source}: row {}, column '{}': non-finite value",
                    rows + 1,
                    names[c]
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    Ok((names, DMatrix::from_row_slice(rows, cols, &values)))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    read_matrix_from(open(path)?, &path.display().to_string())
}

pub fn write_matrix_to<W: Write>(writer: W, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    check_dim("CSV header", m.ncols(), names.len())?;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(names)?;
    let mut row = Vec::with_capacity(m.ncols());
    for i in 0..m.nrows() {
        row.clear();
        row.extend((0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| CdcdError::Csv(e.into()))?;
    Ok(())
}

pub fn write_matrix_csv(path: impl AsRef<Path>, names: &[String], m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    write_matrix_to(create(path)?, names, m)
}

/// Reads responses and covariates; the Y header fixes the Cholesky ordering.
pub fn read_dataset(y_path: impl AsRef<Path>, x_path: impl AsRef<Path>) -> Result<Dataset> {
    let (y_names, y) = read_matrix_csv(y_path)?;
    let (x_names, x) = read_matrix_csv(x_path)?;
    if y.nrows() != x.nrows() {
        return Err(CdcdError::input(format!(
            "Y has {} rows but X has {}",
            y.nrows(),
            x.nrows()
        )));
    }
    Dataset::with_names(y, x, y_names, x_names)
}

/// Writes `Y.csv` and `X.csv` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    write_matrix_csv(dir.join("Y.csv"), &data.y_names, &data.y)?;
    write_matrix_csv(dir.join("X.csv"), &data.x_names, &data.x)
}

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub p: usize,
    pub q: usize,
    pub y_names: Vec<String>,
    pub x_names: Vec<String>,
    pub column_means: Vec<f64>,
    pub scaling: Option<Scaling>,
    pub hyperparams: Hyperparams,
    /// Nonzero `(t, j, k, value)` with 1-based `t > j`.
    pub phi: Vec<(usize, usize, usize, f64)>,
    /// Nonzero `(t, k, value)` with 1-based `t`.
    pub beta: Vec<(usize, usize, f64)>,
    pub diagnostics: ModelDiagnostics,
}

impl ModelFile {
    pub fn from_model(model: &CholeskyModel, y_names: &[String], x_names: &[String]) -> Result<Self> {
        check_dim("response names", model.p(), y_names.len())?;
        check_dim("covariate names", model.q(), x_names.len())?;
        let phi = model
            .phi
            .nonzeros()
            .into_iter()
            .map(|(t, j, k, v)| (t + 1, j + 1, k, v))
            .collect();
        let mut beta = Vec::new();
        for t in 0..model.p() {
            for k in 0..=model.q() {
                let v = model.beta.get(t, k);
                if v != 0.0 {
                    beta.push((t + 1, k, v));
                }
            }
        }
        Ok(ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: FORMAT_VERSION,
            p: model.p(),
            q: model.q(),
            y_names: y_names.to_vec(),
            x_names: x_names.to_vec(),
            column_means: model.column_means.clone(),
            scaling: model.scaling.clone(),
            hyperparams: model.hyperparams,
            phi,
            beta,
            diagnostics: model.diagnostics.clone(),
        })
    }

    pub fn to_model(&self) -> Result<CholeskyModel> {
        if self.format != MODEL_FORMAT {
            return Err(CdcdError::input(format!("not a model file (format '{}')", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(CdcdError::input(format!("unsupported model version {}", self.version)));
        }
        let (p, q) = (self.p, self.q);
        if p < 1 {
            return Err(CdcdError::input("model needs p >= 1"));
        }
        check_dim("model response names", p, self.y_names.len())?;
        check_dim("model covariate names", q, self.x_names.len())?;
        check_dim("model column means", p, self.column_means.len())?;
        if let Some(s) = &self.scaling {
            check_dim("model y scales", p, s.y_scale.len())?;
            check_dim("model x centres", q, s.x_center.len())?;
            check_dim("model x scales", q, s.x_scale.len())?;
            if s.y_scale.iter().chain(&s.x_scale).any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(CdcdError::input("model scales must be positive"));
            }
        }
        let mut phi = PhiTensor::zeros(p, q);
        for &(t, j, k, v) in &self.phi {
            if !(1 <= j && j < t && t <= p && k <= q) || !v.is_finite() {
                return Err(CdcdError::input(format!("invalid phi entry [{t}, {j}, {k}, {v}]")));
            }
            phi.set(t - 1, j - 1, k, v)?;
        }
        let mut beta = BetaMatrix::zeros(p, q);
        for &(t, k, v) in &self.beta {
            if !(1 <= t && t <= p && k <= q) || !v.is_finite() {
                return Err(CdcdError::input(format!("invalid beta entry [{t}, {k}, {v}]")));
            }
            beta.set(t - 1, k, v);
        }
        if self.column_means.iter().any(|v| !v.is_finite()) {
            return Err(CdcdError::input("model column means must be finite"));
        }
        let mut model = CholeskyModel::new(phi, beta)?;
        model.column_means = self.column_means.clone();
        model.scaling = self.scaling.clone();
        model.hyperparams = self.hyperparams;
        model.diagnostics = self.diagnostics.clone();
        Ok(model)
    }
}

pub fn save_model(path: impl AsRef<Path>, model: &CholeskyModel, y_names: &[String], x_names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = ModelFile::from_model(model, y_names, x_names)?;
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    w.flush().map_err(|e| CdcdError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let file: ModelFile = serde_json::from_reader(open(path)?)?;
    file.to_model()?;
    Ok(file)
}

/// Covariance and precision at one value of the first covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthLevel {
    pub x1: f64,
    /// Row-major.
    pub sigma: Vec<Vec<f64>>,
    pub precision: Vec<Vec<f64>>,
}

/// On-disk ground truth of a simulated replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format: String,
    pub version: u32,
    pub structure: CovarianceStructure,
    pub p: usize,
    pub q: usize,
    pub phi: Vec<(usize, usize, usize, f64)>,
    pub beta: Vec<(usize, usize, f64)>,
    /// Nonzero coordinates of `phi`, same indexing.
    pub support: Vec<(usize, usize, usize)>,
    pub levels: Vec<TruthLevel>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl TruthFile {
    pub fn new(structure: &CovarianceStructure, q: usize) -> Result<Self> {
        let (phi, beta) = crate::simgen::true_parameters(structure, q)?;
        let mut levels = Vec::with_capacity(2);
        for x1 in [0.0, 1.0] {
            let mut x = vec![0.0; q];
            x[0] = x1;
            let (s, o) = sigma_of_x(structure, &x)?;
            levels.push(TruthLevel {
                x1,
                sigma: rows(&s),
                precision: rows(&o),
            });
        }
        let phi_entries: Vec<(usize, usize, usize, f64)> = phi
            .nonzeros()
            .into_iter()
            .map(|(t, j, k, v)| (t + 1, j + 1, k, v))
            .collect();
        let mut beta_entries = Vec::new();
        for t in 0..beta.p() {
            for k in 0..=q {
                if beta.get(t, k) != 0.0 {
                    beta_entries.push((t + 1, k, beta.get(t, k)));
                }
            }
        }
        Ok(TruthFile {
            format: TRUTH_FORMAT.to_string(),
            version: FORMAT_VERSION,
            structure: structure.clone(),
            p: structure.p,
            q,
            support: phi_entries.iter().map(|e| (e.0, e.1, e.2)).collect(),
            phi: phi_entries,
            beta: beta_entries,
            levels,
        })
    }

    /// Per-subject truth for covariate rows `x`, regenerated from the structure.
    pub fn to_truth(&self, x: &DMatrix<f64>) -> Result<Truth> {
        if self.format != TRUTH_FORMAT {
            return Err(CdcdError::input(format!("not a truth file (format '{}')", self.format)));
        }
        check_dim("truth covariates", self.q, x.ncols())?;
        check_dim("truth responses", self.p, self.structure.p)?;
        truth_for(&self.structure, x)
    }
}

pub fn save_truth(path: impl AsRef<Path>, truth: &TruthFile) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, truth)?;
    w.flush().map_err(|e| CdcdError::io(path, e))
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthFile> {
    Ok(serde_json::from_reader(open(path.as_ref())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::generate;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 12345.678901234567, f64::MAX, -0.0]);
        let names: Vec<String> = ["a", "b,c", "d"].iter().map(|s| s.to_string()).collect();
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &names, &m).unwrap();
        let (n2, m2) = read_matrix_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(n2, names);
        for (a, b) in m.iter().zip(m2.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_rejects_bad_cells() {
        let bad = ["a,b\n1,x\n", "a,b\n1,NaN\n", "a,b\n1,inf\n", "a,b\n1,2,3\n"];
        for text in bad {
            let err = read_matrix_from(text.as_bytes(), "mem").unwrap_err();
            assert!(err.is_input_error(), "{text}: {err}");
        }
        let err = read_matrix_from("a,b\n1,x\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("column 'b'"));
    }

    #[test]
    fn dataset_row_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("Y.csv"), "y1,y2\n1,2\n3,4\n").unwrap();
        std::fs::write(dir.path().join("X.csv"), "x1\n1\n").unwrap();
        let err = read_dataset(dir.path().join("Y.csv"), dir.path().join("X.csv")).unwrap_err();
        assert!(err.is_input_error());
        assert!(read_dataset(dir.path().join("nope.csv"), dir.path().join("X.csv")).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let mut phi = PhiTensor::zeros(3, 2);
        phi.set(1, 0, 0, 0.3).unwrap();
        phi.set(2, 1, 2, -0.7).unwrap();
        let mut beta = BetaMatrix::zeros(3, 2);
        beta.set(0, 0, 0.1);
        beta.set(2, 1, -0.2);
        let mut model = CholeskyModel::new(phi, beta).unwrap();
        model.column_means = vec![1.0, 2.0, 3.0];
        model.hyperparams.lambda = 0.5;
        let names = |pre: &str, n: usize| (1..=n).map(|i| format!("{pre}{i}")).collect::<Vec<_>>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &model, &names("y", 3), &names("x", 2)).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
        assert_eq!(back.phi[0], (2, 1, 0, 0.3));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format\": \"cdcd-model\""));
    }

    #[test]
    fn model_json_rejects_bad_indices() {
        let model = CholeskyModel::new(PhiTensor::zeros(3, 1), BetaMatrix::zeros(3, 1)).unwrap();
        let names = vec!["a".to_string(), "b".into(), "c".into()];
        let mut f = ModelFile::from_model(&model, &names, &["x".to_string()]).unwrap();
        f.phi.push((2, 2, 0, 1.0));
        assert!(f.to_model().is_err());
        f.phi = vec![(3, 1, 2, 1.0)];
        assert!(f.to_model().is_err());
        f.phi.clear();
        f.format = "other".into();
        assert!(f.to_model().is_err());
    }

    #[test]
    fn truth_file_regenerates_subject_matrices() {
        let s = CovarianceStructure::ar1(4);
        let d = generate(&s, 12, 2, 9).unwrap();
        let tf = TruthFile::new(&s, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_truth(dir.path().join("t.json"), &tf).unwrap();
        let back = load_truth(dir.path().join("t.json")).unwrap();
        assert_eq!(back, tf);
        let truth = back.to_truth(&d.x).unwrap();
        let orig = d.truth.unwrap();
        for i in 0..12 {
            assert_eq!(*truth.sigma[i], *orig.sigma[i]);
        }
        assert_eq!(truth.support, orig.support);
        assert_eq!(tf.support.len(), 3);
        assert!(tf.support.iter().all(|&(t, j, k)| t == j + 1 && k == 1));
    }
}
