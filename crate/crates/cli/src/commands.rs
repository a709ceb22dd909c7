use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdcd::benchmark::replicate_seed;
use cdcd::io::{load_model, read_dataset, read_matrix_csv, save_model, save_truth, write_dataset, write_matrix_csv, TruthFile};
use cdcd::simgen::generate;
use cdcd::{
    fit_cdcd, run_benchmark, BenchmarkConfig, BenchmarkReport, CdcdError, CovarianceStructure, FitOptions, Method,
    Result,
};
use serde_json::json;

use crate::{BenchmarkArgs, FitArgs, PredictArgs, ReportArgs, SimulateArgs, StructureArgs, TuningArgs, EXIT_PARTIAL};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CdcdError::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CdcdError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn structure_from(a: &StructureArgs) -> CovarianceStructure {
    CovarianceStructure {
        rho: a.rho,
        hub_block: a.hub_block,
        hub_boost: a.hub_boost,
        edge_fraction: a.edge_fraction,
        edge_value: a.edge_value,
        ..CovarianceStructure::new(a.structure, a.p)
    }
}

fn fit_options(t: &TuningArgs, seed: u64, standardize: bool) -> Result<FitOptions> {
    if t.folds < 2 {
        return Err(CdcdError::input("--folds must be at least 2"));
    }
    if !(t.lambda_ratio > 0.0 && t.lambda_ratio < 1.0) {
        return Err(CdcdError::input("--lambda-ratio must lie in (0, 1)"));
    }
    let mut o = FitOptions {
        standardize,
        folds: t.folds,
        seed,
        n_alphas: t.alphas,
        n_lambda0: t.n_lambda,
        lambda0_ratio: t.lambda_ratio,
        cap: t.cap,
        n_lambda_d: t.n_lambda_d,
        ..FitOptions::default()
    };
    if let Some(tol) = t.tol {
        if !(tol > 0.0) {
            return Err(CdcdError::input("--tol must be positive"));
        }
        o.sgl.tol = tol;
        o.var.tol = tol;
    }
    if let Some(m) = t.max_sweeps {
        o.sgl.max_sweeps = m;
        o.var.max_iters = m;
    }
    Ok(o)
}

fn benchmark_config(
    s: &StructureArgs,
    n: usize,
    q: usize,
    replicates: usize,
    seed: u64,
) -> Result<BenchmarkConfig> {
    if q == 0 {
        return Err(CdcdError::input("simulation designs need q >= 1"));
    }
    let mut cfg = BenchmarkConfig::new(structure_from(s), n, q, replicates, seed);
    cfg.redraw_random = !s.fixed_edges;
    cfg.validate()?;
    Ok(cfg)
}

/// Directory of replicate `r` under a simulation root.
pub fn replicate_dir(out: &Path, seed: u64, r: usize) -> PathBuf {
    out.join(format!("seed_{seed}")).join(format!("rep_{r:03}"))
}

pub fn simulate(a: &SimulateArgs) -> Result<ExitCode> {
    let cfg = benchmark_config(&a.structure, a.n, a.q, a.replicates, a.seed)?;
    ensure_dir(&a.out)?;
    for r in 0..a.replicates {
        let structure = cfg.replicate_structure(r);
        let data = generate(&structure, a.n, a.q, replicate_seed(a.seed, r))?;
        let dir = replicate_dir(&a.out, a.seed, r);
        ensure_dir(&dir)?;
        write_dataset(&dir, &data)?;
        save_truth(dir.join("truth.json"), &TruthFile::new(&structure, a.q)?)?;
    }
    println!(
        "wrote {} replicate(s) to {}",
        a.replicates,
        a.out.join(format!("seed_{}", a.seed)).display()
    );
    Ok(ExitCode::SUCCESS)
}

fn names_where(names: &[String], q: usize, active: impl Fn(usize) -> bool) -> Vec<String> {
    (1..=q).filter(|&k| active(k)).map(|k| names[k - 1].clone()).collect()
}

pub fn fit(a: &FitArgs) -> Result<ExitCode> {
    let data = read_dataset(&a.y, &a.x)?;
    let mut opts = fit_options(&a.tuning, a.seed, !a.no_standardize)?;
    if let (Some(l), Some(g)) = (a.lambda, a.lambda_g) {
        if !(l >= 0.0 && g >= 0.0) {
            return Err(CdcdError::input("--lambda and --lambda-g must be nonnegative"));
        }
        opts.penalties = Some((l, g));
    }
    if let Some(d) = a.lambda_d {
        if !(d >= 0.0) {
            return Err(CdcdError::input("--lambda-d must be nonnegative"));
        }
        opts.lambda_d = Some(d);
    }
    let summary_path = a.summary.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        a.out.with_file_name(format!("{stem}.summary.json"))
    });
    ensure_parent(&a.out)?;
    ensure_parent(&summary_path)?;

    let out = fit_cdcd(&data, &opts)?;
    let m = &out.model;
    save_model(&a.out, m, &data.y_names, &data.x_names)?;
    let q = data.q();
    let selected = names_where(&data.x_names, q, |k| m.phi.group_norm(k) > 0.0);
    let variance_covariates = names_where(&data.x_names, q, |k| m.beta.group_norm(k) > 0.0);
    let diag = |d: &cdcd::FitDiagnostics| {
        json!({
            "converged": d.converged,
            "sweeps": d.sweeps_run,
            "kkt_violation": d.kkt_violation,
            "final_objective": d.objective_trace.last(),
        })
    };
    let summary = json!({
        "n": data.n(),
        "p": data.p(),
        "q": q,
        "standardized": opts.standardize,
        "hyperparams": m.hyperparams,
        "support_size": m.phi.support_size(),
        "population_support": m.phi.slice(0).iter().filter(|v| **v != 0.0).count(),
        "selected_covariates": selected,
        "variance_covariates": variance_covariates,
        "cv": out.cv.as_ref().map(|cv| json!({
            "alpha": cv.alpha,
            "lambda0": cv.lambda0,
            "candidates": cv.candidates.len(),
            "feasible_candidates": cv.candidates.iter().filter(|c| c.feasible).count(),
            "support_cap": cv.s_lambda_cap,
            "unconverged_fits": cv.unconverged_fits,
        })),
        "variance_cv": out.var_cv.as_ref().map(|v| json!({
            "lambda_d": v.lambda_d,
            "evaluated": v.lambda_d_grid.len(),
        })),
        "diagnostics": {
            "cholesky": diag(&m.diagnostics.cholesky),
            "variance": diag(&m.diagnostics.variance),
        },
    });
    write_json(&summary_path, &summary)?;
    if let (Some(path), Some(cv)) = (&a.cv_report, &out.cv) {
        write_json(path, &json!({ "cholesky": cv, "variance": out.var_cv }))?;
    }
    if !m.diagnostics.cholesky.converged || !m.diagnostics.variance.converged {
        eprintln!("warning: final fit stopped at the iteration limit before converging");
    }
    println!(
        "support {} ({} covariate(s) selected); model written to {}",
        m.phi.support_size(),
        summary["selected_covariates"].as_array().map_or(0, Vec::len),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn predict(a: &PredictArgs) -> Result<ExitCode> {
    let file = load_model(&a.model)?;
    let model = file.to_model()?;
    let (names, x) = read_matrix_csv(&a.x)?;
    if x.ncols() != file.q {
        return Err(CdcdError::input(format!(
            "{} has {} covariate column(s) but the model expects {}",
            a.x.display(),
            x.ncols(),
            file.q
        )));
    }
    if names != file.x_names {
        return Err(CdcdError::input(format!(
            "covariate header {:?} does not match the model's {:?}",
            names, file.x_names
        )));
    }
    ensure_dir(&a.out)?;
    let width = x.nrows().max(1).to_string().len().max(4);
    let mut cert = String::from("subject,min_eigenvalue\n");
    let mut worst = f64::INFINITY;
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let cov = model.assemble_original(&row)?;
        let id = format!("{:0width$}", i + 1);
        write_matrix_csv(a.out.join(format!("sigma_{id}.csv")), &file.y_names, &cov.sigma)?;
        write_matrix_csv(a.out.join(format!("precision_{id}.csv")), &file.y_names, &cov.precision)?;
        let ev = cov.min_eigenvalue();
        worst = worst.min(ev);
        let _ = writeln!(cert, "{},{:.16e}", i + 1, ev);
    }
    write_text(&a.out.join("certificate.csv"), &cert)?;
    if x.nrows() > 0 && !(worst > 0.0) {
        return Err(CdcdError::numerical(format!(
            "assembled covariance is not positive definite (min eigenvalue {worst:e})"
        )));
    }
    println!("wrote {} subject(s) to {}", x.nrows(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn benchmark(a: &BenchmarkArgs) -> Result<ExitCode> {
    let mut cfg = benchmark_config(&a.structure, a.n, a.q, a.replicates, a.seed)?;
    let mut methods: Vec<Method> = Vec::new();
    for m in &a.methods {
        let m: Method = m.trim().parse()?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    cfg.methods = methods;
    if let Some(name) = &a.name {
        cfg.name = name.clone();
    }
    cfg.fit = fit_options(&a.tuning, a.seed, a.standardize)?;
    cfg.fpr_denominator = a.fpr_denominator;
    ensure_dir(&a.out)?;

    let run = run_benchmark(&[cfg])?;
    let results = a.out.join("results.csv");
    let f = File::create(&results).map_err(|e| CdcdError::io(&results, e))?;
    let mut w = BufWriter::new(f);
    run.report.write_long_csv(&mut w)?;
    w.flush().map_err(|e| CdcdError::io(&results, e))?;

    let mut timings = String::from("config,replicate,phase,seconds\n");
    for t in &run.timings {
        let _ = writeln!(timings, "{},{},{},{:.6}", t.config, t.replicate, t.phase, t.seconds);
    }
    write_text(&a.out.join("timings.csv"), &timings)?;

    let failures = run.report.failures();
    let mut md = run.report.to_markdown();
    let _ = writeln!(
        md,
        "\nPositive-definiteness checks: {} ({} violations, smallest eigenvalue {:.3e}). Failed fits: {}.",
        run.pd.checks, run.pd.violations, run.pd.min_eigenvalue, failures
    );
    write_text(&a.out.join("report.md"), &md)?;
    write_json(
        &a.out.join("summary.json"),
        &json!({ "pd": run.pd, "failures": failures, "records": run.report.records.len() }),
    )?;
    print!("{md}");

    for r in run.report.records.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "replicate {} of {} / {} failed: {}",
            r.replicate,
            r.config,
            r.method,
            r.error.as_deref().unwrap_or_default()
        );
    }
    if run.pd.violations > 0 {
        return Err(CdcdError::numerical(format!(
            "{} assembled covariance(s) were not positive definite",
            run.pd.violations
        )));
    }
    Ok(if failures > 0 { ExitCode::from(EXIT_PARTIAL) } else { ExitCode::SUCCESS })
}

pub fn report(a: &ReportArgs) -> Result<ExitCode> {
    let f = File::open(&a.input).map_err(|e| CdcdError::io(&a.input, e))?;
    let md = BenchmarkReport::read_long_csv(f)?.to_markdown();
    match &a.out {
        Some(path) => write_text(path, &md)?,
        None => print!("{md}"),
    }
    Ok(ExitCode::SUCCESS)
}
