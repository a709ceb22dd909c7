//! Covariate-dependent Cholesky decomposition (CDCD) for subject-specific
//! covariance estimation.

pub mod baselines;
pub mod benchmark;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sgl;
pub mod simgen;
pub mod tuning;
pub mod variance;

pub use data::{Dataset, Truth};
pub use error::{CdcdError, Result};
pub use model::{BetaMatrix, CholeskyModel, Hyperparams, PhiTensor, Scaling, SubjectCov};
pub use sgl::{FitDiagnostics, InteractionDesign, SglConfig, SglSolver};
pub use variance::{ResidualMatrix, VarConfig};
pub use simgen::{CovarianceStructure, StructureKind};
pub use pipeline::{fit_cdcd, FitOptions, FitOutput, SupportCap};
pub use tuning::{CvReport, TuningGrid, VarCvReport};
pub use benchmark::{run_benchmark, BenchmarkConfig, BenchmarkRun, Method, PdStats};
pub use baselines::{BaselineEstimate, BaselineMethod};
pub use metrics::{Aggregate, BenchmarkReport, FprDenominator, ReplicateRecord, SupportRates};
