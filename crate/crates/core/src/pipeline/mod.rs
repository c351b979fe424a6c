//! Batch entry points: the single-dataset pipeline, the benchmark grid and
//! the gradient-check suite. The command-line front end is a thin wrapper.

mod benchmark;
mod config;
mod gradcheck;
mod run;

pub use benchmark::{cmd_benchmark, run_benchmark, BenchmarkConfig, BenchmarkReport, Cell, CellResult};
pub use config::{RunConfig, KEYS};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckSuiteReport, RuleResult};
pub use run::{
    cmd_pipeline, estimates_csv, fit_nuisances, load_corpus, prepare, representation_features, run_pipeline,
    write_run_metadata, EstimateRow, PipelineConfig, PipelineOutput, PreparedData, Representation, ESTIMATE_COLUMNS,
};
