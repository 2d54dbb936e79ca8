//! Config-driven experiment runner: preprocess, tokenize, train every
//! schedule variant and seed, evaluate, analyze and emit tables.

pub mod config;
pub mod error;
pub mod runner;
pub mod svg;
pub mod tables;

pub use config::{load_config, ExperimentConfig, Overrides, Profile};
pub use error::{CliError, CliResult};

use runner::{execute, write_manifest, ResultsBundle, Stages};

/// Full pipeline: every run, then tables, then the manifest. Partial
/// failures are reported after all artifacts are written.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<ResultsBundle> {
    let bundle = execute(cfg, Stages::ALL)?;
    finish(cfg, bundle)
}

/// Tables and manifest for runs already on disk.
pub fn report(cfg: &ExperimentConfig) -> CliResult<ResultsBundle> {
    let bundle = runner::load_bundle(cfg)?;
    finish(cfg, bundle)
}

fn finish(cfg: &ExperimentConfig, bundle: ResultsBundle) -> CliResult<ResultsBundle> {
    for note in tables::emit_tables(cfg, &bundle)? {
        log::warn!("{note}");
    }
    write_manifest(&cfg.output_dir, &bundle)?;
    match bundle.failures() {
        0 => Ok(bundle),
        failed => Err(CliError::Partial {
            failed,
            total: bundle.runs.len(),
        }),
    }
}
