//! End-to-end experiment orchestration: source pretraining, the generative
//! adaptation loop, baselines, ablations and their metrics files.

mod config;
mod metrics;
mod run;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, Method, SourceConfig, TaskConfig};
pub use metrics::{median, EpochMetrics, Phase, RunMetrics, Stat, Summary, METRICS_HEADER};
pub use run::{
    build_task, pretrain_source, run_ablation, run_baseline, run_degnet, run_seed, GeneratorContext, GeneratorSet,
    GeneratorStep, Task,
};

use crate::error::{Error, Result};

/// Runs every seed of `cfg`, up to `jobs` at a time. Results come back in
/// seed order; the first failing seed's error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunMetrics>> {
    cfg.validate()?;
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<RunMetrics>>> = (0..cfg.seeds.len()).map(|_| None).collect();
    for chunk_start in (0..cfg.seeds.len()).step_by(jobs) {
        let chunk = &cfg.seeds[chunk_start..(chunk_start + jobs).min(cfg.seeds.len())];
        let outcomes: Vec<Result<RunMetrics>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || run_seed(cfg, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::invalid("training thread panicked")))
                })
                .collect()
        });
        for (k, outcome) in outcomes.into_iter().enumerate() {
            results[chunk_start + k] = Some(outcome);
        }
    }
    results.into_iter().map(|r| r.expect("every seed ran")).collect()
}

pub fn metrics_file_name(run: &RunMetrics) -> String {
    format!(
        "metrics_{}_ml{}_seed{}.csv",
        run.method, run.labeled_per_class, run.seed
    )
}

/// Writes one metrics CSV per seed and the summary JSON into `dir`.
/// Returns the summary and the paths written.
pub fn write_outputs(runs: &[RunMetrics], dir: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(runs.len() + 1);
    for run in runs {
        let path = dir.join(metrics_file_name(run));
        run.write_csv(&path)?;
        written.push(path);
    }
    let summary = Summary::from_runs(runs)?;
    let path = dir.join(format!("{}.json", summary.file_stem()));
    let text = serde_json::to_string_pretty(&summary)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok((summary, written))
}
