//! Configuration, persistence and the experiment runner behind the CLI.

mod batchfile;
mod cli;
mod config;
mod report;

use std::path::Path;

use crate::envs::{collect_batch, Batch};
use crate::error::{contract, io_err, Result};
use crate::ibrl::{derive_seed, mean_and_stderr, run_iteration, IterationOutcome, IterationReport};

pub use batchfile::{load_batch, read_batch, save_batch, FORMAT_VERSION, MAGIC};
pub use cli::{cli_run, Cli};
pub use config::{parse_config, parse_config_str, ExperimentConfig, InitialBatchConfig};
pub use report::{
    fmt_num, parse_merged, parse_report, read_report, render_merged, render_report, write_merged, write_report,
    ReportRow, REPORT_HEADER,
};

/// The first batch of a run: loaded when the config names a file,
/// otherwise collected with the configured behavior policy.
pub fn initial_batch(cfg: &ExperimentConfig, seed: u64) -> Result<Batch> {
    if let Some(path) = &cfg.initial.batch {
        let b = load_batch(path)?;
        if b.env() != cfg.env || b.window() != cfg.window() {
            return Err(contract(format!(
                "{} holds {} data with window {}, config expects {} with window {}",
                path.display(),
                b.env(),
                b.window(),
                cfg.env,
                cfg.window()
            )));
        }
        return Ok(b);
    }
    let env = cfg.environment();
    let horizon = cfg.initial.horizon.unwrap_or_else(|| env.episode_len());
    let mut policy = cfg.initial_policy();
    collect_batch(
        &env,
        &mut policy,
        cfg.initial.episodes,
        horizon,
        cfg.window(),
        seed,
        cfg.initial.bound,
    )
}

/// Mean and standard error of the accumulated per-episode cost of a batch.
pub fn batch_cost(batch: &Batch) -> (f64, f64) {
    let costs: Vec<f64> = batch.episode_returns().iter().map(|r| -r).collect();
    mean_and_stderr(&costs)
}

/// A full run: the initial batch and every iteration on top of it.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub initial: Batch,
    pub reports: Vec<IterationReport>,
    /// The last iteration, with its models, ensemble and final batch.
    pub last: IterationOutcome,
}

/// Runs `cfg.iterations` iterations from the initial batch. `on_iteration`
/// sees every outcome as it completes.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationOutcome),
) -> Result<RunOutcome> {
    let initial = initial_batch(cfg, derive_seed(seed, 6, 0))?;
    let ibrl = cfg.ibrl();
    let mut batch = initial.clone();
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut last = None;
    for i in 1..=cfg.iterations as u32 {
        let out = run_iteration(&batch, &ibrl, i, seed)?;
        on_iteration(&out);
        reports.push(out.report.clone());
        batch = out.batch.clone();
        last = Some(out);
    }
    Ok(RunOutcome {
        initial,
        reports,
        last: last.ok_or_else(|| contract("no iterations configured"))?,
    })
}

/// Writes the initial batch cost as a one-row table.
pub fn write_baseline(batch: &Batch, path: &Path) -> Result<()> {
    let (m, s) = batch_cost(batch);
    let text = format!(
        "initial_cost_mean,initial_cost_stderr,batch_size\n{},{},{}\n",
        fmt_num(m),
        fmt_num(s),
        batch.len()
    );
    std::fs::write(path, text).map_err(io_err(path))
}
