//! Training and evaluating variations into per-variation directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use world_machine::config::ExperimentConfig;
use world_machine::eval::{result_rows, write_rows, Evaluator, Task, TaskResult};
use world_machine::model::checkpoint;
use world_machine::protocol::{write_epoch_log, EpochStats, TrainOutcome, Trainer};
use world_machine::toy1d::Toy1DDataset;
use world_machine::{Error, Result};

use crate::manifest::Manifest;
use crate::records::{RunStatus, RunSummary, RESULTS_FILE, SUMMARY_FILE};
use crate::variables::Variation;

pub const CHECKPOINT_FILE: &str = "checkpoint.wmck";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Trains `cfg` and writes its config, epoch log and final checkpoint into
/// `dir`.
pub fn train_into<'d>(
    cfg: &ExperimentConfig,
    data: &'d Toy1DDataset,
    dir: &Path,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(TrainOutcome, Trainer<'d>)> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let outcome = trainer.run(on_epoch)?;
    let log = dir.join(EPOCH_LOG_FILE);
    write_epoch_log(fs::File::create(&log).map_err(Error::io(&log))?, &outcome.epochs)?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, trainer.model())?;
    Ok((outcome, trainer))
}

/// Results for a model that produced no usable metrics.
pub fn nan_results(tasks: &[Task], seq_len: usize) -> Vec<TaskResult> {
    tasks
        .iter()
        .map(|&task| TaskResult {
            task,
            steps: task.steps(seq_len),
            sequences: 0,
            channels: ["external", "measurement"]
                .iter()
                .map(|c| world_machine::eval::ChannelScore {
                    channel: c.to_string(),
                    mse: f64::NAN,
                    sdtw: f64::NAN,
                })
                .collect(),
        })
        .collect()
}

/// Trains and evaluates one variation, leaving a summary marker last.
pub fn run_variation(
    base: &ExperimentConfig,
    variation: &Variation,
    data: &Toy1DDataset,
    out: &Path,
    mask_x: f64,
) -> Result<RunSummary> {
    let dir = out.join(variation.id());
    let cfg = variation.apply(base);
    let tasks = Task::all(mask_x);
    let attempt = (|| -> Result<RunSummary> {
        let (outcome, trainer) = train_into(&cfg, data, &dir, |_| {})?;
        let results = if outcome.diverged {
            nan_results(&tasks, data.seq_len())
        } else {
            Evaluator::new(trainer.model(), data, &cfg.eval)?.run_all(&tasks)?
        };
        let rows = result_rows(&variation.id(), &results, outcome.diverged);
        let path = dir.join(RESULTS_FILE);
        write_rows(fs::File::create(&path).map_err(Error::io(&path))?, &rows)?;
        Ok(RunSummary {
            variation_id: variation.id(),
            status: RunStatus::Completed,
            epochs: outcome.epochs.len(),
            total_epoch_seconds: outcome.total_seconds(),
            diverged: outcome.diverged,
            error: None,
        })
    })();
    let summary = attempt.unwrap_or_else(|e| RunSummary {
        variation_id: variation.id(),
        status: RunStatus::Failed,
        epochs: 0,
        total_epoch_seconds: 0.0,
        diverged: false,
        error: Some(e.to_string()),
    });
    fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    summary.save(&dir.join(SUMMARY_FILE))?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Whether `dir` already holds a completed run.
pub fn is_complete(dir: &Path) -> bool {
    RunSummary::load(&dir.join(SUMMARY_FILE)).is_ok_and(|s| s.status == RunStatus::Completed)
}

/// Runs every manifest variation that has no completed directory under
/// `out`, using up to `parallel` worker threads.
pub fn run_sweep(manifest: &Manifest, data: &Toy1DDataset, out: &Path, parallel: usize) -> Result<SweepOutcome> {
    manifest.validate()?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    manifest.save(&out.join("manifest.json"))?;
    let variations = manifest.parsed()?;
    let mut outcome = SweepOutcome::default();
    let mut todo = Vec::new();
    for v in variations {
        if is_complete(&out.join(v.id())) {
            outcome.skipped.push(v.id());
        } else {
            todo.push(v);
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunSummary>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..parallel.clamp(1, todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(v) = todo.get(i) else { break };
                let r = run_variation(&manifest.base, v, data, out, manifest.mask_x);
                results.lock().expect("result lock").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("result lock");
    results.sort_by_key(|(i, _)| *i);
    for (i, r) in results {
        let id = todo[i].id();
        match r {
            Ok(s) if s.status == RunStatus::Completed => outcome.ran.push(id),
            Ok(s) => outcome.failed.push((id, s.error.unwrap_or_default())),
            Err(e) => outcome.failed.push((id, e.to_string())),
        }
    }
    Ok(outcome)
}

/// Directory of a variation inside a sweep output.
pub fn variation_dir(out: &Path, v: &Variation) -> PathBuf {
    out.join(v.id())
}
