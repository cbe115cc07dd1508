//! Executes a grid and writes per-run documents, checkpoints and aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtml_core::train::{run_experiment, RunReport, RunStatus, TaskData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::grid::{run_hash, ExperimentSpec, GridManifest};

pub const RUNS_DIR: &str = "runs";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const GRID_FILE: &str = "grid.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "MANIFEST.toml";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const FAILURES_FILE: &str = "failures.csv";

/// What one run leaves on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub hash: String,
    pub exp_id: String,
    pub seed: u64,
    /// Set when the run could not start or crashed with an error.
    pub error: Option<String>,
    pub report: Option<RunReport>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.error.is_none() && self.report.as_ref().is_some_and(RunReport::is_completed)
    }

    pub fn failure_reason(&self) -> Option<String> {
        if let Some(e) = &self.error {
            return Some(e.clone());
        }
        match &self.report.as_ref()?.status {
            RunStatus::Completed => None,
            RunStatus::Failed { reason } => Some(reason.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub exp_id: String,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: usize,
    pub skipped: usize,
    /// Failed runs of the whole grid found on disk, not only this invocation's.
    pub failures: Vec<Failure>,
    pub aggregate_rows: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub filter: Option<String>,
    pub force: bool,
    pub quiet: bool,
}

/// `4.3` with seed 1 becomes `4-3_s1`; dots would clash with file extensions.
pub fn run_stem(exp_id: &str, seed: u64) -> String {
    format!("{}_s{seed}", exp_id.replace('.', "-"))
}

pub fn run_path(out: &Path, exp_id: &str, seed: u64) -> PathBuf {
    out.join(RUNS_DIR).join(format!("{}.json", run_stem(exp_id, seed)))
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn finished_record(out: &Path, spec: &ExperimentSpec, seed: u64, hash: &str) -> Option<RunRecord> {
    let rec = read_record(&run_path(out, &spec.id, seed)).ok()?;
    (rec.hash == hash && rec.is_completed()).then_some(rec)
}

fn execute_one(spec: &ExperimentSpec, seed: u64, data: &TaskData, hash: String, out: &Path) -> Result<RunRecord> {
    let result = run_experiment(
        spec.paradigm,
        &spec.trained_tasks,
        &spec.added_tasks,
        data,
        &spec.train,
        seed,
    );
    let record = match result {
        Ok(outcome) => {
            if outcome.report.is_completed() {
                let stem = out.join(CHECKPOINT_DIR).join(run_stem(&spec.id, seed));
                outcome.params.save_checkpoint(&stem)?;
            }
            RunRecord {
                hash,
                exp_id: spec.id.clone(),
                seed,
                error: None,
                report: Some(outcome.report),
            }
        }
        Err(e) => RunRecord {
            hash,
            exp_id: spec.id.clone(),
            seed,
            error: Some(e.to_string()),
            report: None,
        },
    };
    let path = run_path(out, &spec.id, seed);
    let json = serde_json::to_vec_pretty(&record).map_err(Error::json(&path))?;
    write_atomic(&path, &json)?;
    Ok(record)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Runs every (spec, seed) pair matching the filter, skipping runs whose
/// document already holds a completed result with the same hash, then
/// rewrites the grid-level files from everything on disk.
pub fn run(manifest: &GridManifest, cfg: &HarnessConfig, opts: &RunOptions) -> Result<RunSummary> {
    let out = Path::new(&manifest.out_dir);
    for dir in [out.to_path_buf(), out.join(RUNS_DIR), out.join(CHECKPOINT_DIR)] {
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    }

    let mut todo = Vec::new();
    let mut skipped = 0;
    for spec in manifest.filtered(opts.filter.as_deref()) {
        for &seed in &spec.seeds {
            let hash = run_hash(spec, seed, cfg);
            if !opts.force && finished_record(out, spec, seed, &hash).is_some() {
                skipped += 1;
            } else {
                todo.push((spec, seed, hash));
            }
        }
    }

    let mut data = BTreeMap::new();
    for (spec, _, _) in &todo {
        if let std::collections::btree_map::Entry::Vacant(e) = data.entry(spec.world_seed) {
            e.insert(TaskData::generate(spec.world_seed, cfg.world.clone(), cfg.splits)?);
        }
    }

    let total = todo.len();
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Result<RunRecord>> = pool(cfg.jobs)?.install(|| {
        todo.into_par_iter()
            .map(|(spec, seed, hash)| {
                let start = Instant::now();
                let rec = execute_one(spec, seed, &data[&spec.world_seed], hash, out);
                if !opts.quiet {
                    let n = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
                    let status = match &rec {
                        Ok(r) if r.is_completed() => "done".to_string(),
                        Ok(r) => format!("failed: {}", r.failure_reason().unwrap_or_default()),
                        Err(e) => format!("error: {e}"),
                    };
                    eprintln!(
                        "[{n}/{total}] {} seed {seed}: {status} ({:.1}s)",
                        spec.id,
                        start.elapsed().as_secs_f64()
                    );
                }
                rec
            })
            .collect()
    });
    let executed = results.len();
    for r in results {
        r?;
    }

    let mut summary = write_grid_files(manifest, cfg)?;
    summary.executed = executed;
    summary.skipped = skipped;
    Ok(summary)
}

/// Per-run records of the manifest found on disk with a matching hash, in
/// grid order.
pub fn collect_records<'a>(manifest: &'a GridManifest, cfg: &HarnessConfig) -> Vec<(&'a ExperimentSpec, RunRecord)> {
    let out = Path::new(&manifest.out_dir);
    let mut records = Vec::new();
    for spec in &manifest.specs {
        for &seed in &spec.seeds {
            if let Ok(rec) = read_record(&run_path(out, &spec.id, seed)) {
                if rec.hash == run_hash(spec, seed, cfg) {
                    records.push((spec, rec));
                }
            }
        }
    }
    records
}

#[derive(Serialize)]
struct ManifestFile<'a> {
    grid: &'a str,
    config_hash: &'a str,
    created_at: &'a str,
    harness_version: &'a str,
    core_version: &'a str,
    world_seed: u64,
    seeds: &'a [u64],
    specs: usize,
    runs_completed: usize,
    runs_failed: usize,
}

const AGGREGATE_HEADER: [&str; 8] = [
    "exp_id",
    "paradigm",
    "seed",
    "task",
    "metric",
    "value",
    "epochs_total",
    "epochs_finetune",
];

fn write_grid_files(manifest: &GridManifest, cfg: &HarnessConfig) -> Result<RunSummary> {
    let out = Path::new(&manifest.out_dir);
    let records = collect_records(manifest, cfg);

    let grid_path = out.join(GRID_FILE);
    let json = serde_json::to_vec_pretty(manifest).map_err(Error::json(&grid_path))?;
    write_atomic(&grid_path, &json)?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let mut agg = csv::Writer::from_writer(Vec::new());
    agg.write_record(AGGREGATE_HEADER)?;
    let mut epochs = csv::Writer::from_writer(Vec::new());
    epochs.write_record(["exp_id", "paradigm", "seed", "epochs_total", "epochs_finetune"])?;
    let mut failures_csv = csv::Writer::from_writer(Vec::new());
    failures_csv.write_record(["exp_id", "seed", "reason"])?;

    let mut rows = 0;
    let mut completed = 0;
    let mut failures = Vec::new();
    for (spec, rec) in &records {
        let seed = rec.seed.to_string();
        match (rec.is_completed(), &rec.report) {
            (true, Some(report)) => {
                completed += 1;
                let (et, ef) = (report.epochs_total.to_string(), report.epochs_finetune.to_string());
                epochs.write_record([&spec.id, spec.paradigm.name(), &seed, &et, &ef])?;
                let test = report.test.as_ref().expect("completed runs carry test metrics");
                for (task, metrics) in &test.tasks {
                    for (metric, value) in metrics {
                        let task = task.to_string();
                        let value = value.to_string();
                        agg.write_record([
                            spec.id.as_str(),
                            spec.paradigm.name(),
                            &seed,
                            &task,
                            metric.name(),
                            &value,
                            &et,
                            &ef,
                        ])?;
                        rows += 1;
                    }
                }
            }
            _ => {
                let reason = rec.failure_reason().unwrap_or_else(|| "incomplete".into());
                failures_csv.write_record([&spec.id, &seed, &reason])?;
                failures.push(Failure {
                    exp_id: spec.id.clone(),
                    seed: rec.seed,
                    reason,
                });
            }
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::Config(e.to_string()));
    write_atomic(&out.join(AGGREGATE_FILE), &finish(agg)?)?;
    write_atomic(&out.join(EPOCHS_FILE), &finish(epochs)?)?;
    write_atomic(&out.join(FAILURES_FILE), &finish(failures_csv)?)?;

    let m = ManifestFile {
        grid: &manifest.name,
        config_hash: &manifest.config_hash,
        created_at: &manifest.created_at,
        harness_version: env!("CARGO_PKG_VERSION"),
        core_version: mtml_core::VERSION,
        world_seed: cfg.world_seed,
        seeds: &cfg.seeds,
        specs: manifest.specs.len(),
        runs_completed: completed,
        runs_failed: failures.len(),
    };
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())?;

    Ok(RunSummary {
        executed: 0,
        skipped: 0,
        failures,
        aggregate_rows: rows,
    })
}
