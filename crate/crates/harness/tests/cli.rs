use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtml_core::tasks::{MetricId, TaskId};
use mtml_harness::config::HarnessConfig;
use mtml_harness::grid::{build_grid, run_hash};
use mtml_harness::report::mean_std;
use mtml_harness::runner::{read_record, run_path, RunRecord, AGGREGATE_FILE, FAILURES_FILE};

fn mtml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtml")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A short training budget with the seeds and output directory baked in.
fn small_config(dir: &Path) -> (PathBuf, HarnessConfig) {
    let mut cfg = HarnessConfig {
        seeds: vec![0, 1],
        jobs: 1,
        out: dir.join("out").to_string_lossy().into_owned(),
        ..HarnessConfig::default()
    };
    cfg.train.max_epochs = 6;
    cfg.train.max_meta_epochs = 3;
    cfg.train.max_finetune_epochs = 4;
    cfg.train.short_finetune_epochs = 2;
    cfg.train.meta_steps_per_epoch = 2;
    let path = dir.join("small.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let loaded = HarnessConfig::load(&path).unwrap();
    (path, loaded)
}

fn run_files(out: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(out.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn filtered_run_rerun_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = small_config(dir.path());
    let out = PathBuf::from(&cfg.out);
    let args = ["run", "--config", config.to_str().unwrap(), "--filter", "1", "--quiet"];

    let first = mtml(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(stdout(&first).contains("executed 8 runs, skipped 0"), "{}", stdout(&first));
    let files = run_files(&out);
    assert_eq!(files.len(), 8);
    assert!(files.iter().all(|f| f.starts_with("1-")), "{files:?}");

    let again = mtml(&args);
    assert!(again.status.success());
    assert!(stdout(&again).contains("executed 0 runs, skipped 8"), "{}", stdout(&again));

    let records: Vec<RunRecord> = files.iter().map(|f| read_record(&out.join("runs").join(f)).unwrap()).collect();
    let metric_count: usize = records
        .iter()
        .map(|r| r.report.as_ref().unwrap().test.as_ref().unwrap().tasks.values().map(|m| m.len()).sum::<usize>())
        .sum();
    let mut agg = csv::Reader::from_path(out.join(AGGREGATE_FILE)).unwrap();
    assert_eq!(agg.records().count(), metric_count);

    let rep = mtml(&["report", "--out", out.to_str().unwrap()]);
    assert!(rep.status.success());
    let text = stdout(&rep);

    let maes: Vec<f64> = [0, 1]
        .into_iter()
        .map(|seed| {
            let r = read_record(&run_path(&out, "1.2", seed)).unwrap();
            r.report.unwrap().test.unwrap().get(TaskId::T2, MetricId::Mae).unwrap()
        })
        .collect();
    let (m, s) = mean_std(&maes);
    let row = |id: &str| {
        text.lines()
            .find(|l| l.split_whitespace().next() == Some(id))
            .unwrap_or_else(|| panic!("no row {id} in\n{text}"))
            .to_string()
    };
    let single = row("1.2");
    assert!(single.contains(&format!("{m:.3}±{s:.3}")), "{single}");
    let cells: Vec<&str> = single.split_whitespace().collect();
    assert_eq!(cells[3], "-", "{single}");
    assert!(text.lines().filter(|l| l.starts_with("2.1 ")).all(|l| l.contains("missing")));

    let epochs = text.split("Epochs").nth(1).unwrap();
    let e_row = epochs.lines().find(|l| l.starts_with("1.2 ")).unwrap();
    assert_eq!(e_row.split_whitespace().last(), Some("0.0"), "{e_row}");
}

#[test]
fn failed_runs_are_reported_and_kept_out_of_the_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let (config, cfg) = small_config(dir.path());
    let out = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(out.join("runs")).unwrap();

    let specs = build_grid("default", &cfg).unwrap();
    let spec = specs.iter().find(|s| s.id == "2.1").unwrap();
    let failed = RunRecord {
        hash: run_hash(spec, 0, &cfg),
        exp_id: spec.id.clone(),
        seed: 0,
        error: Some("injected failure".into()),
        report: None,
    };
    std::fs::write(run_path(&out, "2.1", 0), serde_json::to_vec(&failed).unwrap()).unwrap();

    let o = mtml(&["run", "--config", config.to_str().unwrap(), "--filter", "1.1", "--quiet"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("injected failure"));

    let failures = std::fs::read_to_string(out.join(FAILURES_FILE)).unwrap();
    assert!(failures.contains("2.1,0,injected failure"), "{failures}");
    let mut agg = csv::Reader::from_path(out.join(AGGREGATE_FILE)).unwrap();
    let ids: Vec<String> = agg.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert!(!ids.is_empty());
    assert!(ids.iter().all(|id| id == "1.1"), "{ids:?}");
}

#[test]
fn listing_commands() {
    let grid = stdout(&mtml(&["grid"]));
    assert!(grid.starts_with("grid default (26 experiments"), "{grid}");
    assert_eq!(grid.lines().count(), 27);

    let transfer = stdout(&mtml(&["grid", "--grid", "transfer", "--json"]));
    let specs: serde_json::Value = serde_json::from_str(&transfer).unwrap();
    assert_eq!(specs.as_array().unwrap().len(), 8);

    assert!(stdout(&mtml(&["combos"])).ends_with("11 combos\n"));
    assert!(stdout(&mtml(&["combos", "--tasks", "T1,T2"])).contains("1 combos"));

    let batch = stdout(&mtml(&["export-batch", "--tasks", "T1,T2", "--size", "5"]));
    let lines: Vec<&str> = batch.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("x0,") && lines[0].ends_with("T1,T2"), "{}", lines[0]);

    assert!(!mtml(&["grid", "--grid", "nope"]).status.success());
    assert!(!mtml(&["run", "--filter", "9.9"]).status.success());
}
