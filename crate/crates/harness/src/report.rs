//! Tables over the run documents of an output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mtml_core::objectives::MetricReport;
use mtml_core::tasks::{MetricId, TaskId};
use mtml_core::train::{Phase, RunReport};

use crate::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::grid::{ExperimentSpec, GridManifest};
use crate::runner::{collect_records, CONFIG_FILE, GRID_FILE};

pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.txt";

/// Marks a task that belongs to an experiment but has no completed run.
pub const MISSING: &str = "missing";
/// Marks a task the experiment does not train.
pub const ABSENT: &str = "-";

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn load(out: &Path) -> Result<(GridManifest, HarnessConfig)> {
    let grid_path = out.join(GRID_FILE);
    let text = fs::read_to_string(&grid_path).map_err(Error::io(&grid_path))?;
    let mut manifest: GridManifest = serde_json::from_str(&text).map_err(Error::json(&grid_path))?;
    manifest.out_dir = out.to_string_lossy().into_owned();
    let cfg = HarnessConfig::load(&out.join(CONFIG_FILE))?;
    Ok((manifest, cfg))
}

/// Metric values per (experiment, task, metric) over the completed seeds.
type Cells = BTreeMap<(String, TaskId, MetricId), Vec<f64>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentRows {
    pub test: Cells,
    pub pre_finetune: Cells,
    pub epochs: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub completed: BTreeMap<String, usize>,
}

fn add(cells: &mut Cells, id: &str, m: &MetricReport) {
    for (&task, metrics) in &m.tasks {
        for (&metric, &v) in metrics {
            cells.entry((id.to_string(), task, metric)).or_default().push(v);
        }
    }
}

pub fn gather(manifest: &GridManifest, cfg: &HarnessConfig) -> ExperimentRows {
    let mut rows = ExperimentRows::default();
    for (spec, rec) in collect_records(manifest, cfg) {
        let Some(report) = rec.report.as_ref().filter(|_| rec.is_completed()) else {
            continue;
        };
        *rows.completed.entry(spec.id.clone()).or_default() += 1;
        if let Some(t) = &report.test {
            add(&mut rows.test, &spec.id, t);
        }
        if let Some(t) = &report.pre_finetune_test {
            add(&mut rows.pre_finetune, &spec.id, t);
        }
        let e = rows.epochs.entry(spec.id.clone()).or_default();
        e.0.push(report.epochs_total as f64);
        e.1.push(report.epochs_finetune as f64);
    }
    rows
}

fn cell(cells: &Cells, spec: &ExperimentSpec, task: TaskId, metric: MetricId) -> String {
    if !spec.all_tasks().contains(&task) {
        return ABSENT.into();
    }
    match cells.get(&(spec.id.clone(), task, metric)) {
        Some(v) if !v.is_empty() => {
            let (m, s) = mean_std(v);
            format!("{m:.3}±{s:.3}")
        }
        _ => MISSING.into(),
    }
}

fn primary_metrics(cfg: &HarnessConfig) -> Vec<(TaskId, MetricId)> {
    TaskId::ALL
        .into_iter()
        .map(|t| (t, cfg.world.task_spec(t).primary_metric()))
        .collect()
}

fn table(out: &mut String, headers: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let _ = writeln!(out, "{}", line(headers));
    let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    for r in rows {
        let _ = writeln!(out, "{}", line(r));
    }
}

fn metric_table(out: &mut String, cells: &Cells, specs: &[&ExperimentSpec], cfg: &HarnessConfig, counts: &BTreeMap<String, usize>) {
    let prim = primary_metrics(cfg);
    let mut headers: Vec<String> = vec!["exp".into(), "paradigm".into(), "tasks".into()];
    headers.extend(prim.iter().map(|(t, m)| format!("{t} {}", m.name())));
    headers.push("runs".into());
    let rows: Vec<Vec<String>> = specs
        .iter()
        .map(|s| {
            let mut r = vec![s.id.clone(), s.paradigm.name().to_string(), s.label()];
            r.extend(prim.iter().map(|&(t, m)| cell(cells, s, t, m)));
            r.push(format!("{}/{}", counts.get(&s.id).copied().unwrap_or(0), s.seeds.len()));
            r
        })
        .collect();
    table(out, &headers, &rows);
}

const SPARKS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

/// One character per value, scaled between the minimum and maximum.
pub fn sparkline(values: &[f64]) -> String {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return String::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                ' '
            } else if hi > lo {
                SPARKS[(((v - lo) / (hi - lo)) * 7.0).round() as usize]
            } else {
                SPARKS[0]
            }
        })
        .collect()
}

/// At most `width` evenly spaced samples of `values`.
fn thin(values: &[f64], width: usize) -> Vec<f64> {
    if values.len() <= width {
        return values.to_vec();
    }
    (0..width).map(|i| values[i * (values.len() - 1) / (width - 1)]).collect()
}

fn curves(manifest: &GridManifest, cfg: &HarnessConfig) -> String {
    let mut out = String::from("Validation objective per epoch, first completed seed of each experiment.\n\n");
    let mut seen = std::collections::BTreeSet::new();
    for (spec, rec) in collect_records(manifest, cfg) {
        let Some(report) = rec.report.as_ref().filter(|_| rec.is_completed()) else {
            continue;
        };
        if !seen.insert(spec.id.clone()) {
            continue;
        }
        let _ = writeln!(out, "{} {} seed {}", spec.id, spec.label(), rec.seed);
        for phase in [Phase::Train, Phase::Meta, Phase::Finetune] {
            let v = phase_curve(report, phase);
            if v.is_empty() {
                continue;
            }
            let (first, last) = (v[0], v[v.len() - 1]);
            let _ = writeln!(
                out,
                "  {:<8} {:>4} ep  {first:>9.4} -> {last:<9.4} {}",
                format!("{phase:?}").to_lowercase(),
                v.len(),
                sparkline(&thin(&v, 60))
            );
        }
    }
    out
}

fn phase_curve(report: &RunReport, phase: Phase) -> Vec<f64> {
    report.phase(phase).map(|e| e.val_objective).collect()
}

/// Renders the tables, writes them next to the runs and returns the text.
pub fn render(out_dir: &Path) -> Result<String> {
    let (manifest, cfg) = load(out_dir)?;
    let rows = gather(&manifest, &cfg);
    let specs: Vec<&ExperimentSpec> = manifest.specs.iter().collect();

    let mut text = String::new();
    let _ = writeln!(
        text,
        "grid {}  config {}  seeds {:?}\n",
        manifest.name,
        &manifest.config_hash[..12],
        cfg.seeds
    );
    let _ = writeln!(text, "Test metrics (mean±std over seeds; {ABSENT} = task not in experiment)\n");
    metric_table(&mut text, &rows.test, &specs, &cfg, &rows.completed);

    let pre: Vec<&ExperimentSpec> = specs
        .iter()
        .copied()
        .filter(|s| rows.pre_finetune.keys().any(|(id, _, _)| id == &s.id))
        .collect();
    if !pre.is_empty() {
        let _ = writeln!(text, "\nTest metrics after meta-training, before fine-tuning\n");
        metric_table(&mut text, &rows.pre_finetune, &pre, &cfg, &rows.completed);
    }

    let _ = writeln!(text, "\nEpochs (mean over seeds; meta-epochs for meta-trained rows)\n");
    let headers: Vec<String> = ["exp", "paradigm", "tasks", "train", "finetune"].map(String::from).to_vec();
    let epoch_rows: Vec<Vec<String>> = specs
        .iter()
        .map(|s| {
            let (t, f) = match rows.epochs.get(&s.id) {
                Some((t, f)) => (format!("{:.1}", mean_std(t).0), format!("{:.1}", mean_std(f).0)),
                None => (MISSING.into(), MISSING.into()),
            };
            vec![s.id.clone(), s.paradigm.name().into(), s.label(), t, f]
        })
        .collect();
    table(&mut text, &headers, &epoch_rows);

    let failures: Vec<String> = collect_records(&manifest, &cfg)
        .into_iter()
        .filter_map(|(s, r)| r.failure_reason().map(|why| format!("{} seed {}: {why}", s.id, r.seed)))
        .collect();
    if !failures.is_empty() {
        let _ = writeln!(text, "\nFailures\n");
        for f in &failures {
            let _ = writeln!(text, "{f}");
        }
    }

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["exp_id", "task", "metric", "mean", "std", "n"])?;
    for ((id, task, metric), v) in &rows.test {
        let (m, s) = mean_std(v);
        summary.write_record([
            id.clone(),
            task.to_string(),
            metric.name().to_string(),
            m.to_string(),
            s.to_string(),
            v.len().to_string(),
        ])?;
    }
    let summary = summary.into_inner().map_err(|e| Error::Config(e.to_string()))?;

    let write = |name: &str, bytes: &[u8]| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, bytes).map_err(Error::io(&p))
    };
    write(REPORT_FILE, text.as_bytes())?;
    write(SUMMARY_FILE, &summary)?;
    write(CURVES_FILE, curves(&manifest, &cfg).as_bytes())?;
    Ok(text)
}
