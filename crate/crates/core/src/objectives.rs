//! Task losses, the masked uncertainty-weighted combination, and evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::network::{forward, BoundParams, Gradients, ParamSet};
use crate::tasks::{Batch, MetricId, Target, TaskId, TaskKind};
use crate::tensor::{Graph, Tensor, Var};

pub const HUBER_DELTA: f64 = 1.0;

/// Tasks whose losses take part in a training step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    included: BTreeSet<TaskId>,
}

impl TaskMask {
    pub fn new(included: BTreeSet<TaskId>) -> Self {
        Self { included }
    }

    pub fn all() -> Self {
        Self::new(TaskId::ALL.into_iter().collect())
    }

    pub fn includes(&self, task: TaskId) -> bool {
        self.included.contains(&task)
    }

    pub fn tasks(&self) -> &BTreeSet<TaskId> {
        &self.included
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }
}

impl FromIterator<TaskId> for TaskMask {
    fn from_iter<I: IntoIterator<Item = TaskId>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// How per-task losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `exp(-s)·L + s/2` with learnable `s = log σ²`.
    #[default]
    Uncertainty,
    /// Plain sum; log-variances stay out of the graph.
    Equal,
}

fn check_rows(task: TaskId, pred: &[usize], rows: usize, cols: usize) -> Result<()> {
    if pred != [rows, cols] {
        return Err(Error::Shape {
            op: match task {
                TaskId::T1 => "task_loss(T1)",
                TaskId::T2 => "task_loss(T2)",
                TaskId::T3 => "task_loss(T3)",
                TaskId::T4 => "task_loss(T4)",
            },
            left: pred.to_vec(),
            right: vec![rows, cols],
        });
    }
    Ok(())
}

/// Scalar loss of one task: mean cross-entropy (T1), mean squared error (T2),
/// mean `1 − cos` (T3) or mean Huber with δ = 1 (T4).
pub fn task_loss(g: &mut Graph, task: TaskId, pred: Var, target: &Target) -> Result<Var> {
    let rows = target.len();
    let loss = match (task.kind(), target) {
        (TaskKind::Classification, Target::Labels(labels)) => {
            let classes = g.shape(pred).get(1).copied().unwrap_or(0);
            check_rows(task, g.shape(pred), rows, classes)?;
            let mut onehot = vec![0.0; rows * classes];
            for (r, &l) in labels.iter().enumerate() {
                if l >= classes {
                    return Err(Error::Argument(format!("label {l} out of range for {classes} classes")));
                }
                onehot[r * classes + l] = 1.0;
            }
            let onehot = g.constant(Tensor::new(vec![rows, classes], onehot)?);
            let logp = g.log_softmax(pred)?;
            let picked = g.mul(logp, onehot)?;
            let total = g.sum(picked, None)?;
            g.scale(total, -1.0 / rows as f64)
        }
        (TaskKind::ScalarRegression, Target::Values(y)) => {
            check_rows(task, g.shape(pred), rows, y.shape()[1])?;
            let y = g.constant(y.clone());
            let d = g.sub(pred, y)?;
            let sq = g.mul(d, d)?;
            g.mean(sq, None)?
        }
        (TaskKind::UnitVecRegression, Target::Values(y)) => {
            check_rows(task, g.shape(pred), rows, y.shape()[1])?;
            let y = g.constant(y.clone());
            let unit = g.normalize_rows(pred)?;
            let prod = g.mul(unit, y)?;
            let cos = g.sum(prod, Some(1))?;
            let mean_cos = g.mean(cos, None)?;
            let neg = g.scale(mean_cos, -1.0);
            g.shift(neg, 1.0)
        }
        (TaskKind::RobustRegression, Target::Values(y)) => {
            check_rows(task, g.shape(pred), rows, y.shape()[1])?;
            let y = g.constant(y.clone());
            let d = g.sub(pred, y)?;
            let h = g.huber(d, HUBER_DELTA);
            g.mean(h, None)?
        }
        _ => {
            return Err(Error::Argument(format!(
                "target kind does not match task {task}"
            )))
        }
    };
    if !g.value(loss).all_finite() {
        return Err(Error::non_finite(format!("loss of task {task}")));
    }
    Ok(loss)
}

/// `Σ_{i in mask} exp(−s_i)·L_i + s_i/2` (or the plain sum under [`Weighting::Equal`]).
/// Tasks outside the mask add no nodes to the graph.
pub fn combined_loss(
    g: &mut Graph,
    losses: &BTreeMap<TaskId, Var>,
    logvars: &BTreeMap<TaskId, Var>,
    mask: &TaskMask,
    weighting: Weighting,
) -> Result<Var> {
    if mask.is_empty() {
        return Err(Error::Argument("task mask must include at least one task".into()));
    }
    let mut total: Option<Var> = None;
    for &task in mask.tasks() {
        let loss = *losses.get(&task).ok_or(Error::UnknownTask(task))?;
        let term = match weighting {
            Weighting::Equal => loss,
            Weighting::Uncertainty => {
                let s = *logvars.get(&task).ok_or(Error::UnknownTask(task))?;
                let neg = g.scale(s, -1.0);
                let precision = g.exp(neg);
                let weighted = g.mul(precision, loss)?;
                let half_s = g.scale(s, 0.5);
                g.add(weighted, half_s)?
            }
        };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("mask is nonempty"))
}

/// Result of one loss evaluation with gradients.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub total: f64,
    pub per_task: BTreeMap<TaskId, f64>,
    pub grads: Gradients,
}

struct CombinedGraph {
    graph: Graph,
    bound: BoundParams,
    losses: BTreeMap<TaskId, Var>,
    total: Var,
    total_value: f64,
}

fn build_combined(
    params: &ParamSet,
    batch: &Batch,
    mask: &TaskMask,
    weighting: Weighting,
) -> Result<CombinedGraph> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, mask.tasks(), weighting == Weighting::Uncertainty)?;
    let x = g.constant(batch.x.clone());
    let preds = forward(&mut g, &bound, x)?;
    let mut losses = BTreeMap::new();
    let mut logvars = BTreeMap::new();
    for &task in mask.tasks() {
        losses.insert(task, task_loss(&mut g, task, preds[&task], batch.target(task)?)?);
        if let Some(s) = bound.logvar(task) {
            logvars.insert(task, s);
        }
    }
    let total = combined_loss(&mut g, &losses, &logvars, mask, weighting)?;
    let total_value = g.value(total).item()?;
    if !total_value.is_finite() {
        return Err(Error::non_finite("combined loss"));
    }
    Ok(CombinedGraph {
        graph: g,
        bound,
        losses,
        total,
        total_value,
    })
}

/// Forward, combined loss and backward over the masked tasks of `batch`.
pub fn loss_and_grads(
    params: &ParamSet,
    batch: &Batch,
    mask: &TaskMask,
    weighting: Weighting,
) -> Result<LossEval> {
    let CombinedGraph {
        graph: mut g,
        bound,
        losses,
        total,
        total_value,
    } = build_combined(params, batch, mask, weighting)?;
    g.backward(total)?;
    Ok(LossEval {
        total: total_value,
        per_task: losses
            .iter()
            .map(|(&t, &v)| (t, g.value(v).data()[0]))
            .collect(),
        grads: params.collect_grads(&g, &bound),
    })
}

/// Value of the combined loss over the masked tasks, without gradients.
pub fn combined_loss_value(
    params: &ParamSet,
    batch: &Batch,
    mask: &TaskMask,
    weighting: Weighting,
) -> Result<f64> {
    Ok(build_combined(params, batch, mask, weighting)?.total_value)
}

/// Unweighted per-task losses, without gradients.
pub fn task_losses(
    params: &ParamSet,
    batch: &Batch,
    tasks: &BTreeSet<TaskId>,
) -> Result<BTreeMap<TaskId, f64>> {
    let preds = params.predict(&batch.x, tasks)?;
    let mut out = BTreeMap::new();
    for (&task, pred) in &preds {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let l = task_loss(&mut g, task, p, batch.target(task)?)?;
        out.insert(task, g.value(l).data()[0]);
    }
    Ok(out)
}

/// Human-facing metrics per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: BTreeMap<TaskId, BTreeMap<MetricId, f64>>,
}

impl MetricReport {
    pub fn get(&self, task: TaskId, metric: MetricId) -> Option<f64> {
        self.tasks.get(&task)?.get(&metric).copied()
    }

    /// One flat record: context fields followed by `"<task>.<metric>"` entries.
    pub fn flat_record(&self, context: &[(&str, Value)]) -> Map<String, Value> {
        let mut m = Map::new();
        for (k, v) in context {
            m.insert((*k).to_string(), v.clone());
        }
        for (task, metrics) in &self.tasks {
            for (metric, v) in metrics {
                m.insert(format!("{task}.{}", metric.name()), Value::from(*v));
            }
        }
        m
    }
}

pub const ANGLE_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];

/// Angular error in degrees between two vectors, after normalising both.
pub fn angular_error_deg(pred: &[f64], target: &[f64]) -> f64 {
    cosine(pred, target).acos().to_degrees()
}

/// Cosine of two vectors, clamped to [−1, 1]; zero vectors count as orthogonal.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of `pred` against `target` for one task.
pub fn task_metrics(task: TaskId, pred: &Tensor, target: &Target) -> Result<BTreeMap<MetricId, f64>> {
    let rows = target.len();
    let mut m = BTreeMap::new();
    match (task.kind(), target) {
        (TaskKind::Classification, Target::Labels(labels)) => {
            let correct = (0..rows)
                .filter(|&r| {
                    let row = pred.row(r);
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                            if v > best.1 {
                                (k, v)
                            } else {
                                best
                            }
                        })
                        .0;
                    arg == labels[r]
                })
                .count();
            m.insert(MetricId::Accuracy, correct as f64 / rows as f64);
        }
        (TaskKind::ScalarRegression | TaskKind::RobustRegression, Target::Values(y)) => {
            let mae = pred
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / y.numel() as f64;
            m.insert(MetricId::Mae, mae);
        }
        (TaskKind::UnitVecRegression, Target::Values(y)) => {
            let cos: Vec<f64> = (0..rows).map(|r| cosine(pred.row(r), y.row(r))).collect();
            let angles: Vec<f64> = cos.iter().map(|c| c.acos().to_degrees()).collect();
            let pct = |thr: f64| {
                100.0 * angles.iter().filter(|&&a| a <= thr).count() as f64 / rows as f64
            };
            m.insert(MetricId::CosineSim, cos.iter().sum::<f64>() / rows as f64);
            m.insert(
                MetricId::AngularMeanDeg,
                angles.iter().sum::<f64>() / rows as f64,
            );
            m.insert(MetricId::AngularMedianDeg, median(angles.clone()));
            m.insert(MetricId::PctWithin11_25, pct(ANGLE_THRESHOLDS_DEG[0]));
            m.insert(MetricId::PctWithin22_5, pct(ANGLE_THRESHOLDS_DEG[1]));
            m.insert(MetricId::PctWithin30, pct(ANGLE_THRESHOLDS_DEG[2]));
        }
        _ => {
            return Err(Error::Argument(format!(
                "target kind does not match task {task}"
            )))
        }
    }
    Ok(m)
}

pub fn evaluate(params: &ParamSet, batch: &Batch, tasks: &BTreeSet<TaskId>) -> Result<MetricReport> {
    let preds = params.predict(&batch.x, tasks)?;
    let mut report = MetricReport::default();
    for (&task, pred) in &preds {
        report
            .tasks
            .insert(task, task_metrics(task, pred, batch.target(task)?)?);
    }
    Ok(report)
}
