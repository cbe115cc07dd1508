//! Learning paradigms: single-task, joint multi-task, meta-training over
//! multi-task episodes, and fine-tuning on new tasks.
//!
//! A plain epoch is one pass over the training split in minibatches; a
//! meta-epoch is `meta_steps_per_epoch` outer steps, each over the whole combo
//! family. Early stopping watches per-task validation losses.

pub mod stopping;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::episodes::{generate_combos, meta_batch, Episode};
use crate::error::{Error, Result};
use crate::meta::{adapted_query_loss, outer_step, InnerScope, MetaConfig, OuterMode};
use crate::network::{NetConfig, ParamSet};
use crate::objectives::{evaluate, loss_and_grads, task_losses, MetricReport, TaskMask, Weighting};
use crate::optim::{AdamW, AdamWConfig, UpdateScope};
use crate::rng::{derive_seed, derive_seed2};
use crate::tasks::{format_task_list, make_splits, make_world, permutation, SplitSizes, Splits, TaskId, WorldConfig};

pub use stopping::{StopState, StopUpdate, GLOBAL_PATIENCE, TASK_PATIENCE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Single,
    Mtl,
    MtlFinetune,
    /// Meta-training followed by a short all-parameter fine-tune of the same tasks.
    Mtml,
    MtmlFinetune,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Single => "single",
            Paradigm::Mtl => "mtl",
            Paradigm::MtlFinetune => "mtl_finetune",
            Paradigm::Mtml => "mtml",
            Paradigm::MtmlFinetune => "mtml_finetune",
        }
    }

    pub fn is_finetune(self) -> bool {
        matches!(self, Paradigm::MtlFinetune | Paradigm::MtmlFinetune)
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Paradigm::Single,
            Paradigm::Mtl,
            Paradigm::MtlFinetune,
            Paradigm::Mtml,
            Paradigm::MtmlFinetune,
        ]
        .into_iter()
        .find(|p| p.name() == s)
        .ok_or_else(|| Error::Argument(format!("unknown paradigm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Trunk and previously trained heads frozen; only new heads learn.
    HeadsOnly,
    /// Trunk and new heads learn on the new tasks' losses; old heads are untouched.
    #[default]
    NewTasks,
    /// Every parameter learns, on the losses of old and new tasks together.
    AllParams,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::HeadsOnly => "heads_only",
            FinetuneMode::NewTasks => "new_tasks",
            FinetuneMode::AllParams => "all_params",
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heads_only" => Ok(FinetuneMode::HeadsOnly),
            "new_tasks" => Ok(FinetuneMode::NewTasks),
            "all_params" => Ok(FinetuneMode::AllParams),
            other => Err(Error::Argument(format!("unknown finetune mode {other:?}"))),
        }
    }
}

/// Layer widths shared by every paradigm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetShape {
    pub trunk_widths: Vec<usize>,
    pub d_repr: usize,
    pub head_widths: Vec<usize>,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            trunk_widths: vec![32, 32],
            d_repr: 16,
            head_widths: vec![16],
        }
    }
}

impl NetShape {
    pub fn net_config(&self, world: &WorldConfig, tasks: &BTreeSet<TaskId>) -> NetConfig {
        NetConfig::with_widths(
            world,
            tasks,
            self.trunk_widths.clone(),
            self.d_repr,
            self.head_widths.clone(),
        )
    }
}

/// Hyper-parameters shared by all paradigms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetShape,
    /// AdamW learning rate for plain training, fine-tuning and the outer step.
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub max_meta_epochs: usize,
    pub max_finetune_epochs: usize,
    /// Epoch budget of the same-task fine-tune that follows meta-training.
    pub short_finetune_epochs: usize,
    pub task_patience: usize,
    pub global_patience: usize,
    /// Loss weighting whenever more than one task is trained together.
    pub weighting: Weighting,
    pub inner_lr: f64,
    pub inner_scope: InnerScope,
    pub support_size: usize,
    pub query_size: usize,
    pub k_per_combo: usize,
    pub meta_steps_per_epoch: usize,
    /// Rounds over the combo family used for the held-out meta-validation proxy.
    pub meta_val_rounds: usize,
    pub finetune_mode: FinetuneMode,
    /// Meta-train on only two source tasks (a single combo) instead of rejecting it.
    pub allow_two_source: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetShape::default(),
            lr: 3e-3,
            weight_decay: 0.1,
            batch_size: 32,
            max_epochs: 500,
            max_meta_epochs: 200,
            max_finetune_epochs: 500,
            short_finetune_epochs: 50,
            task_patience: TASK_PATIENCE,
            global_patience: GLOBAL_PATIENCE,
            weighting: Weighting::Uncertainty,
            inner_lr: 0.01,
            inner_scope: InnerScope::TrunkAndHeads,
            support_size: 16,
            query_size: 16,
            k_per_combo: 1,
            meta_steps_per_epoch: 8,
            meta_val_rounds: 2,
            finetune_mode: FinetuneMode::NewTasks,
            allow_two_source: false,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            inner_lr: self.inner_lr,
            inner_scope: self.inner_scope,
            weighting: self.weighting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("support_size", self.support_size),
            ("query_size", self.query_size),
            ("k_per_combo", self.k_per_combo),
            ("meta_steps_per_epoch", self.meta_steps_per_epoch),
            ("meta_val_rounds", self.meta_val_rounds),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Argument(format!(
                "inner_lr must be non-negative, got {}",
                self.inner_lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Argument("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// The splits every paradigm trains on, built once per world seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub world_seed: u64,
    pub world: WorldConfig,
    pub splits: Splits,
    pub fingerprint: String,
}

impl TaskData {
    pub fn generate(world_seed: u64, world: WorldConfig, sizes: SplitSizes) -> Result<Self> {
        let w = make_world(world_seed, world.clone())?;
        let splits = make_splits(&w, sizes, world_seed)?;
        let fingerprint = splits.fingerprint();
        Ok(Self {
            world_seed,
            world,
            splits,
            fingerprint,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Meta,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochStats {
    /// Mean query loss over the meta-batches of the epoch.
    pub query_loss: f64,
    /// Mean adapted query loss over held-out validation episodes.
    pub val_proxy: f64,
    pub descent_fraction: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_losses: BTreeMap<TaskId, f64>,
    /// Sum of `val_losses`, or the validation proxy for meta-epochs.
    pub val_objective: f64,
    pub train_metrics: MetricReport,
    pub val_metrics: MetricReport,
    pub stopped: BTreeSet<TaskId>,
    pub meta: Option<MetaEpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub paradigm: Paradigm,
    pub trained_tasks: BTreeSet<TaskId>,
    pub finetuned_tasks: BTreeSet<TaskId>,
    pub finetune_mode: Option<FinetuneMode>,
    pub seed: u64,
    pub world_seed: u64,
    pub split_fingerprint: String,
    pub epochs_total: usize,
    pub epochs_finetune: usize,
    pub history: Vec<EpochRecord>,
    /// Test metrics before the same-task fine-tune that follows meta-training.
    pub pre_finetune_test: Option<MetricReport>,
    pub test: Option<MetricReport>,
    pub test_evaluations: usize,
    pub status: RunStatus,
}

impl RunReport {
    fn new(paradigm: Paradigm, trained: &BTreeSet<TaskId>, data: &TaskData, seed: u64) -> Self {
        Self {
            paradigm,
            trained_tasks: trained.clone(),
            finetuned_tasks: BTreeSet::new(),
            finetune_mode: None,
            seed,
            world_seed: data.world_seed,
            split_fingerprint: data.fingerprint.clone(),
            epochs_total: 0,
            epochs_finetune: 0,
            history: Vec::new(),
            pre_finetune_test: None,
            test: None,
            test_evaluations: 0,
            status: RunStatus::Completed,
        }
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.history.iter().filter(move |r| r.phase == phase)
    }

    /// Validation loss of `task` at the last epoch of `phase`.
    pub fn final_val_loss(&self, phase: Phase, task: TaskId) -> Option<f64> {
        self.phase(phase).last()?.val_losses.get(&task).copied()
    }

    /// First epoch of `phase` whose validation loss for `task` is at most `threshold`.
    pub fn first_epoch_reaching(&self, phase: Phase, task: TaskId, threshold: f64) -> Option<usize> {
        self.phase(phase)
            .find(|r| r.val_losses.get(&task).is_some_and(|&v| v <= threshold))
            .map(|r| r.epoch)
    }

    /// Every task the run's final network predicts.
    pub fn all_tasks(&self) -> BTreeSet<TaskId> {
        self.trained_tasks.union(&self.finetuned_tasks).copied().collect()
    }

    fn evaluate_test(&mut self, params: &ParamSet, data: &TaskData) -> Result<MetricReport> {
        self.test_evaluations += 1;
        evaluate(params, &data.splits.test, &self.all_tasks())
    }
}

/// Final parameters and the report of one run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub params: ParamSet,
    pub report: RunReport,
}

/// Streams for seeding the different phases of a run.
const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_META: u64 = 3;
const STREAM_META_VAL: u64 = 4;
const STREAM_FINETUNE: u64 = 5;
const STREAM_HEADS: u64 = 6;

fn weighting_for(tasks: &BTreeSet<TaskId>, cfg: &TrainConfig) -> Weighting {
    if tasks.len() == 1 {
        Weighting::Equal
    } else {
        cfg.weighting
    }
}

/// Minibatch AdamW training of `tasks` with task-wise and global early stopping.
/// Stopped tasks are frozen; their losses still reach the trunk.
#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut ParamSet,
    tasks: &BTreeSet<TaskId>,
    data: &TaskData,
    cfg: &TrainConfig,
    phase: Phase,
    max_epochs: usize,
    seed: u64,
    history: &mut Vec<EpochRecord>,
) -> Result<usize> {
    let weighting = weighting_for(tasks, cfg);
    let scope = match weighting {
        Weighting::Uncertainty => UpdateScope::everything(tasks),
        Weighting::Equal => UpdateScope::without_logvars(tasks),
    };
    let mask = TaskMask::new(tasks.clone());
    let train = data.splits.train.restrict(tasks)?;
    let mut opt = AdamW::new(cfg.adamw());
    let mut stop = StopState::new(tasks, cfg.task_patience, cfg.global_patience);
    let mut epochs = 0;
    for epoch in 1..=max_epochs {
        let order = permutation(train.len(), derive_seed(seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for rows in order.chunks(cfg.batch_size) {
            let batch = train.select(rows, tasks)?;
            let eval = loss_and_grads(params, &batch, &mask, weighting)?;
            opt.step(params, &eval.grads, &scope)?;
            loss_sum += eval.total;
            batches += 1;
        }
        let val_losses = task_losses(params, &data.splits.val, tasks)?;
        if let Some((t, _)) = val_losses.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::non_finite(format!("validation loss of {t} at epoch {epoch}")));
        }
        let val_objective = val_losses.values().sum();
        let update = stop.update(epoch, &val_losses, val_objective);
        for &t in &update.newly_stopped {
            params.freeze(t)?;
        }
        history.push(EpochRecord {
            phase,
            epoch,
            train_loss: loss_sum / batches as f64,
            val_losses,
            val_objective,
            train_metrics: evaluate(params, &data.splits.train, tasks)?,
            val_metrics: evaluate(params, &data.splits.val, tasks)?,
            stopped: stop.stopped.keys().copied().collect(),
            meta: None,
        });
        epochs = epoch;
        if stop.finished() {
            break;
        }
    }
    Ok(epochs)
}

fn meta_fit(
    params: &mut ParamSet,
    source: &BTreeSet<TaskId>,
    data: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
    history: &mut Vec<EpochRecord>,
) -> Result<usize> {
    let family = generate_combos(source)?;
    if family.insufficient && !cfg.allow_two_source {
        return Err(Error::Argument(format!(
            "meta-training on {} gives a single episode; enable allow_two_source to proceed",
            format_task_list(source)
        )));
    }
    let meta_cfg = cfg.meta();
    let mut opt = AdamW::new(cfg.adamw());
    let val_episodes: Vec<Episode> = meta_batch(
        &family.combos,
        cfg.meta_val_rounds,
        &data.splits.val,
        cfg.support_size,
        cfg.query_size,
        derive_seed(seed, STREAM_META_VAL),
    )?;
    let mut stop = StopState::new(&BTreeSet::new(), cfg.task_patience, cfg.global_patience);
    let mut epochs = 0;
    for epoch in 1..=cfg.max_meta_epochs {
        let mut query = 0.0;
        let mut descent = 0.0;
        let mut grad_norm = 0.0;
        for step in 0..cfg.meta_steps_per_epoch {
            let batch = meta_batch(
                &family.combos,
                cfg.k_per_combo,
                &data.splits.train,
                cfg.support_size,
                cfg.query_size,
                derive_seed2(seed, epoch as u64, step as u64),
            )?;
            let report = outer_step(params, &batch, &mut opt, &meta_cfg, OuterMode::FirstOrder)?;
            query += report.query_total / batch.len() as f64;
            descent += report.descent_fraction();
            grad_norm += report.grad_norm;
        }
        let steps = cfg.meta_steps_per_epoch as f64;
        let mut proxy = 0.0;
        for ep in &val_episodes {
            proxy += adapted_query_loss(params, ep, &meta_cfg)?;
        }
        let proxy = proxy / val_episodes.len() as f64;
        if !proxy.is_finite() {
            return Err(Error::non_finite(format!("meta-validation proxy at epoch {epoch}")));
        }
        let update = stop.update(epoch, &BTreeMap::new(), proxy);
        history.push(EpochRecord {
            phase: Phase::Meta,
            epoch,
            train_loss: query / steps,
            val_losses: task_losses(params, &data.splits.val, source)?,
            val_objective: proxy,
            train_metrics: evaluate(params, &data.splits.train, source)?,
            val_metrics: evaluate(params, &data.splits.val, source)?,
            stopped: BTreeSet::new(),
            meta: Some(MetaEpochStats {
                query_loss: query / steps,
                val_proxy: proxy,
                descent_fraction: descent / steps,
                grad_norm: grad_norm / steps,
            }),
        });
        epochs = epoch;
        if update.global_stop {
            break;
        }
    }
    Ok(epochs)
}

/// Adds fresh heads for `new_tasks`, sets up freezing for `mode`, and trains.
/// Returns the number of fine-tune epochs.
#[allow(clippy::too_many_arguments)]
fn finetune_fit(
    params: &mut ParamSet,
    trained: &BTreeSet<TaskId>,
    new_tasks: &BTreeSet<TaskId>,
    mode: FinetuneMode,
    data: &TaskData,
    cfg: &TrainConfig,
    max_epochs: usize,
    seed: u64,
    history: &mut Vec<EpochRecord>,
) -> Result<usize> {
    if let Some(t) = new_tasks.intersection(trained).next() {
        return Err(Error::Argument(format!("task {t} is both trained and new")));
    }
    if let Some(&t) = trained.iter().find(|t| !params.tasks().contains(t)) {
        return Err(Error::UnknownTask(t));
    }
    let out_dims = new_tasks
        .iter()
        .map(|&t| (t, data.world.task_spec(t).out_dim))
        .collect();
    *params = params.with_new_tasks(&out_dims, &cfg.net.head_widths, derive_seed(seed, STREAM_HEADS))?;
    for t in params.tasks() {
        params.unfreeze(t);
    }
    params.set_trunk_frozen(false);
    let tasks = match mode {
        FinetuneMode::HeadsOnly => {
            if new_tasks.is_empty() {
                return Err(Error::Argument("heads-only fine-tuning needs a new task".into()));
            }
            params.set_trunk_frozen(true);
            for &t in trained {
                params.freeze(t)?;
            }
            new_tasks.clone()
        }
        FinetuneMode::NewTasks => {
            if new_tasks.is_empty() {
                return Err(Error::Argument("new-task fine-tuning needs a new task".into()));
            }
            new_tasks.clone()
        }
        FinetuneMode::AllParams => trained.union(new_tasks).copied().collect(),
    };
    let epochs = fit(params, &tasks, data, cfg, Phase::Finetune, max_epochs, seed, history)?;
    Ok(epochs)
}

fn check_tasks(trained: &BTreeSet<TaskId>, added: &BTreeSet<TaskId>, paradigm: Paradigm) -> Result<()> {
    let need = match paradigm {
        Paradigm::Single => (trained.len() == 1, "exactly one trained task"),
        Paradigm::Mtl | Paradigm::MtlFinetune => (trained.len() >= 2, "at least two trained tasks"),
        Paradigm::Mtml | Paradigm::MtmlFinetune => (trained.len() >= 2, "at least two source tasks"),
    };
    if !need.0 {
        return Err(Error::Argument(format!("{paradigm} needs {}", need.1)));
    }
    if paradigm.is_finetune() == added.is_empty() {
        return Err(Error::Argument(if added.is_empty() {
            format!("{paradigm} needs at least one added task")
        } else {
            format!("{paradigm} takes no added tasks")
        }));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn execute(
    paradigm: Paradigm,
    trained: &BTreeSet<TaskId>,
    added: &BTreeSet<TaskId>,
    data: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
    params: &mut ParamSet,
    report: &mut RunReport,
) -> Result<()> {
    let mut history = Vec::new();
    let outcome = (|| -> Result<()> {
        match paradigm {
            Paradigm::Single | Paradigm::Mtl | Paradigm::MtlFinetune => {
                report.epochs_total = fit(
                    params,
                    trained,
                    data,
                    cfg,
                    Phase::Train,
                    cfg.max_epochs,
                    derive_seed(seed, STREAM_TRAIN),
                    &mut history,
                )?;
            }
            Paradigm::Mtml | Paradigm::MtmlFinetune => {
                report.epochs_total =
                    meta_fit(params, trained, data, cfg, derive_seed(seed, STREAM_META), &mut history)?;
            }
        }
        match paradigm {
            Paradigm::MtlFinetune | Paradigm::MtmlFinetune => {
                report.finetuned_tasks = added.clone();
                report.finetune_mode = Some(cfg.finetune_mode);
                report.epochs_finetune = finetune_fit(
                    params,
                    trained,
                    added,
                    cfg.finetune_mode,
                    data,
                    cfg,
                    cfg.max_finetune_epochs,
                    derive_seed(seed, STREAM_FINETUNE),
                    &mut history,
                )?;
            }
            Paradigm::Mtml => {
                report.pre_finetune_test = Some(report.evaluate_test(params, data)?);
                report.finetune_mode = Some(FinetuneMode::AllParams);
                report.epochs_finetune = finetune_fit(
                    params,
                    trained,
                    &BTreeSet::new(),
                    FinetuneMode::AllParams,
                    data,
                    cfg,
                    cfg.short_finetune_epochs,
                    derive_seed(seed, STREAM_FINETUNE),
                    &mut history,
                )?;
            }
            Paradigm::Single | Paradigm::Mtl => {}
        }
        Ok(())
    })();
    report.history = history;
    outcome
}

/// Runs one paradigm end to end and evaluates the test split once.
///
/// Divergence (a non-finite loss) yields a report with a failed status rather
/// than an error; invalid arguments are errors.
pub fn run_experiment(
    paradigm: Paradigm,
    trained: &BTreeSet<TaskId>,
    added: &BTreeSet<TaskId>,
    data: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Outcome> {
    cfg.validate()?;
    check_tasks(trained, added, paradigm)?;
    let net = cfg.net.net_config(&data.world, trained);
    let mut params = ParamSet::init(net, derive_seed(seed, STREAM_INIT))?;
    let mut report = RunReport::new(paradigm, trained, data, seed);
    match execute(paradigm, trained, added, data, cfg, seed, &mut params, &mut report) {
        Ok(()) => {
            report.test = Some(report.evaluate_test(&params, data)?);
        }
        Err(e @ Error::NonFinite { .. }) => {
            report.status = RunStatus::Failed {
                reason: e.to_string(),
            };
        }
        Err(e) => return Err(e),
    }
    Ok(Outcome { params, report })
}

/// Trunk plus one head, trained on that task alone.
pub fn train_single(task: TaskId, data: &TaskData, cfg: &TrainConfig, seed: u64) -> Result<Outcome> {
    run_experiment(
        Paradigm::Single,
        &[task].into_iter().collect(),
        &BTreeSet::new(),
        data,
        cfg,
        seed,
    )
}

/// Joint training of all `tasks` on the combined loss.
pub fn train_mtl(tasks: &BTreeSet<TaskId>, data: &TaskData, cfg: &TrainConfig, seed: u64) -> Result<Outcome> {
    run_experiment(Paradigm::Mtl, tasks, &BTreeSet::new(), data, cfg, seed)
}

/// Meta-training only: returns the meta-learned parameters with a report of
/// the meta-epochs (no fine-tune, test evaluated once on the source tasks).
pub fn meta_train(source: &BTreeSet<TaskId>, data: &TaskData, cfg: &TrainConfig, seed: u64) -> Result<Outcome> {
    cfg.validate()?;
    if source.len() < 2 {
        return Err(Error::Argument(format!(
            "meta-training needs at least two source tasks, got {}",
            source.len()
        )));
    }
    let net = cfg.net.net_config(&data.world, source);
    let mut params = ParamSet::init(net, derive_seed(seed, STREAM_INIT))?;
    let mut report = RunReport::new(Paradigm::Mtml, source, data, seed);
    let mut history = Vec::new();
    match meta_fit(&mut params, source, data, cfg, derive_seed(seed, STREAM_META), &mut history) {
        Ok(epochs) => {
            report.epochs_total = epochs;
            report.history = history;
            report.test = Some(report.evaluate_test(&params, data)?);
        }
        Err(e @ Error::NonFinite { .. }) => {
            report.history = history;
            report.status = RunStatus::Failed {
                reason: e.to_string(),
            };
        }
        Err(e) => return Err(e),
    }
    Ok(Outcome { params, report })
}

/// Continues from `params` (trained on `trained`), adding fresh heads for
/// `new_tasks`. `new_tasks` may be empty in all-parameter mode.
pub fn finetune(
    params: &ParamSet,
    trained: &BTreeSet<TaskId>,
    new_tasks: &BTreeSet<TaskId>,
    mode: FinetuneMode,
    data: &TaskData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Outcome> {
    cfg.validate()?;
    let mut params = params.clone();
    let paradigm = Paradigm::MtmlFinetune;
    let mut report = RunReport::new(paradigm, trained, data, seed);
    report.finetuned_tasks = new_tasks.clone();
    report.finetune_mode = Some(mode);
    let mut history = Vec::new();
    let result = finetune_fit(
        &mut params,
        trained,
        new_tasks,
        mode,
        data,
        cfg,
        cfg.max_finetune_epochs,
        derive_seed(seed, STREAM_FINETUNE),
        &mut history,
    );
    report.history = history;
    match result {
        Ok(epochs) => {
            report.epochs_finetune = epochs;
            report.test = Some(report.evaluate_test(&params, data)?);
        }
        Err(e @ Error::NonFinite { .. }) => {
            report.status = RunStatus::Failed {
                reason: e.to_string(),
            };
        }
        Err(e) => return Err(e),
    }
    Ok(Outcome { params, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> TaskData {
        TaskData::generate(0, WorldConfig::default(), SplitSizes::default()).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            max_epochs: 4,
            max_meta_epochs: 3,
            max_finetune_epochs: 3,
            short_finetune_epochs: 2,
            meta_steps_per_epoch: 1,
            ..TrainConfig::default()
        }
    }

    fn set(ids: &[TaskId]) -> BTreeSet<TaskId> {
        ids.iter().copied().collect()
    }

    #[test]
    fn single_task_report_contract() {
        let d = data();
        let a = train_single(TaskId::T2, &d, &quick(), 7).unwrap();
        let b = train_single(TaskId::T2, &d, &quick(), 7).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.test_evaluations, 1);
        assert_eq!(a.report.epochs_total, 4);
        assert_eq!(a.report.epochs_finetune, 0);
        assert_eq!(a.report.split_fingerprint, d.fingerprint);
        let test = a.report.test.unwrap();
        assert_eq!(test.tasks.keys().copied().collect::<Vec<_>>(), vec![TaskId::T2]);
    }

    #[test]
    fn paradigm_task_checks() {
        let d = data();
        let c = quick();
        use TaskId::*;
        assert!(run_experiment(Paradigm::Single, &set(&[T1, T2]), &set(&[]), &d, &c, 0).is_err());
        assert!(run_experiment(Paradigm::Mtl, &set(&[T1]), &set(&[]), &d, &c, 0).is_err());
        assert!(run_experiment(Paradigm::MtlFinetune, &set(&[T1, T2]), &set(&[]), &d, &c, 0).is_err());
        assert!(run_experiment(Paradigm::Mtl, &set(&[T1, T2]), &set(&[T3]), &d, &c, 0).is_err());
        // Two source tasks need the explicit override.
        assert!(run_experiment(Paradigm::MtmlFinetune, &set(&[T1, T2]), &set(&[T3]), &d, &c, 0).is_err());
        let two = TrainConfig {
            allow_two_source: true,
            ..c
        };
        let out = run_experiment(Paradigm::MtmlFinetune, &set(&[T1, T2]), &set(&[T3]), &d, &two, 0).unwrap();
        assert!(out.report.is_completed());
    }

    #[test]
    fn finetune_rejects_overlap() {
        let d = data();
        let c = quick();
        let src = set(&[TaskId::T1, TaskId::T2, TaskId::T3]);
        let base = meta_train(&src, &d, &c, 1).unwrap();
        assert!(finetune(&base.params, &src, &set(&[TaskId::T3]), FinetuneMode::AllParams, &d, &c, 1).is_err());
    }

    #[test]
    fn mtml_records_pre_and_post_finetune_tests() {
        let d = data();
        let out = run_experiment(
            Paradigm::Mtml,
            &TaskId::ALL.into_iter().collect(),
            &set(&[]),
            &d,
            &quick(),
            3,
        )
        .unwrap();
        let r = out.report;
        assert!(r.pre_finetune_test.is_some());
        assert_eq!(r.test_evaluations, 2);
        assert_eq!(r.epochs_total, 3);
        assert_eq!(r.epochs_finetune, 2);
        assert_eq!(r.phase(Phase::Meta).count(), 3);
    }

    #[test]
    fn paradigm_names_round_trip() {
        for p in [
            Paradigm::Single,
            Paradigm::Mtl,
            Paradigm::MtlFinetune,
            Paradigm::Mtml,
            Paradigm::MtmlFinetune,
        ] {
            assert_eq!(p.name().parse::<Paradigm>().unwrap(), p);
        }
    }
}
