//! Experiment specifications and the built-in grids.

use std::collections::BTreeSet;

use mtml_core::tasks::{format_task_list, TaskId};
use mtml_core::train::{FinetuneMode, Paradigm, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::HarnessConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: String,
    pub paradigm: Paradigm,
    pub trained_tasks: BTreeSet<TaskId>,
    pub added_tasks: BTreeSet<TaskId>,
    pub finetune_mode: Option<FinetuneMode>,
    pub seeds: Vec<u64>,
    pub world_seed: u64,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    /// Family number: "4" for "4.3".
    pub fn family(&self) -> &str {
        self.id.split('.').next().unwrap_or(&self.id)
    }

    /// Trained tasks followed by added ones in parentheses, e.g. `T1,T2 (+T3)`.
    pub fn label(&self) -> String {
        let trained = format_task_list(&self.trained_tasks);
        if self.added_tasks.is_empty() {
            trained
        } else {
            format!("{trained} (+{})", format_task_list(&self.added_tasks))
        }
    }

    pub fn all_tasks(&self) -> BTreeSet<TaskId> {
        self.trained_tasks.union(&self.added_tasks).copied().collect()
    }

    fn validate(&self) -> Result<()> {
        if !self.added_tasks.is_empty() && !self.paradigm.is_finetune() {
            return Err(Error::Grid(format!(
                "{}: added tasks need a fine-tune paradigm",
                self.id
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Grid(format!("{}: no seeds", self.id)));
        }
        self.train.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub name: String,
    pub specs: Vec<ExperimentSpec>,
    pub out_dir: String,
    pub created_at: String,
    pub config_hash: String,
}

impl GridManifest {
    pub fn new(name: &str, specs: Vec<ExperimentSpec>, cfg: &HarnessConfig, out_dir: &str) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &specs {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Grid(format!("duplicate id {}", s.id)));
            }
        }
        let config_hash = config_hash(&specs, cfg);
        Ok(Self {
            name: name.to_string(),
            specs,
            out_dir: out_dir.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
            config_hash,
        })
    }

    pub fn get(&self, id: &str) -> Option<&ExperimentSpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    /// Specs matching a comma-separated filter of ids or family numbers.
    pub fn filtered(&self, filter: Option<&str>) -> Vec<&ExperimentSpec> {
        self.specs.iter().filter(|s| matches_filter(&s.id, filter)).collect()
    }
}

/// `"1"` and `"1.*"` match a whole family, `"4.3"` a single id.
pub fn matches_filter(id: &str, filter: Option<&str>) -> bool {
    let Some(filter) = filter else { return true };
    filter.split(',').map(str::trim).filter(|p| !p.is_empty()).any(|p| {
        let p = p.strip_suffix(".*").unwrap_or(p);
        p == "*" || id == p || id.strip_prefix(p).is_some_and(|rest| rest.starts_with('.'))
    })
}

/// SHA-256 over everything that can change a number in the results.
pub fn config_hash(specs: &[ExperimentSpec], cfg: &HarnessConfig) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION"));
    h.update(serde_json::to_vec(&cfg.world).expect("serialisable"));
    h.update(serde_json::to_vec(&cfg.splits).expect("serialisable"));
    h.update(serde_json::to_vec(specs).expect("serialisable"));
    hex::encode(h.finalize())
}

/// Hash identifying one (spec, seed) run, used to skip finished work.
pub fn run_hash(spec: &ExperimentSpec, seed: u64, cfg: &HarnessConfig) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION"));
    h.update(serde_json::to_vec(&cfg.world).expect("serialisable"));
    h.update(serde_json::to_vec(&cfg.splits).expect("serialisable"));
    let mut one = spec.clone();
    one.seeds = vec![seed];
    h.update(serde_json::to_vec(&one).expect("serialisable"));
    hex::encode(h.finalize())
}

pub const GRID_NAMES: [&str; 2] = ["default", "transfer"];

pub fn build_grid(name: &str, cfg: &HarnessConfig) -> Result<Vec<ExperimentSpec>> {
    match name {
        "default" => Ok(default_grid(cfg)),
        "transfer" => Ok(transfer_grid(cfg)),
        other => Err(Error::UnknownGrid(other.to_string())),
    }
}

fn set(ids: &[TaskId]) -> BTreeSet<TaskId> {
    ids.iter().copied().collect()
}

struct Builder<'a> {
    cfg: &'a HarnessConfig,
    specs: Vec<ExperimentSpec>,
}

impl Builder<'_> {
    fn push(&mut self, id: String, paradigm: Paradigm, trained: BTreeSet<TaskId>, added: BTreeSet<TaskId>) {
        let mut train = self.cfg.train.clone();
        if matches!(paradigm, Paradigm::Mtml | Paradigm::MtmlFinetune) && trained.len() == 2 {
            train.allow_two_source = true;
        }
        let finetune_mode = (paradigm.is_finetune() || paradigm == Paradigm::Mtml).then(|| {
            if paradigm == Paradigm::Mtml {
                FinetuneMode::AllParams
            } else {
                train.finetune_mode
            }
        });
        self.specs.push(ExperimentSpec {
            id,
            paradigm,
            trained_tasks: trained,
            added_tasks: added,
            finetune_mode,
            seeds: self.cfg.seeds.clone(),
            world_seed: self.cfg.world_seed,
            train: normalised(train, paradigm),
        });
    }
}

/// Clears settings the paradigm never reads, so they do not change its hash.
fn normalised(mut t: TrainConfig, paradigm: Paradigm) -> TrainConfig {
    let base = TrainConfig::default();
    if !matches!(paradigm, Paradigm::Mtml | Paradigm::MtmlFinetune) {
        t.inner_lr = base.inner_lr;
        t.inner_scope = base.inner_scope;
        t.support_size = base.support_size;
        t.query_size = base.query_size;
        t.k_per_combo = base.k_per_combo;
        t.meta_steps_per_epoch = base.meta_steps_per_epoch;
        t.meta_val_rounds = base.meta_val_rounds;
        t.max_meta_epochs = base.max_meta_epochs;
        t.allow_two_source = false;
    }
    if !paradigm.is_finetune() {
        t.finetune_mode = base.finetune_mode;
        t.max_finetune_epochs = base.max_finetune_epochs;
    }
    if paradigm != Paradigm::Mtml {
        t.short_finetune_epochs = base.short_finetune_epochs;
    }
    if matches!(paradigm, Paradigm::Mtml | Paradigm::MtmlFinetune) {
        t.max_epochs = base.max_epochs;
    }
    t
}

fn leave_one_out() -> impl Iterator<Item = (usize, BTreeSet<TaskId>, BTreeSet<TaskId>)> {
    TaskId::ALL.into_iter().enumerate().map(|(i, out)| {
        let rest = TaskId::ALL.into_iter().filter(|&t| t != out).collect();
        (i + 1, rest, set(&[out]))
    })
}

/// Families 1 to 7: single tasks, joint training, augmentation by new tasks
/// after joint or meta training, and the three leave-one-out families.
pub fn default_grid(cfg: &HarnessConfig) -> Vec<ExperimentSpec> {
    use Paradigm::*;
    use TaskId::*;
    let mut b = Builder { cfg, specs: Vec::new() };
    for (i, t) in TaskId::ALL.into_iter().enumerate() {
        b.push(format!("1.{}", i + 1), Single, set(&[t]), set(&[]));
    }
    let growing = [set(&[T1, T2]), set(&[T1, T2, T3]), set(&[T1, T2, T3, T4])];
    for (i, tasks) in growing.iter().enumerate() {
        b.push(format!("2.{}", i + 1), Mtl, tasks.clone(), set(&[]));
    }
    let augment = [
        (set(&[T1, T2]), set(&[T3])),
        (set(&[T1, T2]), set(&[T3, T4])),
        (set(&[T1, T2, T3]), set(&[T4])),
    ];
    for (i, (trained, added)) in augment.iter().enumerate() {
        b.push(format!("3.{}", i + 1), MtlFinetune, trained.clone(), added.clone());
    }
    for (i, (trained, added)) in augment.iter().enumerate() {
        b.push(format!("4.{}", i + 1), MtmlFinetune, trained.clone(), added.clone());
    }
    b.push("4.4".into(), Mtml, set(&[T1, T2, T3, T4]), set(&[]));
    for (i, rest, _) in leave_one_out() {
        b.push(format!("5.{i}"), Mtl, rest, set(&[]));
    }
    for (i, rest, out) in leave_one_out() {
        b.push(format!("6.{i}"), MtlFinetune, rest, out);
    }
    for (i, rest, out) in leave_one_out() {
        b.push(format!("7.{i}"), MtmlFinetune, rest, out);
    }
    b.specs
}

/// The single-task baselines and the meta-trained leave-one-out family only.
pub fn transfer_grid(cfg: &HarnessConfig) -> Vec<ExperimentSpec> {
    default_grid(cfg)
        .into_iter()
        .filter(|s| matches!(s.family(), "1" | "7"))
        .collect()
}
