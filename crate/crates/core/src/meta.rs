//! Bi-level optimization over multi-task episodes.
//!
//! The inner step adapts a copy of the parameters with one SGD step on the
//! episode's support loss. The outer step sums the query losses of the adapted
//! copies over a meta-batch and applies one AdamW step to the original
//! parameters. By default the outer gradient is first-order: it is taken at
//! the adapted parameters and the inner step is treated as a constant.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::network::{Gradients, ParamSet};
use crate::objectives::{combined_loss_value, loss_and_grads, TaskMask, Weighting};
use crate::optim::{sgd_step, AdamW, UpdateScope};
use crate::tasks::TaskId;

/// Which parameters the inner step adapts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerScope {
    #[default]
    TrunkAndHeads,
    HeadsOnly,
}

impl std::str::FromStr for InnerScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trunk_and_heads" | "all" => Ok(InnerScope::TrunkAndHeads),
            "heads_only" => Ok(InnerScope::HeadsOnly),
            other => Err(Error::Argument(format!("unknown inner scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub inner_scope: InnerScope,
    pub weighting: Weighting,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            inner_scope: InnerScope::TrunkAndHeads,
            weighting: Weighting::Uncertainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMode {
    FirstOrder,
    /// Finite-difference meta-gradient through the inner step. Test use only.
    ExactCheck { h: f64 },
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub params: ParamSet,
    pub support_loss_before: f64,
}

fn episode_mask(ep: &Episode) -> TaskMask {
    TaskMask::new(ep.combo.tasks().clone())
}

fn inner_update_scope(tasks: &BTreeSet<TaskId>, scope: InnerScope) -> UpdateScope {
    UpdateScope {
        trunk: scope == InnerScope::TrunkAndHeads,
        heads: tasks.clone(),
        logvars: BTreeSet::new(),
    }
}

/// One SGD step on the episode's support loss, applied to a deep copy.
/// Log-variances and heads of tasks outside the episode are left alone.
pub fn inner_adapt(params: &ParamSet, ep: &Episode, cfg: &MetaConfig) -> Result<Adapted> {
    let mask = episode_mask(ep);
    let eval = loss_and_grads(params, &ep.support, &mask, cfg.weighting)?;
    let mut adapted = params.clone();
    sgd_step(
        &mut adapted,
        &eval.grads,
        cfg.inner_lr,
        &inner_update_scope(mask.tasks(), cfg.inner_scope),
    )?;
    Ok(Adapted {
        params: adapted,
        support_loss_before: eval.total,
    })
}

/// Query loss after adaptation, as a function of the original parameters.
pub fn adapted_query_loss(params: &ParamSet, ep: &Episode, cfg: &MetaConfig) -> Result<f64> {
    let adapted = inner_adapt(params, ep, cfg)?;
    combined_loss_value(&adapted.params, &ep.query, &episode_mask(ep), cfg.weighting)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub combo: String,
    pub support_before: f64,
    pub support_after: f64,
    pub query: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub episodes: Vec<EpisodeStat>,
    /// Sum of query losses over the meta-batch.
    pub query_total: f64,
    pub grad_norm: f64,
}

impl MetaStepReport {
    /// Share of episodes whose support loss went down after the inner step.
    pub fn descent_fraction(&self) -> f64 {
        let n = self.episodes.len().max(1);
        self.episodes
            .iter()
            .filter(|e| e.support_after < e.support_before)
            .count() as f64
            / n as f64
    }
}

/// First-order meta-gradient of one episode: gradient of the query loss at
/// the adapted parameters.
pub fn first_order_meta_gradient(
    params: &ParamSet,
    ep: &Episode,
    cfg: &MetaConfig,
) -> Result<Gradients> {
    let adapted = inner_adapt(params, ep, cfg)?;
    Ok(loss_and_grads(&adapted.params, &ep.query, &episode_mask(ep), cfg.weighting)?.grads)
}

/// Largest parameter count the finite-difference oracle accepts.
pub const MAX_ORACLE_PARAMS: usize = 4096;

/// Central finite differences of `v ↦ query_loss(inner_adapt(v))` over every
/// flat coordinate, including the second-order effect of the inner step.
pub fn exact_meta_gradient(params: &ParamSet, ep: &Episode, cfg: &MetaConfig, h: f64) -> Result<Vec<f64>> {
    let base = params.flatten();
    if base.len() > MAX_ORACLE_PARAMS {
        return Err(Error::Argument(format!(
            "{} parameters exceed the oracle limit of {MAX_ORACLE_PARAMS}",
            base.len()
        )));
    }
    central_difference(&base, h, |v| adapted_query_loss(&params.unflatten(v)?, ep, cfg))
}

/// Central-difference gradient of `f` at `x` with step `h ∈ [1e-5, 1e-3]`.
pub fn central_difference(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::Argument(format!("step {h} outside [1e-5, 1e-3]")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe)?;
        probe[k] = x[k] - h;
        let down = f(&probe)?;
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::non_finite(format!("objective near coordinate {k}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn gradients_from_flat(params: &ParamSet, flat: &[f64]) -> Gradients {
    let mut out = Gradients::default();
    let mut offset = 0;
    for (key, t) in params.entries() {
        out.insert(key, flat[offset..offset + t.numel()].to_vec());
        offset += t.numel();
    }
    out
}

/// Parameters an outer step writes: the trunk plus the heads (and, under
/// uncertainty weighting, log-variances) of every task seen in the meta-batch.
pub fn outer_update_scope(meta_batch: &[Episode], weighting: Weighting) -> UpdateScope {
    let tasks: BTreeSet<TaskId> = meta_batch
        .iter()
        .flat_map(|e| e.combo.tasks().iter().copied())
        .collect();
    match weighting {
        Weighting::Uncertainty => UpdateScope::everything(&tasks),
        Weighting::Equal => UpdateScope::without_logvars(&tasks),
    }
}

/// Adapts to every episode, sums query losses in episode order, and applies
/// one AdamW step to `params`.
pub fn outer_step(
    params: &mut ParamSet,
    meta_batch: &[Episode],
    opt: &mut AdamW,
    cfg: &MetaConfig,
    mode: OuterMode,
) -> Result<MetaStepReport> {
    if meta_batch.is_empty() {
        return Err(Error::Argument("meta-batch is empty".into()));
    }
    let mut total = Gradients::default();
    let mut stats = Vec::with_capacity(meta_batch.len());
    let mut query_total = 0.0;
    for (i, ep) in meta_batch.iter().enumerate() {
        let mask = episode_mask(ep);
        let adapted = inner_adapt(params, ep, cfg)?;
        let support_after =
            combined_loss_value(&adapted.params, &ep.support, &mask, cfg.weighting)?;
        let query = match mode {
            OuterMode::FirstOrder => {
                let eval = loss_and_grads(&adapted.params, &ep.query, &mask, cfg.weighting)?;
                total.accumulate(&eval.grads);
                eval.total
            }
            OuterMode::ExactCheck { h } => {
                let flat = exact_meta_gradient(params, ep, cfg, h)?;
                total.accumulate(&gradients_from_flat(params, &flat));
                combined_loss_value(&adapted.params, &ep.query, &mask, cfg.weighting)?
            }
        };
        if !query.is_finite() {
            return Err(Error::non_finite(format!(
                "query loss of episode {i} ({})",
                ep.combo
            )));
        }
        query_total += query;
        stats.push(EpisodeStat {
            combo: ep.combo.to_string(),
            support_before: adapted.support_loss_before,
            support_after,
            query,
        });
    }
    if !total.all_finite() {
        return Err(Error::non_finite("outer gradient"));
    }
    let grad_norm = total.norm();
    opt.step(params, &total, &outer_update_scope(meta_batch, cfg.weighting))?;
    Ok(MetaStepReport {
        episodes: stats,
        query_total,
        grad_norm,
    })
}
