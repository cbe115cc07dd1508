//! Plain SGD and AdamW over a [`ParamSet`].
//!
//! A parameter is updated only when its group is inside the step's
//! [`UpdateScope`] and not frozen on the parameter set. Frozen parameters are
//! skipped entirely, including their moment buffers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, ParamGroup, ParamKey, ParamKind, ParamSet};
use crate::tasks::TaskId;

/// Parameter groups a step may write.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateScope {
    pub trunk: bool,
    pub heads: BTreeSet<TaskId>,
    pub logvars: BTreeSet<TaskId>,
}

impl UpdateScope {
    pub fn everything(tasks: &BTreeSet<TaskId>) -> Self {
        Self {
            trunk: true,
            heads: tasks.clone(),
            logvars: tasks.clone(),
        }
    }

    pub fn without_logvars(tasks: &BTreeSet<TaskId>) -> Self {
        Self {
            trunk: true,
            heads: tasks.clone(),
            logvars: BTreeSet::new(),
        }
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Trunk => self.trunk,
            ParamGroup::Head(t) => self.heads.contains(&t),
            ParamGroup::LogVar(t) => self.logvars.contains(&t),
        }
    }
}

fn updatable(params: &ParamSet, scope: &UpdateScope) -> Vec<ParamKey> {
    params
        .keys()
        .into_iter()
        .filter(|k| scope.contains(k.group) && !params.is_frozen(k.group))
        .collect()
}

fn grad_for<'g>(grads: &'g Gradients, key: &ParamKey, len: usize) -> Result<&'g [f64]> {
    match grads.get(key) {
        Some(g) if g.len() == len => Ok(g),
        Some(g) => Err(Error::Length {
            expected: len,
            got: g.len(),
        }),
        None => Err(Error::MissingGrad(key.to_string())),
    }
}

/// `p ← p − lr·g` on every updatable parameter.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lr: f64, scope: &UpdateScope) -> Result<()> {
    for key in updatable(params, scope) {
        let t = params.get_mut(key).expect("key from params");
        let g = grad_for(grads, &key, t.numel())?;
        t.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(p, gv)| *p -= lr * gv);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// AdamW with per-parameter step counts for bias correction. Weight decay
/// applies to weight matrices only, never to biases or log-variances.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: BTreeMap<ParamKey, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, scope: &UpdateScope) -> Result<()> {
        let keys = updatable(params, scope);
        // Validate before touching anything so a failed step leaves no trace.
        for &key in &keys {
            let n = params.get(key).expect("key from params").numel();
            grad_for(grads, &key, n)?;
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for key in keys {
            let t = params.get_mut(key).expect("key from params");
            let g = grads.get(&key).expect("validated");
            let st = self.moments.entry(key).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let decay = if key.kind == ParamKind::Weight {
                lr * weight_decay
            } else {
                0.0
            };
            for (((p, &gv), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *p -= decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
