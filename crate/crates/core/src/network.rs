//! Shared-trunk, multi-head MLP.
//!
//! Parameters are partitioned into the trunk (shared by every task), one head
//! per task, and one uncertainty log-variance per task. The canonical order of
//! parameters (trunk layers, then heads by task id, then log-variances) is the
//! derived `Ord` of [`ParamKey`], so every `BTreeMap<ParamKey, _>` iterates in
//! that order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed2, rng};
use crate::tasks::{TaskId, WorldConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_in: usize,
    /// Hidden trunk widths; the trunk ends with a `d_repr`-wide representation layer.
    pub trunk_widths: Vec<usize>,
    pub d_repr: usize,
    /// Hidden head widths per task; each head ends with a linear `out_dims[task]` layer.
    pub head_widths: BTreeMap<TaskId, Vec<usize>>,
    pub out_dims: BTreeMap<TaskId, usize>,
}

impl NetConfig {
    /// Trunk 32-32-16, one hidden head layer of 16 units.
    pub fn standard(world: &WorldConfig, tasks: &BTreeSet<TaskId>) -> Self {
        Self::with_widths(world, tasks, vec![32, 32], 16, vec![16])
    }

    /// Below 300 parameters for four tasks; sized for finite-difference oracles.
    pub fn tiny(world: &WorldConfig, tasks: &BTreeSet<TaskId>) -> Self {
        Self::with_widths(world, tasks, vec![8], 6, vec![4])
    }

    pub fn with_widths(
        world: &WorldConfig,
        tasks: &BTreeSet<TaskId>,
        trunk_widths: Vec<usize>,
        d_repr: usize,
        head_widths: Vec<usize>,
    ) -> Self {
        Self {
            d_in: world.d_in,
            trunk_widths,
            d_repr,
            head_widths: tasks.iter().map(|&t| (t, head_widths.clone())).collect(),
            out_dims: tasks.iter().map(|&t| (t, world.task_spec(t).out_dim)).collect(),
        }
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.out_dims.keys().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let widths_ok = self.d_in >= 1
            && self.d_repr >= 1
            && self.trunk_widths.iter().all(|&w| w >= 1)
            && self.head_widths.values().flatten().all(|&w| w >= 1)
            && self.out_dims.values().all(|&w| w >= 1);
        if !widths_ok {
            return Err(Error::Argument("all layer widths must be at least 1".into()));
        }
        if !self.head_widths.keys().eq(self.out_dims.keys()) {
            return Err(Error::Argument(
                "head widths and output dimensions cover different tasks".into(),
            ));
        }
        Ok(())
    }

    fn trunk_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.d_in;
        for &w in self.trunk_widths.iter().chain(std::iter::once(&self.d_repr)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    fn head_dims(&self, task: TaskId) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.d_repr;
        for &w in &self.head_widths[&task] {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.out_dims[&task]));
        dims
    }

    /// Total number of scalars: Σ (fan_in + 1)·fan_out over all layers, plus one log-variance per task.
    pub fn param_count(&self) -> usize {
        let layers = self
            .trunk_dims()
            .into_iter()
            .chain(self.tasks().into_iter().flat_map(|t| self.head_dims(t)));
        layers.map(|(i, o)| (i + 1) * o).sum::<usize>() + self.out_dims.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Trunk,
    Head(TaskId),
    LogVar(TaskId),
}

impl ParamGroup {
    pub fn task(self) -> Option<TaskId> {
        match self {
            ParamGroup::Trunk => None,
            ParamGroup::Head(t) | ParamGroup::LogVar(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    LogVar,
}

/// Name of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::LogVar => return write!(f, "logvar.{}", self.group.task().unwrap()),
        };
        match self.group {
            ParamGroup::Trunk => write!(f, "trunk.{}.{kind}", self.layer),
            ParamGroup::Head(t) | ParamGroup::LogVar(t) => {
                write!(f, "head.{t}.{}.{kind}", self.layer)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, seed: u64) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut r = rng(seed);
        let w = (0..fan_in * fan_out)
            .map(|_| r.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("layer shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

const TRUNK_STREAM: u64 = 0;

fn head_stream(task: TaskId) -> u64 {
    1 + task.index() as u64
}

/// All trainable state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    config: NetConfig,
    seed: u64,
    trunk: Vec<Linear>,
    heads: BTreeMap<TaskId, Vec<Linear>>,
    logvars: BTreeMap<TaskId, Tensor>,
    frozen: BTreeSet<TaskId>,
    trunk_frozen: bool,
}

/// Graph handles for the parameters bound into one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    trunk: Vec<(Var, Var)>,
    heads: BTreeMap<TaskId, Vec<(Var, Var)>>,
    logvars: BTreeMap<TaskId, Var>,
}

impl BoundParams {
    pub fn logvar(&self, task: TaskId) -> Option<Var> {
        self.logvars.get(&task).copied()
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.heads.keys().copied().collect()
    }

    fn vars(&self) -> impl Iterator<Item = (ParamKey, Var)> + '_ {
        let layered = |group: ParamGroup, layers: &[(Var, Var)]| {
            layers
                .iter()
                .enumerate()
                .flat_map(move |(layer, &(w, b))| {
                    [
                        (
                            ParamKey {
                                group,
                                layer,
                                kind: ParamKind::Weight,
                            },
                            w,
                        ),
                        (
                            ParamKey {
                                group,
                                layer,
                                kind: ParamKind::Bias,
                            },
                            b,
                        ),
                    ]
                })
                .collect::<Vec<_>>()
        };
        let mut out = layered(ParamGroup::Trunk, &self.trunk);
        for (&t, layers) in &self.heads {
            out.extend(layered(ParamGroup::Head(t), layers));
        }
        for (&t, &v) in &self.logvars {
            out.push((logvar_key(t), v));
        }
        out.into_iter()
    }
}

fn push_layers<'a>(group: ParamGroup, layers: &'a [Linear], out: &mut Vec<(ParamKey, &'a Tensor)>) {
    for (layer, l) in layers.iter().enumerate() {
        let key = |kind| ParamKey { group, layer, kind };
        out.push((key(ParamKind::Weight), &l.weight));
        out.push((key(ParamKind::Bias), &l.bias));
    }
}

pub fn logvar_key(task: TaskId) -> ParamKey {
    ParamKey {
        group: ParamGroup::LogVar(task),
        layer: 0,
        kind: ParamKind::LogVar,
    }
}

impl ParamSet {
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let trunk = config
            .trunk_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| Linear::init(i, o, derive_seed2(seed, TRUNK_STREAM, l as u64)))
            .collect();
        let heads = config
            .tasks()
            .into_iter()
            .map(|t| (t, Self::init_head(&config, t, seed)))
            .collect();
        let logvars = config
            .tasks()
            .into_iter()
            .map(|t| (t, Tensor::scalar(0.0)))
            .collect();
        Ok(Self {
            config,
            seed,
            trunk,
            heads,
            logvars,
            frozen: BTreeSet::new(),
            trunk_frozen: false,
        })
    }

    fn init_head(config: &NetConfig, task: TaskId, seed: u64) -> Vec<Linear> {
        config
            .head_dims(task)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| Linear::init(i, o, derive_seed2(seed, head_stream(task), l as u64)))
            .collect()
    }

    /// Copy extended with fresh heads (and zero log-variances) for `new_tasks`.
    /// Each new head is seeded from `seed ^ task_index`.
    pub fn with_new_tasks(
        &self,
        new_tasks: &BTreeMap<TaskId, usize>,
        head_widths: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let mut out = self.clone();
        for (&task, &out_dim) in new_tasks {
            if self.heads.contains_key(&task) {
                return Err(Error::Argument(format!("task {task} already has a head")));
            }
            out.config.head_widths.insert(task, head_widths.to_vec());
            out.config.out_dims.insert(task, out_dim);
            out.config.validate()?;
            let head = Self::init_head(&out.config, task, seed ^ task.index() as u64);
            out.heads.insert(task, head);
            out.logvars.insert(task, Tensor::scalar(0.0));
        }
        Ok(out)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.heads.keys().copied().collect()
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn head(&self, task: TaskId) -> Result<&[Linear]> {
        self.heads
            .get(&task)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn logvar(&self, task: TaskId) -> Result<f64> {
        self.logvars
            .get(&task)
            .ok_or(Error::UnknownTask(task))?
            .item()
    }

    pub fn set_logvar(&mut self, task: TaskId, value: f64) -> Result<()> {
        let t = self.logvars.get_mut(&task).ok_or(Error::UnknownTask(task))?;
        t.data_mut()[0] = value;
        Ok(())
    }

    pub fn frozen(&self) -> &BTreeSet<TaskId> {
        &self.frozen
    }

    pub fn freeze(&mut self, task: TaskId) -> Result<()> {
        if !self.heads.contains_key(&task) {
            return Err(Error::UnknownTask(task));
        }
        self.frozen.insert(task);
        Ok(())
    }

    pub fn unfreeze(&mut self, task: TaskId) {
        self.frozen.remove(&task);
    }

    pub fn set_trunk_frozen(&mut self, frozen: bool) {
        self.trunk_frozen = frozen;
    }

    pub fn trunk_frozen(&self) -> bool {
        self.trunk_frozen
    }

    /// A frozen task freezes both its head and its log-variance.
    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Trunk => self.trunk_frozen,
            ParamGroup::Head(t) | ParamGroup::LogVar(t) => self.frozen.contains(&t),
        }
    }

    fn check_tasks(&self, tasks: &BTreeSet<TaskId>) -> Result<()> {
        match tasks.iter().find(|t| !self.heads.contains_key(t)) {
            Some(&t) => Err(Error::UnknownTask(t)),
            None => Ok(()),
        }
    }

    /// Every parameter tensor in canonical order.
    pub fn entries(&self) -> Vec<(ParamKey, &Tensor)> {
        let mut out = Vec::new();
        push_layers(ParamGroup::Trunk, &self.trunk, &mut out);
        for (&t, layers) in &self.heads {
            push_layers(ParamGroup::Head(t), layers, &mut out);
        }
        out.extend(self.logvars.iter().map(|(&t, v)| (logvar_key(t), v)));
        out
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        match key.group {
            ParamGroup::Trunk => self.trunk.get(key.layer).map(|l| l.pick(key.kind)),
            ParamGroup::Head(t) => self
                .heads
                .get(&t)
                .and_then(|h| h.get(key.layer))
                .map(|l| l.pick(key.kind)),
            ParamGroup::LogVar(t) => self.logvars.get(&t),
        }
    }

    pub fn get_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key.group {
            ParamGroup::Trunk => self.trunk.get_mut(key.layer).map(|l| l.pick_mut(key.kind)),
            ParamGroup::Head(t) => self
                .heads
                .get_mut(&t)
                .and_then(|h| h.get_mut(key.layer))
                .map(|l| l.pick_mut(key.kind)),
            ParamGroup::LogVar(t) => self.logvars.get_mut(&t),
        }
    }

    pub fn keys(&self) -> Vec<ParamKey> {
        self.entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t) in self.entries() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Copy of `self` with every value taken from `flat` in canonical order.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::Length {
                expected,
                got: flat.len(),
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        for key in self.keys() {
            let t = out.get_mut(key).expect("key from entries");
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Puts the trunk, the heads of `tasks` and (optionally) their
    /// log-variances into `g` as gradient-tracking leaves.
    pub fn bind(
        &self,
        g: &mut Graph,
        tasks: &BTreeSet<TaskId>,
        with_logvars: bool,
    ) -> Result<BoundParams> {
        self.check_tasks(tasks)?;
        let bind_layers = |g: &mut Graph, layers: &[Linear]| -> Vec<(Var, Var)> {
            layers
                .iter()
                .map(|l| (g.param(l.weight.clone()), g.param(l.bias.clone())))
                .collect()
        };
        let trunk = bind_layers(g, &self.trunk);
        let heads = tasks
            .iter()
            .map(|&t| (t, bind_layers(g, &self.heads[&t])))
            .collect();
        let logvars = if with_logvars {
            tasks
                .iter()
                .map(|&t| (t, g.param(self.logvars[&t].clone())))
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(BoundParams {
            trunk,
            heads,
            logvars,
        })
    }

    /// Gradients of the bound leaves, with frozen groups zeroed.
    pub fn collect_grads(&self, g: &Graph, bound: &BoundParams) -> Gradients {
        let mut out = BTreeMap::new();
        for (key, var) in bound.vars() {
            if let Some(grad) = g.grad(var) {
                let grad = if self.is_frozen(key.group) {
                    vec![0.0; grad.len()]
                } else {
                    grad.to_vec()
                };
                out.insert(key, grad);
            }
        }
        Gradients(out)
    }

    /// Gradient-free predictions for `tasks`.
    pub fn predict(&self, x: &Tensor, tasks: &BTreeSet<TaskId>) -> Result<BTreeMap<TaskId, Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, tasks, false)?;
        let xv = g.constant(x.clone());
        let outs = forward(&mut g, &bound, xv)?;
        Ok(outs.into_iter().map(|(t, v)| (t, g.value(v).clone())).collect())
    }

    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            seed: self.seed,
            tasks: self.tasks().into_iter().collect(),
            frozen: self.frozen.iter().copied().collect(),
            trunk_frozen: self.trunk_frozen,
            ordering: self
                .entries()
                .into_iter()
                .map(|(k, t)| format!("{k} {:?}", t.shape()))
                .collect(),
            count: self.num_params(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(stem.with_extension("manifest.toml"), text)?;
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(stem.with_extension("params.bin"), bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(stem: &Path) -> Result<Self> {
        let text = fs::read_to_string(stem.with_extension("manifest.toml"))?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
        }
        let bytes = fs::read(stem.with_extension("params.bin"))?;
        if bytes.len() != manifest.count * 8 {
            return Err(Error::Length {
                expected: manifest.count * 8,
                got: bytes.len(),
            });
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut p = Self::init(manifest.config, manifest.seed)?.unflatten(&flat)?;
        p.trunk_frozen = manifest.trunk_frozen;
        p.frozen = manifest.frozen.into_iter().collect();
        Ok(p)
    }
}

impl Linear {
    fn pick(&self, kind: ParamKind) -> &Tensor {
        match kind {
            ParamKind::Bias => &self.bias,
            _ => &self.weight,
        }
    }

    fn pick_mut(&mut self, kind: ParamKind) -> &mut Tensor {
        match kind {
            ParamKind::Bias => &mut self.bias,
            _ => &mut self.weight,
        }
    }
}

const CHECKPOINT_FORMAT: &str = "mtml-params-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    seed: u64,
    tasks: Vec<TaskId>,
    frozen: Vec<TaskId>,
    trunk_frozen: bool,
    count: usize,
    ordering: Vec<String>,
    config: NetConfig,
}

fn dense(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}

/// Shared representation of `x`.
pub fn trunk_forward(g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
    let mut h = x;
    for &layer in &bound.trunk {
        let a = dense(g, h, layer)?;
        h = g.tanh(a);
    }
    Ok(h)
}

/// One trunk pass, then one head pass per bound task.
pub fn forward(g: &mut Graph, bound: &BoundParams, x: Var) -> Result<BTreeMap<TaskId, Var>> {
    let repr = trunk_forward(g, bound, x)?;
    let mut out = BTreeMap::new();
    for (&task, layers) in &bound.heads {
        let mut h = repr;
        for (i, &layer) in layers.iter().enumerate() {
            h = dense(g, h, layer)?;
            if i + 1 < layers.len() {
                h = g.tanh(h);
            }
        }
        out.insert(task, h);
    }
    Ok(out)
}

/// Per-parameter gradients keyed (and therefore ordered) by [`ParamKey`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(pub BTreeMap<ParamKey, Vec<f64>>);

impl Gradients {
    pub fn get(&self, key: &ParamKey) -> Option<&[f64]> {
        self.0.get(key).map(Vec::as_slice)
    }

    pub fn insert(&mut self, key: ParamKey, grad: Vec<f64>) {
        self.0.insert(key, grad);
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.0.keys()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(*k, g.clone());
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.values().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Flat vector aligned with `params.flatten()`, zero where absent.
    pub fn flatten_like(&self, params: &ParamSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.num_params());
        for (k, t) in params.entries() {
            match self.0.get(&k) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().flatten().all(|v| v.is_finite())
    }
}
