//! Synthetic heterogeneous tasks.
//!
//! All four tasks read the same input `x` through a fixed random world map
//! `z = g(x)` and differ only in how the target is derived from `z`:
//!
//! | task | kind                | target                          | loss          |
//! |------|---------------------|---------------------------------|---------------|
//! | T1   | classification      | `argmax(A1ᵀz + c)`              | cross-entropy |
//! | T2   | scalar regression   | `a·z + b`                       | squared error |
//! | T3   | unit-vector         | `normalize(A3ᵀz + ε)`           | 1 − cosine    |
//! | T4   | robust regression   | `min(|a4·z|, q90)`              | Huber         |
//!
//! `c` balances the class frequencies and `q90` is the 90th percentile of
//! `|a4·z|`; both are calibrated once per world on a seeded sample.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, EngineRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    T1,
    T2,
    T3,
    T4,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::T1, TaskId::T2, TaskId::T3, TaskId::T4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kind(self) -> TaskKind {
        match self {
            TaskId::T1 => TaskKind::Classification,
            TaskId::T2 => TaskKind::ScalarRegression,
            TaskId::T3 => TaskKind::UnitVecRegression,
            TaskId::T4 => TaskKind::RobustRegression,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.index() + 1)
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "T1" | "t1" | "1" => Ok(TaskId::T1),
            "T2" | "t2" | "2" => Ok(TaskId::T2),
            "T3" | "t3" | "3" => Ok(TaskId::T3),
            "T4" | "t4" | "4" => Ok(TaskId::T4),
            other => Err(Error::Argument(format!("unknown task id {other:?}"))),
        }
    }
}

/// Parses "T1,T3" or "T1T3".
pub fn parse_task_list(s: &str) -> Result<BTreeSet<TaskId>> {
    let cleaned: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut out = BTreeSet::new();
    for part in cleaned.split([',', '+']).filter(|p| !p.is_empty()) {
        let mut rest = part;
        while !rest.is_empty() {
            let take = if rest.len() >= 2 && rest.as_bytes()[0].eq_ignore_ascii_case(&b't') {
                2
            } else {
                1
            };
            out.insert(rest[..take].parse()?);
            rest = &rest[take..];
        }
    }
    Ok(out)
}

pub fn format_task_list(tasks: &BTreeSet<TaskId>) -> String {
    tasks.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    ScalarRegression,
    UnitVecRegression,
    RobustRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
    InverseCosine,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    Accuracy,
    Mae,
    CosineSim,
    AngularMeanDeg,
    AngularMedianDeg,
    PctWithin11_25,
    PctWithin22_5,
    PctWithin30,
}

impl MetricId {
    pub fn name(self) -> &'static str {
        match self {
            MetricId::Accuracy => "accuracy",
            MetricId::Mae => "mae",
            MetricId::CosineSim => "cosine_sim",
            MetricId::AngularMeanDeg => "angular_mean_deg",
            MetricId::AngularMedianDeg => "angular_median_deg",
            MetricId::PctWithin11_25 => "pct_within_11_25",
            MetricId::PctWithin22_5 => "pct_within_22_5",
            MetricId::PctWithin30 => "pct_within_30",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(
            self,
            MetricId::Accuracy
                | MetricId::CosineSim
                | MetricId::PctWithin11_25
                | MetricId::PctWithin22_5
                | MetricId::PctWithin30
        )
    }
}

/// Declarative description of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    pub out_dim: usize,
    pub loss: LossKind,
    pub metrics: Vec<MetricId>,
}

impl TaskSpec {
    pub fn new(id: TaskId, classes: usize) -> Self {
        let kind = id.kind();
        let (out_dim, loss, metrics) = match kind {
            TaskKind::Classification => (classes, LossKind::CrossEntropy, vec![MetricId::Accuracy]),
            TaskKind::ScalarRegression => (1, LossKind::SquaredError, vec![MetricId::Mae]),
            TaskKind::UnitVecRegression => (
                3,
                LossKind::InverseCosine,
                vec![
                    MetricId::CosineSim,
                    MetricId::AngularMeanDeg,
                    MetricId::AngularMedianDeg,
                    MetricId::PctWithin11_25,
                    MetricId::PctWithin22_5,
                    MetricId::PctWithin30,
                ],
            ),
            TaskKind::RobustRegression => (1, LossKind::Huber, vec![MetricId::Mae]),
        };
        Self {
            id,
            kind,
            out_dim,
            loss,
            metrics,
        }
    }

    /// The metric used for headline comparisons between paradigms.
    pub fn primary_metric(&self) -> MetricId {
        match self.kind {
            TaskKind::Classification => MetricId::Accuracy,
            TaskKind::UnitVecRegression => MetricId::AngularMeanDeg,
            TaskKind::ScalarRegression | TaskKind::RobustRegression => MetricId::Mae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub d_in: usize,
    pub d_z: usize,
    pub classes: usize,
    /// Standard deviation of Gaussian target noise; 0 gives exact targets.
    pub noise: f64,
    /// Rank of the latent subspace every task projection reads from; 0 draws
    /// each projection independently over all of `z`.
    pub task_rank: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d_z: 16,
            classes: 4,
            noise: 0.0,
            task_rank: 4,
        }
    }
}

impl WorldConfig {
    pub fn task_spec(&self, id: TaskId) -> TaskSpec {
        TaskSpec::new(id, self.classes)
    }
}

const CALIBRATION_SAMPLES: usize = 4096;

/// Fixed random world shared by all tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldFn {
    pub seed: u64,
    pub config: WorldConfig,
    /// `d_in × d_z`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d_z × d_z`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// `d_z × classes`
    pub class_proj: Vec<f64>,
    pub class_offset: Vec<f64>,
    pub scalar_proj: Vec<f64>,
    pub scalar_bias: f64,
    /// `d_z × 3`
    pub normal_proj: Vec<f64>,
    pub edge_proj: Vec<f64>,
    pub edge_clip: f64,
}

fn uniform(rng: &mut EngineRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v (len n) · M (n × m)`
fn vec_mat(v: &[f64], m: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, vi) in v.iter().enumerate() {
        for (o, mij) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += vi * mij;
        }
    }
    out
}

/// Draws `d_z × k` task projections, either freely or as `P·R` for a basis
/// `P` (`d_z × rank`) shared by all tasks. Entries keep the variance of U(−1, 1).
struct Projector {
    d_z: usize,
    rank: usize,
    basis: Vec<f64>,
}

impl Projector {
    fn new(r: &mut EngineRng, d_z: usize, rank: usize) -> Self {
        let basis = if rank > 0 { uniform(r, d_z * rank) } else { Vec::new() };
        Self { d_z, rank, basis }
    }

    fn draw(&mut self, r: &mut EngineRng, k: usize) -> Vec<f64> {
        if self.rank == 0 {
            return uniform(r, self.d_z * k);
        }
        let mix = uniform(r, self.rank * k);
        let scale = (3.0 / self.rank as f64).sqrt();
        (0..self.d_z)
            .flat_map(|i| {
                let row = &self.basis[i * self.rank..(i + 1) * self.rank];
                (0..k)
                    .map(|j| scale * (0..self.rank).map(|l| row[l] * mix[l * k + j]).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect()
    }
}

pub fn make_world(seed: u64, config: WorldConfig) -> Result<WorldFn> {
    if config.d_in == 0 || config.d_z == 0 {
        return Err(Error::Argument("world dimensions must be at least 1".into()));
    }
    if config.classes < 2 {
        return Err(Error::Argument("classification needs at least 2 classes".into()));
    }
    let (d_in, d_z, c) = (config.d_in, config.d_z, config.classes);
    let mut r = rng(derive_seed(seed, 0x5743_4f52));
    let w1 = uniform(&mut r, d_in * d_z);
    let b1 = uniform(&mut r, d_z);
    let w2 = uniform(&mut r, d_z * d_z);
    let b2 = uniform(&mut r, d_z);
    let mut proj = Projector::new(&mut r, d_z, config.task_rank);
    let mut world = WorldFn {
        seed,
        w1,
        b1,
        w2,
        b2,
        class_proj: proj.draw(&mut r, c),
        class_offset: vec![0.0; c],
        scalar_proj: proj.draw(&mut r, 1),
        scalar_bias: r.random_range(-1.0..1.0),
        normal_proj: proj.draw(&mut r, 3),
        edge_proj: proj.draw(&mut r, 1),
        edge_clip: f64::INFINITY,
        config,
    };

    let mut cal_rng = rng(derive_seed(seed, 0x4341_4c49));
    let zs: Vec<Vec<f64>> = (0..CALIBRATION_SAMPLES)
        .map(|_| world.latent(&uniform(&mut cal_rng, d_in)))
        .collect();

    // Class offsets: centre every class score, then nudge towards equal frequencies.
    let scores: Vec<Vec<f64>> = zs.iter().map(|z| vec_mat(z, &world.class_proj, c)).collect();
    for k in 0..c {
        world.class_offset[k] = -scores.iter().map(|s| s[k]).sum::<f64>() / scores.len() as f64;
    }
    let target = 1.0 / c as f64;
    for _ in 0..200 {
        let mut freq = vec![0.0; c];
        for s in &scores {
            let k = argmax_offset(s, &world.class_offset);
            freq[k] += 1.0 / scores.len() as f64;
        }
        for (off, f) in world.class_offset.iter_mut().zip(&freq) {
            *off += 0.5 * (target - f);
        }
    }

    let mut mags: Vec<f64> = zs.iter().map(|z| dot(&world.edge_proj, z).abs()).collect();
    mags.sort_by(f64::total_cmp);
    world.edge_clip = mags[(mags.len() * 9) / 10];
    Ok(world)
}

fn argmax_offset(scores: &[f64], offset: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, (s, o)) in scores.iter().zip(offset).enumerate() {
        if s + o > best_v {
            best_v = s + o;
            best = k;
        }
    }
    best
}

/// Target for one task over a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    Values(Tensor),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Labels(l) => l.len(),
            Target::Values(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Result<Target> {
        Ok(match self {
            Target::Labels(l) => Target::Labels(rows.iter().map(|&r| l[r]).collect()),
            Target::Values(t) => Target::Values(t.select_rows(rows)?),
        })
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Target::Labels(l) => Some(l),
            Target::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&Tensor> {
        match self {
            Target::Values(t) => Some(t),
            Target::Labels(_) => None,
        }
    }
}

impl WorldFn {
    /// `z = tanh(tanh(x·W1 + b1)·W2 + b2)`
    pub fn latent(&self, x: &[f64]) -> Vec<f64> {
        let d_z = self.config.d_z;
        let h: Vec<f64> = vec_mat(x, &self.w1, d_z)
            .iter()
            .zip(&self.b1)
            .map(|(v, b)| (v + b).tanh())
            .collect();
        vec_mat(&h, &self.w2, d_z)
            .iter()
            .zip(&self.b2)
            .map(|(v, b)| (v + b).tanh())
            .collect()
    }

    fn targets_for(
        &self,
        rows: &[Vec<f64>],
        tasks: &BTreeSet<TaskId>,
        noise_rng: &mut EngineRng,
    ) -> BTreeMap<TaskId, Target> {
        let c = self.config.classes;
        let sigma = self.config.noise;
        let noise = |r: &mut EngineRng| -> f64 {
            if sigma > 0.0 {
                sigma * Distribution::<f64>::sample(&StandardNormal, r)
            } else {
                0.0
            }
        };
        let zs: Vec<Vec<f64>> = rows.iter().map(|x| self.latent(x)).collect();
        let mut out = BTreeMap::new();
        for &task in tasks {
            let target = match task {
                TaskId::T1 => Target::Labels(
                    zs.iter()
                        .map(|z| {
                            let mut s = vec_mat(z, &self.class_proj, c);
                            s.iter_mut().for_each(|v| *v += noise(noise_rng));
                            argmax_offset(&s, &self.class_offset)
                        })
                        .collect(),
                ),
                TaskId::T2 => Target::Values(column(
                    zs.iter()
                        .map(|z| dot(&self.scalar_proj, z) + self.scalar_bias + noise(noise_rng))
                        .collect(),
                )),
                TaskId::T3 => {
                    let mut data = Vec::with_capacity(zs.len() * 3);
                    for z in &zs {
                        let mut v = vec_mat(z, &self.normal_proj, 3);
                        v.iter_mut().for_each(|e| *e += noise(noise_rng));
                        let n = v.iter().map(|e| e * e).sum::<f64>().sqrt();
                        if n > 0.0 {
                            data.extend(v.iter().map(|e| e / n));
                        } else {
                            data.extend([1.0, 0.0, 0.0]);
                        }
                    }
                    Target::Values(Tensor::new(vec![zs.len(), 3], data).expect("T3 shape"))
                }
                TaskId::T4 => Target::Values(column(
                    zs.iter()
                        .map(|z| {
                            (dot(&self.edge_proj, z) + noise(noise_rng))
                                .abs()
                                .min(self.edge_clip)
                        })
                        .collect(),
                )),
            };
            out.insert(task, target);
        }
        out
    }

    fn batch_from_rows(
        &self,
        rows: Vec<Vec<f64>>,
        tasks: &BTreeSet<TaskId>,
        noise_rng: &mut EngineRng,
    ) -> Batch {
        let targets = self.targets_for(&rows, tasks, noise_rng);
        Batch {
            x: Tensor::from_rows(&rows).expect("rectangular inputs"),
            targets,
        }
    }
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n, 1], values).expect("column shape")
}

/// Inputs shared by all tasks plus the per-task targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub targets: BTreeMap<TaskId, Target>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.targets.keys().copied().collect()
    }

    pub fn target(&self, task: TaskId) -> Result<&Target> {
        self.targets.get(&task).ok_or(Error::UnknownTask(task))
    }

    /// Rows `rows` with targets restricted to `tasks`.
    pub fn select(&self, rows: &[usize], tasks: &BTreeSet<TaskId>) -> Result<Batch> {
        let mut targets = BTreeMap::new();
        for &t in tasks {
            targets.insert(t, self.target(t)?.select(rows)?);
        }
        Ok(Batch {
            x: self.x.select_rows(rows)?,
            targets,
        })
    }

    pub fn restrict(&self, tasks: &BTreeSet<TaskId>) -> Result<Batch> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.select(&rows, tasks)
    }

    /// Writes the batch as comma-separated columns with a header row.
    pub fn write_columnar<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d_in = self.x.shape()[1];
        let mut header: Vec<String> = (0..d_in).map(|i| format!("x{i}")).collect();
        for (task, target) in &self.targets {
            match target {
                Target::Labels(_) => header.push(task.to_string()),
                Target::Values(t) if t.shape()[1] == 1 => header.push(task.to_string()),
                Target::Values(t) => {
                    header.extend((0..t.shape()[1]).map(|k| format!("{task}_{k}")))
                }
            }
        }
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| format!("{v:?}")).collect();
            for target in self.targets.values() {
                match target {
                    Target::Labels(l) => rec.push(l[r].to_string()),
                    Target::Values(t) => rec.extend(t.row(r).iter().map(|v| format!("{v:?}"))),
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn digest_into(&self, h: &mut Sha256) {
        for v in self.x.data() {
            h.update(v.to_le_bytes());
        }
        for (task, target) in &self.targets {
            h.update([task.index() as u8]);
            match target {
                Target::Labels(l) => l.iter().for_each(|v| h.update((*v as u64).to_le_bytes())),
                Target::Values(t) => t.data().iter().for_each(|v| h.update(v.to_le_bytes())),
            }
        }
    }
}

fn sample_rows(r: &mut EngineRng, n: usize, d_in: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| uniform(r, d_in)).collect()
}

pub fn sample_batch(
    world: &WorldFn,
    tasks: &BTreeSet<TaskId>,
    batch_size: usize,
    seed: u64,
) -> Result<Batch> {
    if batch_size < 1 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Argument("at least one task is required".into()));
    }
    let mut r = rng(derive_seed(seed, 0x5841_4d50));
    let rows = sample_rows(&mut r, batch_size, world.config.d_in);
    let mut noise_rng = rng(derive_seed(seed, 0x4e4f_4953));
    Ok(world.batch_from_rows(rows, tasks, &mut noise_rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 512,
            val: 128,
            test: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl Splits {
    /// Hex SHA-256 over all three splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in [&self.train, &self.val, &self.test] {
            b.digest_into(&mut h);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Train/val/test batches over all four tasks, with pairwise distinct input rows.
pub fn make_splits(world: &WorldFn, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if sizes.train < 1 || sizes.val < 1 || sizes.test < 1 {
        return Err(Error::Argument("split sizes must be at least 1".into()));
    }
    let total = sizes.train + sizes.val + sizes.test;
    let mut r = rng(derive_seed(seed, 0x5350_4c54));
    let mut seen = HashSet::with_capacity(total);
    let mut rows = Vec::with_capacity(total);
    while rows.len() < total {
        let row = uniform(&mut r, world.config.d_in);
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            rows.push(row);
        }
    }
    let tasks: BTreeSet<TaskId> = TaskId::ALL.into_iter().collect();
    let mut noise_rng = rng(derive_seed(seed, 0x4e4f_4953));
    let test = rows.split_off(sizes.train + sizes.val);
    let val = rows.split_off(sizes.train);
    Ok(Splits {
        train: world.batch_from_rows(rows, &tasks, &mut noise_rng),
        val: world.batch_from_rows(val, &tasks, &mut noise_rng),
        test: world.batch_from_rows(test, &tasks, &mut noise_rng),
    })
}

/// Random permutation of `0..n` from `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    idx
}
