//! Acceptance criteria 1–10, one PASS/FAIL line each.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use mtml_core::episodes::{generate_combos, multi_subsets, sample_episode};
use mtml_core::meta::{exact_meta_gradient, first_order_meta_gradient, outer_step, MetaConfig, OuterMode};
use mtml_core::network::{forward, NetConfig, ParamGroup, ParamSet};
use mtml_core::objectives::{combined_loss, loss_and_grads, task_loss, TaskMask, Weighting};
use mtml_core::optim::{AdamW, AdamWConfig, UpdateScope};
use mtml_core::tasks::{Batch, SplitSizes, TaskId, WorldConfig};
use mtml_core::tensor::check::RandomMlp;
use mtml_core::tensor::{Graph, Tensor};
use mtml_core::train::{
    run_experiment, train_single, Paradigm, Phase, StopState, TaskData, TrainConfig, GLOBAL_PATIENCE,
    TASK_PATIENCE,
};
use mtml_harness::config::HarnessConfig;
use mtml_harness::grid::{default_grid, GridManifest};
use mtml_harness::runner::{self, RunOptions, AGGREGATE_FILE};

type Outcome = Result<String, String>;

fn all() -> BTreeSet<TaskId> {
    TaskId::ALL.into_iter().collect()
}

fn data() -> TaskData {
    TaskData::generate(0, WorldConfig::default(), SplitSizes::default()).expect("default world")
}

fn first_rows(b: &Batch, n: usize) -> Batch {
    b.select(&(0..n).collect::<Vec<_>>(), &b.tasks()).expect("rows exist")
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn autodiff() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let m = RandomMlp::sample(seed);
        let r = m.check(1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_err);
    }
    ensure(worst < 1e-5, format!("max relative error {worst:.2e} over 50 random MLPs"))
}

fn combinatorics() -> Outcome {
    for n in 2..=10usize {
        let items: Vec<usize> = (0..n).collect();
        let got = multi_subsets(&items);
        let mut brute: Vec<Vec<usize>> = (0u32..1 << n)
            .filter(|m| m.count_ones() >= 2)
            .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
            .collect();
        brute.sort();
        let mut sorted = got.clone();
        sorted.sort();
        sorted.dedup();
        if got.len() != (1 << n) - n - 1 || sorted != brute || got.iter().any(|s| s.len() < 2) {
            return Err(format!("mismatch at N = {n}"));
        }
    }
    let four = generate_combos(&all()).map_err(|e| e.to_string())?.combos.len();
    ensure(four == 11, format!("N = 2..10 match brute force, N = 4 gives {four}"))
}

fn masking_and_freezing() -> Outcome {
    let d = data();
    let batch = first_rows(&d.splits.train, 32);
    let base = ParamSet::init(NetConfig::standard(&d.world, &all()), 0).map_err(|e| e.to_string())?;
    let combos = generate_combos(&all()).map_err(|e| e.to_string())?.combos;
    for combo in &combos {
        let mask = TaskMask::new(combo.tasks().clone());
        let excluded: Vec<TaskId> = TaskId::ALL.into_iter().filter(|t| !combo.tasks().contains(t)).collect();

        // Every head in the graph, only the combo's losses in the objective.
        let mut g = Graph::new();
        let bound = base.bind(&mut g, &all(), true).map_err(|e| e.to_string())?;
        let x = g.constant(batch.x.clone());
        let preds = forward(&mut g, &bound, x).map_err(|e| e.to_string())?;
        let mut losses = BTreeMap::new();
        let mut logvars = BTreeMap::new();
        for t in TaskId::ALL {
            let target = batch.target(t).map_err(|e| e.to_string())?;
            losses.insert(t, task_loss(&mut g, t, preds[&t], target).map_err(|e| e.to_string())?);
            logvars.insert(t, bound.logvar(t).expect("bound with log-variances"));
        }
        let total = combined_loss(&mut g, &losses, &logvars, &mask, Weighting::Uncertainty).map_err(|e| e.to_string())?;
        g.backward(total).map_err(|e| e.to_string())?;
        let grads = base.collect_grads(&g, &bound);
        for key in base.keys() {
            let excluded_group = match key.group {
                ParamGroup::Head(t) | ParamGroup::LogVar(t) => excluded.contains(&t),
                ParamGroup::Trunk => false,
            };
            if excluded_group && grads.get(&key).is_some_and(|v| v.iter().any(|&x| x != 0.0)) {
                return Err(format!("combo {combo}: nonzero gradient on {key}"));
            }
        }

        let frozen = *combo.tasks().iter().next().expect("combo has tasks");
        let mut p = base.clone();
        p.freeze(frozen).map_err(|e| e.to_string())?;
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let scope = UpdateScope::everything(combo.tasks());
        for _ in 0..100 {
            let eval = loss_and_grads(&p, &batch, &mask, Weighting::Uncertainty).map_err(|e| e.to_string())?;
            opt.step(&mut p, &eval.grads, &scope).map_err(|e| e.to_string())?;
        }
        for t in excluded.iter().chain([&frozen]) {
            let same_head = p.head(*t).ok() == before.head(*t).ok();
            let same_lv = p.logvar(*t).ok().map(f64::to_bits) == before.logvar(*t).ok().map(f64::to_bits);
            if !(same_head && same_lv) {
                return Err(format!("combo {combo}: {t} changed"));
            }
        }
        if p.trunk() == before.trunk() {
            return Err(format!("combo {combo}: trunk never moved"));
        }
    }
    Ok(format!("{} combos: excluded gradients zero, frozen heads unchanged over 100 steps", combos.len()))
}

fn uncertainty_identity() -> Outcome {
    let d = data();
    let batch = first_rows(&d.splits.val, 64);
    let p = ParamSet::init(NetConfig::standard(&d.world, &all()), 1).map_err(|e| e.to_string())?;
    let eval = loss_and_grads(&p, &batch, &TaskMask::all(), Weighting::Uncertainty).map_err(|e| e.to_string())?;
    let plain: f64 = eval.per_task.values().sum();
    let gap = (eval.total - plain).abs();

    let mut g = Graph::new();
    let l2 = g.constant(Tensor::scalar(1.0));
    let s2 = g.param(Tensor::scalar(std::f64::consts::LN_2));
    let mask = TaskMask::new([TaskId::T2].into_iter().collect());
    let out = combined_loss(
        &mut g,
        &[(TaskId::T2, l2)].into_iter().collect(),
        &[(TaskId::T2, s2)].into_iter().collect(),
        &mask,
        Weighting::Uncertainty,
    )
    .map_err(|e| e.to_string())?;
    let v = g.value(out).item().map_err(|e| e.to_string())?;
    ensure(
        gap < 1e-12 && (v - 0.8466).abs() < 1e-4,
        format!("s = 0 gap {gap:.1e}, s = ln 2 example {v:.6}"),
    )
}

fn bilevel_collapse() -> Outcome {
    let d = data();
    let p = ParamSet::init(NetConfig::standard(&d.world, &all()), 2).map_err(|e| e.to_string())?;
    let combos = generate_combos(&all()).map_err(|e| e.to_string())?.combos;
    let cfg = MetaConfig {
        inner_lr: 0.0,
        ..MetaConfig::default()
    };
    for (i, combo) in combos.iter().enumerate() {
        let ep = sample_episode(combo, &d.splits.train, 16, 16, i as u64).map_err(|e| e.to_string())?;
        let mut meta = p.clone();
        let mut opt_m = AdamW::new(AdamWConfig::default());
        outer_step(&mut meta, std::slice::from_ref(&ep), &mut opt_m, &cfg, OuterMode::FirstOrder)
            .map_err(|e| e.to_string())?;
        let mut joint = p.clone();
        let mut opt_j = AdamW::new(AdamWConfig::default());
        let mask = TaskMask::new(combo.tasks().clone());
        let eval = loss_and_grads(&joint, &ep.query, &mask, Weighting::Uncertainty).map_err(|e| e.to_string())?;
        opt_j
            .step(&mut joint, &eval.grads, &UpdateScope::everything(combo.tasks()))
            .map_err(|e| e.to_string())?;
        if bits(&meta.flatten()) != bits(&joint.flatten()) {
            return Err(format!("combo {combo}: parameters differ"));
        }
    }
    Ok(format!("{} combos bit-identical", combos.len()))
}

fn meta_gradient_oracle() -> Outcome {
    let d = data();
    let tiny = NetConfig::tiny(&d.world, &all());
    let n_params = tiny.param_count();
    if n_params > 300 {
        return Err(format!("oracle net has {n_params} parameters"));
    }
    let combos = generate_combos(&all()).map_err(|e| e.to_string())?.combos;
    let cfg = MetaConfig::default();
    let mut min_cos = f64::INFINITY;
    let mut min_without_t3 = f64::INFINITY;
    for seed in 0..10u64 {
        let p = ParamSet::init(tiny.clone(), seed).map_err(|e| e.to_string())?;
        let combo = &combos[seed as usize % combos.len()];
        let ep = sample_episode(combo, &d.splits.train, 16, 16, seed).map_err(|e| e.to_string())?;
        let fo = first_order_meta_gradient(&p, &ep, &cfg).map_err(|e| e.to_string())?.flatten_like(&p);
        let exact = exact_meta_gradient(&p, &ep, &cfg, 1e-5).map_err(|e| e.to_string())?;
        let c = cosine(&fo, &exact);
        min_cos = min_cos.min(c);
        if !combo.tasks().contains(&TaskId::T3) {
            min_without_t3 = min_without_t3.min(c);
        }
    }
    let zero = MetaConfig {
        inner_lr: 0.0,
        ..cfg
    };
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let p = ParamSet::init(tiny.clone(), 100 + seed).map_err(|e| e.to_string())?;
        let ep = sample_episode(&combos[seed as usize], &d.splits.train, 16, 16, seed).map_err(|e| e.to_string())?;
        let fo = first_order_meta_gradient(&p, &ep, &zero).map_err(|e| e.to_string())?.flatten_like(&p);
        let exact = exact_meta_gradient(&p, &ep, &zero, 1e-5).map_err(|e| e.to_string())?;
        for (a, n) in fo.iter().zip(&exact) {
            worst = worst.max(mtml_core::tensor::check::relative_error(*a, *n));
        }
    }
    ensure(
        min_cos > 0.9 && worst < 1e-5,
        format!(
            "{n_params} params: min cosine {min_cos:.4} over 10 seeds ({min_without_t3:.4} on combos without T3), \
             inner_lr = 0 relative error {worst:.1e}"
        ),
    )
}

struct TransferRun {
    task: TaskId,
    seed: u64,
    single_epochs: usize,
    reach_epoch: Option<usize>,
    single_metric: f64,
    finetune_metric: f64,
    higher_is_better: bool,
}

/// Single-task baselines against meta-trained leave-one-out fine-tunes.
fn transfer_grid() -> Result<Vec<TransferRun>, String> {
    let d = data();
    let cfg = TrainConfig::default();
    let mut out = Vec::new();
    for task in TaskId::ALL {
        let rest: BTreeSet<TaskId> = TaskId::ALL.into_iter().filter(|&t| t != task).collect();
        let added: BTreeSet<TaskId> = [task].into_iter().collect();
        let metric = d.world.task_spec(task).primary_metric();
        for seed in 0..5 {
            let single = train_single(task, &d, &cfg, seed).map_err(|e| e.to_string())?.report;
            let meta = run_experiment(Paradigm::MtmlFinetune, &rest, &added, &d, &cfg, seed)
                .map_err(|e| e.to_string())?
                .report;
            if !single.is_completed() || !meta.is_completed() {
                return Err(format!("{task} seed {seed}: run failed"));
            }
            let target = 1.1 * single.final_val_loss(Phase::Train, task).ok_or("no val loss")?;
            let get = |r: &mtml_core::train::RunReport| r.test.as_ref().and_then(|t| t.get(task, metric));
            out.push(TransferRun {
                task,
                seed,
                single_epochs: single.epochs_total,
                reach_epoch: meta.first_epoch_reaching(Phase::Finetune, task, target),
                single_metric: get(&single).ok_or("no single metric")?,
                finetune_metric: get(&meta).ok_or("no finetune metric")?,
                higher_is_better: metric.higher_is_better(),
            });
        }
    }
    Ok(out)
}

fn per_task(runs: &[TransferRun], pass: impl Fn(&TransferRun) -> bool) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for task in TaskId::ALL {
        let rs: Vec<&TransferRun> = runs.iter().filter(|r| r.task == task).collect();
        let n = rs.iter().filter(|r| pass(r)).count();
        ok &= n >= 4;
        parts.push(format!("{task} {n}/{}", rs.len()));
    }
    ensure(ok, parts.join(", "))
}

fn adaptation_speed(runs: &[TransferRun]) -> Outcome {
    for r in runs {
        eprintln!(
            "    {} seed {}: single {} epochs, fine-tune reaches 1.1x its final val loss at {:?}",
            r.task, r.seed, r.single_epochs, r.reach_epoch
        );
    }
    per_task(runs, |r| r.reach_epoch.is_some_and(|e| e < r.single_epochs))
}

fn quality_parity(runs: &[TransferRun]) -> Outcome {
    for r in runs {
        eprintln!(
            "    {} seed {}: single {:.4}, fine-tuned {:.4}",
            r.task, r.seed, r.single_metric, r.finetune_metric
        );
    }
    per_task(runs, |r| {
        if r.higher_is_better {
            r.finetune_metric >= 0.9 * r.single_metric
        } else {
            r.finetune_metric <= 1.1 * r.single_metric
        }
    })
}

fn early_stopping() -> Outcome {
    let vee = |e: usize| (e as f64 - 3.0).abs() + 1.0;
    let one: BTreeSet<TaskId> = [TaskId::T2].into_iter().collect();
    let mut s = StopState::new(&one, TASK_PATIENCE, GLOBAL_PATIENCE);
    let mut task_stop = None;
    for e in 1..=200 {
        if !s.update(e, &[(TaskId::T2, vee(e))].into_iter().collect(), 0.0).newly_stopped.is_empty() {
            task_stop = Some(e);
            break;
        }
    }
    let mut s = StopState::new(&BTreeSet::new(), TASK_PATIENCE, GLOBAL_PATIENCE);
    let mut global_stop = None;
    for e in 1..=200 {
        if s.update(e, &BTreeMap::new(), vee(e)).global_stop {
            global_stop = Some(e);
            break;
        }
    }
    // Two tasks whose sum is best at epoch 3. Afterwards they take turns
    // setting new personal bests while the other is poor, so neither runs out
    // of patience and the sum never recovers.
    let two: BTreeSet<TaskId> = [TaskId::T1, TaskId::T2].into_iter().collect();
    let mut s = StopState::new(&two, TASK_PATIENCE, GLOBAL_PATIENCE);
    let mut joint_stop = None;
    for e in 1..=200 {
        let (t1, t2) = match e {
            1..=3 => (vee(e), vee(e)),
            _ if e % 2 == 0 => (1.0 - 1e-3 * e as f64, 10.0),
            _ => (10.0, 1.0 - 1e-3 * e as f64),
        };
        let u = s.update(e, &[(TaskId::T1, t1), (TaskId::T2, t2)].into_iter().collect(), 0.0);
        if !u.newly_stopped.is_empty() {
            return Err(format!("unexpected task stop {:?} at {e}", u.newly_stopped));
        }
        if u.global_stop {
            joint_stop = Some(e);
            break;
        }
    }
    ensure(
        task_stop == Some(38) && global_stop == Some(53) && joint_stop == Some(53),
        format!("best at 3: task stop {task_stop:?}, global stop {global_stop:?}, summed global stop {joint_stop:?}"),
    )
}

fn reproducibility() -> Outcome {
    let mut cfg = HarnessConfig {
        jobs: 1,
        ..HarnessConfig::default()
    };
    cfg.train.max_epochs = 8;
    cfg.train.max_meta_epochs = 4;
    cfg.train.max_finetune_epochs = 8;
    cfg.train.short_finetune_epochs = 3;
    cfg.train.meta_steps_per_epoch = 2;
    let mut csvs = Vec::new();
    let mut hashes = Vec::new();
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for dir in &dirs {
        let out = dir.path().to_string_lossy().into_owned();
        let m = GridManifest::new("default", default_grid(&cfg), &cfg, &out).map_err(|e| e.to_string())?;
        let opts = RunOptions {
            quiet: true,
            ..RunOptions::default()
        };
        let summary = runner::run(&m, &cfg, &opts).map_err(|e| e.to_string())?;
        if !summary.failures.is_empty() {
            return Err(format!("{} failed runs", summary.failures.len()));
        }
        csvs.push(std::fs::read(dir.path().join(AGGREGATE_FILE)).map_err(|e| e.to_string())?);
        hashes.push(m.config_hash.clone());
    }
    let runs = default_grid(&cfg).len() * cfg.seeds.len();
    ensure(
        hashes[0] == hashes[1] && !csvs[0].is_empty() && csvs[0] == csvs[1],
        format!(
            "{runs} runs per pass, config {}, aggregate {} bytes, identical: {}",
            &hashes[0][..12],
            csvs[0].len(),
            csvs[0] == csvs[1]
        ),
    )
}

fn report(n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let within = elapsed <= limit;
    let (ok, detail) = match result {
        Ok(d) => (within, d),
        Err(d) => (false, d),
    };
    let time = if within {
        format!("{:.2}s", elapsed.as_secs_f64())
    } else {
        format!("{:.2}s, over the {}s limit", elapsed.as_secs_f64(), limit.as_secs())
    };
    println!(
        "criterion {n:>2} {name}: {} ({detail}; {time})",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn main() {
    let s = Duration::from_secs;
    let mut ok = true;
    ok &= report(1, "autodiff correctness", s(30), autodiff);
    ok &= report(2, "episode combinatorics", s(1), combinatorics);
    ok &= report(3, "masking and freezing", s(60), masking_and_freezing);
    ok &= report(4, "uncertainty identity", s(1), uncertainty_identity);
    ok &= report(5, "bi-level collapse", s(10), bilevel_collapse);
    ok &= report(6, "exact meta-gradient oracle", s(300), meta_gradient_oracle);

    let start = Instant::now();
    let grid = transfer_grid();
    let grid_time = start.elapsed();
    let budget = s(1800).saturating_sub(grid_time);
    match &grid {
        Ok(runs) => {
            ok &= report(7, "adaptation speed", budget, || adaptation_speed(runs));
            ok &= report(8, "quality parity", budget, || quality_parity(runs));
        }
        Err(e) => {
            for (n, name) in [(7, "adaptation speed"), (8, "quality parity")] {
                ok &= report(n, name, budget, || Err(e.clone()));
            }
        }
    }
    println!("             leave-one-out grid: 40 runs in {:.1}s", grid_time.as_secs_f64());

    ok &= report(9, "early stopping", s(1), early_stopping);
    ok &= report(10, "end-to-end reproducibility", s(600), reproducibility);
    if !ok {
        std::process::exit(1);
    }
}
