use std::collections::BTreeSet;

use mtml_core::tasks::{make_splits, make_world, sample_batch, SplitSizes, Target, TaskId, WorldConfig};
use proptest::prelude::*;

fn all() -> BTreeSet<TaskId> {
    TaskId::ALL.into_iter().collect()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit_softmax(z: &[Vec<f64>], y: &[usize], classes: usize, steps: usize, lr: f64) -> Vec<f64> {
    let d = z[0].len() + 1;
    let mut w = vec![0.0; d * classes];
    let n = z.len() as f64;
    for _ in 0..steps {
        let mut grad = vec![0.0; d * classes];
        for (row, &label) in z.iter().zip(y) {
            let p = softmax_scores(&w, row, classes);
            for c in 0..classes {
                let err = p[c] - if c == label { 1.0 } else { 0.0 };
                for (k, &v) in row.iter().chain(std::iter::once(&1.0)).enumerate() {
                    grad[k * classes + c] += err * v / n;
                }
            }
        }
        w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
    }
    w
}

fn softmax_scores(w: &[f64], row: &[f64], classes: usize) -> Vec<f64> {
    let mut s = vec![0.0; classes];
    for (k, &v) in row.iter().chain(std::iter::once(&1.0)).enumerate() {
        for c in 0..classes {
            s[c] += v * w[k * classes + c];
        }
    }
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

#[test]
fn class_labels_are_linearly_decodable_from_the_latent() {
    let cfg = WorldConfig::default();
    let w = make_world(0, cfg.clone()).unwrap();
    let splits = make_splits(&w, SplitSizes { train: 1024, val: 8, test: 512 }, 0).unwrap();
    let latents = |b: &mtml_core::tasks::Batch| -> Vec<Vec<f64>> {
        (0..b.len()).map(|i| w.latent(b.x.row(i))).collect()
    };
    let (ztr, zte) = (latents(&splits.train), latents(&splits.test));
    let ytr = splits.train.target(TaskId::T1).unwrap().labels().unwrap().to_vec();
    let yte = splits.test.target(TaskId::T1).unwrap().labels().unwrap();
    let weights = fit_softmax(&ztr, &ytr, cfg.classes, 20000, 20.0);
    let hits = zte
        .iter()
        .zip(yte)
        .filter(|(z, &y)| argmax(&softmax_scores(&weights, z, cfg.classes)) == y)
        .count();
    let acc = hits as f64 / yte.len() as f64;
    assert!(acc > 0.95, "probe accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn targets_respect_their_ranges(seed in any::<u64>(), noise in 0.0f64..0.3) {
        let cfg = WorldConfig { noise, ..WorldConfig::default() };
        let w = make_world(seed, cfg.clone()).unwrap();
        let b = sample_batch(&w, &all(), 64, seed).unwrap();
        prop_assert_eq!(b.len(), 64);
        prop_assert!(b.target(TaskId::T1).unwrap().labels().unwrap().iter().all(|&c| c < cfg.classes));
        let t3 = b.target(TaskId::T3).unwrap().values().unwrap();
        for i in 0..64 {
            let n: f64 = t3.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
        let t4 = b.target(TaskId::T4).unwrap().values().unwrap();
        prop_assert!(t4.data().iter().all(|&v| v >= 0.0 && v <= w.edge_clip));
        prop_assert!(b.x.data().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn latent_is_bounded_and_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-1.0f64..1.0, 8)) {
        let a = make_world(seed, WorldConfig::default()).unwrap();
        let b = make_world(seed, WorldConfig::default()).unwrap();
        let z = a.latent(&x);
        prop_assert_eq!(z.len(), 16);
        prop_assert!(z.iter().all(|v| v.abs() < 1.0));
        prop_assert_eq!(z, b.latent(&x));
    }
}

#[test]
fn restricted_batches_drop_other_targets() {
    let w = make_world(2, WorldConfig::default()).unwrap();
    let b = sample_batch(&w, &all(), 10, 2).unwrap();
    let only: BTreeSet<TaskId> = [TaskId::T2].into_iter().collect();
    let r = b.restrict(&only).unwrap();
    assert_eq!(r.tasks(), only);
    assert!(r.target(TaskId::T1).is_err());
    assert!(matches!(r.target(TaskId::T2).unwrap(), Target::Values(_)));
    assert_eq!(r.x, b.x);
}

#[test]
fn fingerprint_changes_with_the_seed() {
    let w = make_world(1, WorldConfig::default()).unwrap();
    let a = make_splits(&w, SplitSizes::default(), 1).unwrap();
    let b = make_splits(&w, SplitSizes::default(), 1).unwrap();
    let c = make_splits(&w, SplitSizes::default(), 2).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_ne!(a.fingerprint(), c.fingerprint());
    assert_eq!(a.fingerprint().len(), 64);
}
