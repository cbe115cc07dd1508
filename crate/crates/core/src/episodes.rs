//! Multi-task episodes: every subset of the source tasks with at least two
//! members, each paired with disjoint support and query rows.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed2;
use crate::tasks::{format_task_list, permutation, Batch, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EpisodeCombo {
    tasks: BTreeSet<TaskId>,
}

impl EpisodeCombo {
    pub fn new(tasks: BTreeSet<TaskId>) -> Result<Self> {
        if tasks.len() < 2 {
            return Err(Error::Argument(format!(
                "an episode needs at least two tasks, got {}",
                tasks.len()
            )));
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &BTreeSet<TaskId> {
        &self.tasks
    }
}

impl fmt::Display for EpisodeCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_task_list(&self.tasks))
    }
}

/// The generated combo family plus the insufficiency flag for two source tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComboFamily {
    pub combos: Vec<EpisodeCombo>,
    /// Set when only two source tasks exist: a single episode is too few to meta-train on.
    pub insufficient: bool,
}

impl ComboFamily {
    /// One combo per line, numbered.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.combos.iter().enumerate() {
            out.push_str(&format!("{:>3}  {c}\n", i + 1));
        }
        out
    }
}

/// All subsets of `source` with two or more tasks, `2^N − N − 1` in total.
///
/// Subsets are ordered lexicographically by their sorted task lists, so for
/// `{T1, T2, T3}` the order is `T1T2, T1T2T3, T1T3, T2T3`.
pub fn generate_combos(source: &BTreeSet<TaskId>) -> Result<ComboFamily> {
    let items: Vec<TaskId> = source.iter().copied().collect();
    let n = items.len();
    if n < 2 {
        return Err(Error::Argument(format!(
            "episode generation needs at least two source tasks, got {n}"
        )));
    }
    let combos = multi_subsets(&items)
        .into_iter()
        .map(|tasks| EpisodeCombo {
            tasks: tasks.into_iter().collect(),
        })
        .collect();
    Ok(ComboFamily {
        combos,
        insufficient: n == 2,
    })
}

/// Every subset of `items` with at least two members, depth-first, so sorted
/// input yields lexicographic order.
pub fn multi_subsets<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let n = items.len();
    let mut out = Vec::with_capacity((1usize << n).saturating_sub(n + 1));
    let mut current = Vec::with_capacity(n);
    extend_subsets(items, 0, &mut current, &mut out);
    out
}

fn extend_subsets<T: Clone>(items: &[T], start: usize, current: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
    for i in start..items.len() {
        current.push(items[i].clone());
        if current.len() >= 2 {
            out.push(current.clone());
        }
        extend_subsets(items, i + 1, current, out);
        current.pop();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub combo: EpisodeCombo,
    pub support: Batch,
    pub query: Batch,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

pub fn sample_episode(
    combo: &EpisodeCombo,
    train: &Batch,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Episode> {
    if support_size == 0 || query_size == 0 {
        return Err(Error::Argument("support and query sizes must be positive".into()));
    }
    if support_size + query_size > train.len() {
        return Err(Error::Argument(format!(
            "support {support_size} + query {query_size} exceeds {} available rows",
            train.len()
        )));
    }
    let perm = permutation(train.len(), seed);
    let support_rows = perm[..support_size].to_vec();
    let query_rows = perm[support_size..support_size + query_size].to_vec();
    Ok(Episode {
        combo: combo.clone(),
        support: train.select(&support_rows, combo.tasks())?,
        query: train.select(&query_rows, combo.tasks())?,
        support_rows,
        query_rows,
    })
}

/// `k_per_combo` rounds over the whole family, every combo once per round.
pub fn meta_batch(
    combos: &[EpisodeCombo],
    k_per_combo: usize,
    train: &Batch,
    support_size: usize,
    query_size: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if k_per_combo < 1 {
        return Err(Error::Argument("k_per_combo must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(combos.len() * k_per_combo);
    for round in 0..k_per_combo {
        for (i, combo) in combos.iter().enumerate() {
            let s = derive_seed2(seed, round as u64, i as u64);
            out.push(sample_episode(combo, train, support_size, query_size, s)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_splits, make_world, SplitSizes, WorldConfig};

    fn set(ids: &[TaskId]) -> BTreeSet<TaskId> {
        ids.iter().copied().collect()
    }

    fn train() -> Batch {
        let w = make_world(1, WorldConfig::default()).unwrap();
        make_splits(&w, SplitSizes::default(), 1).unwrap().train
    }

    #[test]
    fn four_tasks_give_eleven_combos() {
        let fam = generate_combos(&TaskId::ALL.into_iter().collect()).unwrap();
        assert_eq!(fam.combos.len(), 11);
        assert!(!fam.insufficient);
        assert!(fam.combos.iter().all(|c| c.tasks().len() >= 2));
        let unique: BTreeSet<_> = fam.combos.iter().collect();
        assert_eq!(unique.len(), 11);
    }

    #[test]
    fn three_tasks_enumerated_in_order() {
        use TaskId::*;
        let fam = generate_combos(&set(&[T1, T2, T3])).unwrap();
        let got: Vec<String> = fam.combos.iter().map(ToString::to_string).collect();
        assert_eq!(got, ["T1,T2", "T1,T2,T3", "T1,T3", "T2,T3"]);
    }

    #[test]
    fn two_tasks_flag_insufficiency() {
        use TaskId::*;
        let fam = generate_combos(&set(&[T1, T2])).unwrap();
        assert_eq!(fam.combos.len(), 1);
        assert!(fam.insufficient);
        assert!(generate_combos(&set(&[T1])).is_err());
        assert!(EpisodeCombo::new(set(&[T3])).is_err());
    }

    #[test]
    fn table_lists_one_combo_per_line() {
        let fam = generate_combos(&TaskId::ALL.into_iter().collect()).unwrap();
        assert_eq!(fam.table().lines().count(), 11);
    }

    #[test]
    fn episode_rows_are_disjoint_and_reproducible() {
        let tr = train();
        let combo = EpisodeCombo::new(set(&[TaskId::T1, TaskId::T2])).unwrap();
        let ep = sample_episode(&combo, &tr, 16, 16, 3).unwrap();
        assert_eq!(ep.support.len(), 16);
        assert_eq!(ep.query.len(), 16);
        let s: BTreeSet<_> = ep.support_rows.iter().collect();
        let q: BTreeSet<_> = ep.query_rows.iter().collect();
        assert_eq!(s.len(), 16);
        assert!(s.is_disjoint(&q));
        assert_eq!(ep.support.tasks(), *combo.tasks());
        assert_eq!(ep, sample_episode(&combo, &tr, 16, 16, 3).unwrap());
        assert!(sample_episode(&combo, &tr, 500, 16, 3).is_err());
    }

    #[test]
    fn repeated_draws_cover_every_row() {
        let tr = train();
        let combo = EpisodeCombo::new(set(&[TaskId::T1, TaskId::T2])).unwrap();
        let mut seen = vec![false; tr.len()];
        for s in 0..1000 {
            let ep = sample_episode(&combo, &tr, 16, 16, s).unwrap();
            for &r in ep.support_rows.iter().chain(&ep.query_rows) {
                seen[r] = true;
            }
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn meta_batch_round_robin() {
        use TaskId::*;
        let tr = train();
        let fam3 = generate_combos(&set(&[T1, T2, T3])).unwrap();
        let mb = meta_batch(&fam3.combos, 1, &tr, 16, 16, 0).unwrap();
        assert_eq!(mb.len(), 4);
        let combos: Vec<_> = mb.iter().map(|e| e.combo.clone()).collect();
        assert_eq!(combos, fam3.combos);

        let fam4 = generate_combos(&TaskId::ALL.into_iter().collect()).unwrap();
        let mb = meta_batch(&fam4.combos, 2, &tr, 16, 16, 0).unwrap();
        assert_eq!(mb.len(), 22);
        assert_eq!(mb[0].combo, mb[11].combo);

        let other = meta_batch(&fam3.combos, 1, &tr, 16, 16, 1).unwrap();
        let again = meta_batch(&fam3.combos, 1, &tr, 16, 16, 0).unwrap();
        assert_ne!(other[0].support_rows, again[0].support_rows);
        assert_eq!(other[0].combo, again[0].combo);
        assert!(meta_batch(&fam3.combos, 0, &tr, 16, 16, 0).is_err());
    }
}
