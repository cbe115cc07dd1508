//! Task-wise and global early stopping on validation losses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::tasks::TaskId;

pub const TASK_PATIENCE: usize = 35;
pub const GLOBAL_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tracker {
    pub best: f64,
    /// 0 until the first finite value arrives.
    pub best_epoch: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Records `value` at `epoch`; true when it improves on the best so far.
    fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    fn exhausted(&self, epoch: usize, patience: usize) -> bool {
        epoch >= self.best_epoch + patience
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopUpdate {
    pub newly_stopped: Vec<TaskId>,
    pub global_stop: bool,
}

/// Epochs are counted from 1. With the best value at epoch `b`, a task stops at
/// epoch `b + task_patience` and the run at `b + global_patience`, unless a
/// better value arrives first.
///
/// When tasks are tracked, the global objective is the sum of validation
/// values over the tasks that have not stopped. Whenever a task stops, the
/// global best is recomputed over the recorded epochs for the remaining
/// tasks, so the comparison always covers the same set of tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopState {
    pub task_patience: usize,
    pub global_patience: usize,
    pub tasks: BTreeMap<TaskId, Tracker>,
    pub global: Tracker,
    /// Stopped task and the epoch it stopped at.
    pub stopped: BTreeMap<TaskId, usize>,
    pub global_stopped: Option<usize>,
    history: Vec<BTreeMap<TaskId, f64>>,
}

impl StopState {
    pub fn new(tasks: &BTreeSet<TaskId>, task_patience: usize, global_patience: usize) -> Self {
        Self {
            task_patience,
            global_patience,
            tasks: tasks.iter().map(|&t| (t, Tracker::new())).collect(),
            global: Tracker::new(),
            stopped: BTreeMap::new(),
            global_stopped: None,
            history: Vec::new(),
        }
    }

    fn active_sum(&self, values: &BTreeMap<TaskId, f64>) -> f64 {
        self.tasks
            .keys()
            .filter(|t| !self.stopped.contains_key(t))
            .map(|t| values.get(t).copied().unwrap_or(f64::INFINITY))
            .sum()
    }

    fn rebuild_global(&mut self) {
        let mut tracker = Tracker::new();
        for (i, values) in self.history.iter().enumerate() {
            tracker.observe(i + 1, self.active_sum(values));
        }
        self.global = tracker;
    }

    /// Feeds one epoch of validation values; epochs must arrive as 1, 2, ….
    /// Tasks missing from `task_values` count as not improving.
    /// `global_value` is used only when no task is tracked.
    pub fn update(
        &mut self,
        epoch: usize,
        task_values: &BTreeMap<TaskId, f64>,
        global_value: f64,
    ) -> StopUpdate {
        let mut out = StopUpdate::default();
        self.history.push(task_values.clone());
        for (&task, tracker) in self.tasks.iter_mut() {
            if self.stopped.contains_key(&task) {
                continue;
            }
            if let Some(&v) = task_values.get(&task) {
                tracker.observe(epoch, v);
            }
            if tracker.exhausted(epoch, self.task_patience) {
                self.stopped.insert(task, epoch);
                out.newly_stopped.push(task);
            }
        }
        if self.global_stopped.is_none() {
            if self.tasks.is_empty() {
                self.global.observe(epoch, global_value);
            } else if self.all_tasks_stopped() {
                return out;
            } else if out.newly_stopped.is_empty() {
                let v = self.active_sum(task_values);
                self.global.observe(epoch, v);
            } else {
                self.rebuild_global();
            }
            if self.global.exhausted(epoch, self.global_patience) {
                self.global_stopped = Some(epoch);
                out.global_stop = true;
            }
        }
        out
    }

    pub fn is_stopped(&self, task: TaskId) -> bool {
        self.stopped.contains_key(&task)
    }

    /// True once every tracked task has stopped; false when no task is tracked.
    pub fn all_tasks_stopped(&self) -> bool {
        !self.tasks.is_empty() && self.stopped.len() == self.tasks.len()
    }

    pub fn finished(&self) -> bool {
        self.global_stopped.is_some() || self.all_tasks_stopped()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(task: TaskId) -> BTreeSet<TaskId> {
        [task].into_iter().collect()
    }

    /// Improves until `best`, then worsens forever.
    fn vee(epoch: usize, best: usize) -> f64 {
        (epoch as f64 - best as f64).abs() + 1.0
    }

    #[test]
    fn task_stops_at_best_plus_patience() {
        let tasks = one(TaskId::T2);
        let mut s = StopState::new(&tasks, TASK_PATIENCE, GLOBAL_PATIENCE);
        let mut stop = None;
        for epoch in 1..=500 {
            let u = s.update(epoch, &[(TaskId::T2, vee(epoch, 3))].into_iter().collect(), 0.0);
            if !u.newly_stopped.is_empty() {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(stop, Some(38));
        assert_eq!(s.stopped[&TaskId::T2], 38);
        assert!(s.finished());
    }

    #[test]
    fn global_stops_at_best_plus_patience() {
        let mut s = StopState::new(&BTreeSet::new(), TASK_PATIENCE, GLOBAL_PATIENCE);
        let mut end = None;
        for epoch in 1..=500 {
            if s.update(epoch, &BTreeMap::new(), vee(epoch, 3)).global_stop {
                end = Some(epoch);
                break;
            }
        }
        assert_eq!(end, Some(53));
        assert_eq!(s.global.best_epoch, 3);
    }

    #[test]
    fn global_tracks_the_sum_of_active_tasks() {
        use TaskId::*;
        let tasks: BTreeSet<TaskId> = [T1, T2].into_iter().collect();
        let mut s = StopState::new(&tasks, 1000, GLOBAL_PATIENCE);
        // T1 keeps setting tiny new bests, T2 worsens by more: the sum peaks at epoch 3.
        let mut end = None;
        for epoch in 1..=500 {
            let e = epoch as f64;
            let t1 = 10.0 - 1e-3 * e;
            let t2 = vee(epoch, 3);
            let u = s.update(epoch, &[(T1, t1), (T2, t2)].into_iter().collect(), 0.0);
            assert!(u.newly_stopped.is_empty());
            if u.global_stop {
                end = Some(epoch);
                break;
            }
        }
        assert_eq!(end, Some(53));
    }

    #[test]
    fn stopped_tasks_leave_the_global_objective() {
        use TaskId::*;
        let tasks: BTreeSet<TaskId> = [T1, T2].into_iter().collect();
        let mut s = StopState::new(&tasks, TASK_PATIENCE, GLOBAL_PATIENCE);
        let mut end = None;
        for epoch in 1..=500 {
            // T1 is best at epoch 1 and then blows up; T2 improves until epoch 60.
            let t1 = if epoch == 1 { 1.0 } else { 100.0 + epoch as f64 };
            let t2 = vee(epoch, 60);
            let u = s.update(epoch, &[(T1, t1), (T2, t2)].into_iter().collect(), 0.0);
            if u.global_stop || s.finished() {
                end = Some(epoch);
                break;
            }
        }
        assert_eq!(s.stopped[&T1], 36);
        // T2 alone decides the end: its own patience runs out at 60 + 35.
        assert_eq!(end, Some(95));
        assert_eq!(s.stopped[&T2], 95);
    }

    #[test]
    fn late_improvement_resets_the_counter() {
        let mut s = StopState::new(&one(TaskId::T1), 35, 50);
        let mut stop = None;
        for epoch in 1..=200 {
            let v = match epoch {
                1..=3 => 10.0 - epoch as f64,
                30 => 1.0,
                _ => 8.0,
            };
            let u = s.update(epoch, &[(TaskId::T1, v)].into_iter().collect(), v);
            if !u.newly_stopped.is_empty() {
                stop = Some(epoch);
                break;
            }
        }
        assert_eq!(stop, Some(65));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = StopState::new(&one(TaskId::T1), 2, 50);
        let vals = [(TaskId::T1, 1.0)].into_iter().collect();
        assert!(s.update(1, &vals, 1.0).newly_stopped.is_empty());
        assert!(s.update(2, &vals, 1.0).newly_stopped.is_empty());
        assert_eq!(s.update(3, &vals, 1.0).newly_stopped, vec![TaskId::T1]);
        assert!(s.all_tasks_stopped());
        assert!(s.finished());
    }

    #[test]
    fn no_tasks_means_global_only() {
        let s = StopState::new(&BTreeSet::new(), 35, 50);
        assert!(!s.all_tasks_stopped());
        assert!(!s.finished());
    }
}
