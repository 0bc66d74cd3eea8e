use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetId;
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, CLASS_ORDER, FEW_SHOT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub seed: u64,
    pub per_task_cap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<u32>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub per_task_cap: Option<usize>,
}

impl TaskSpec {
    /// Position of an original class label within this task.
    pub fn local_label(&self, class: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// An ordered sequence of class-disjoint tasks; serializes to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub dataset_id: DatasetId,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.class_ids.len())
    }

    /// Checks the partition invariants against label arrays.
    pub fn validate(&self, train_labels: &[u32], test_labels: &[u32]) -> Result<()> {
        let cpt = self.classes_per_task();
        let mut seen = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_id != i || t.class_ids.len() != cpt || cpt == 0 {
                return Err(Error::Config(format!("task {i} is malformed")));
            }
            if t.per_task_cap.is_some_and(|cap| t.train_ids.len() > cap) {
                return Err(Error::Config(format!("task {i} exceeds its cap")));
            }
            for &c in &t.class_ids {
                if seen.contains(&c) {
                    return Err(Error::Config(format!("class {c} appears in two tasks")));
                }
                seen.push(c);
            }
            for (ids, labels) in [(&t.train_ids, train_labels), (&t.test_ids, test_labels)] {
                for &j in ids {
                    let l = labels.get(j).ok_or_else(|| Error::OutOfRange(format!("example {j}")))?;
                    if !t.class_ids.contains(l) {
                        return Err(Error::Config(format!("example {j} is not in task {i}")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn members(labels: &[u32], classes: &[u32]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| classes.contains(l)).map(|(i, _)| i).collect()
}

/// Splits a labeled corpus into `num_tasks` tasks by chunking a seeded
/// permutation of its classes. A cap keeps the sorted prefix of a seeded
/// shuffle of each task's training examples, so smaller caps select subsets
/// of larger ones.
pub fn build_split_stream(
    dataset_id: DatasetId,
    num_classes: usize,
    train_labels: &[u32],
    test_labels: &[u32],
    spec: &SplitSpec,
) -> Result<TaskStream> {
    if let Some(n) = dataset_id.num_classes() {
        if n != num_classes {
            return Err(Error::Config(format!("{dataset_id} has {n} classes, corpus has {num_classes}")));
        }
    }
    let requested = spec.num_tasks * spec.classes_per_task;
    if requested > num_classes {
        return Err(Error::ClassBudget { requested, available: num_classes });
    }
    if requested == 0 {
        return Err(Error::Config("stream needs at least one task and class".into()));
    }
    let mut order: Vec<u32> = (0..num_classes as u32).collect();
    order.shuffle(&mut keyed_rng(spec.seed, &[CLASS_ORDER]));
    let tasks = order[..requested]
        .chunks(spec.classes_per_task)
        .enumerate()
        .map(|(task_id, chunk)| {
            let class_ids = chunk.to_vec();
            let mut train_ids = members(train_labels, &class_ids);
            if let Some(cap) = spec.per_task_cap {
                train_ids.shuffle(&mut keyed_rng(spec.seed, &[FEW_SHOT, task_id as u64]));
                train_ids.truncate(cap);
                train_ids.sort_unstable();
            }
            TaskSpec { task_id, test_ids: members(test_labels, &class_ids), class_ids, train_ids, per_task_cap: spec.per_task_cap }
        })
        .collect();
    Ok(TaskStream { dataset_id, seed: spec.seed, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: u32, per: usize) -> Vec<u32> {
        (0..classes as usize * per).map(|i| (i % classes as usize) as u32).collect()
    }

    #[test]
    fn cifar10_covers_every_class_once() {
        let tr = labels(10, 50);
        let spec = SplitSpec { num_tasks: 5, classes_per_task: 2, seed: 0, per_task_cap: None };
        let s = build_split_stream(DatasetId::Cifar10, 10, &tr, &tr, &spec).unwrap();
        let mut all: Vec<u32> = s.tasks.iter().flat_map(|t| t.class_ids.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        s.validate(&tr, &tr).unwrap();
        assert!(s.tasks.iter().all(|t| t.train_ids.len() == 100));
    }

    #[test]
    fn capped_tasks_have_exact_size() {
        let tr = labels(100, 30);
        let spec = SplitSpec { num_tasks: 20, classes_per_task: 5, seed: 0, per_task_cap: Some(100) };
        let s = build_split_stream(DatasetId::Cifar100, 100, &tr, &tr, &spec).unwrap();
        assert_eq!(s.num_tasks(), 20);
        assert!(s.tasks.iter().all(|t| t.train_ids.len() == 100));
    }

    #[test]
    fn budget_is_enforced() {
        let tr = labels(10, 1);
        let spec = SplitSpec { num_tasks: 6, classes_per_task: 2, seed: 0, per_task_cap: None };
        assert_eq!(build_split_stream(DatasetId::Cifar10, 10, &tr, &tr, &spec), Err(Error::ClassBudget { requested: 12, available: 10 }));
    }
}
