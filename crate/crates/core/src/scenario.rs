//! Class-incremental task sequences.
//!
//! A scenario partitions the classes of a dataset into an ordered list of
//! tasks with pairwise disjoint label sets: an optional base task of
//! `base_size` classes, then tasks of `increment` classes each. When the
//! remaining class count is not a multiple of `increment`, the final task
//! holds the leftover classes and is therefore smaller.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::linalg::SeededRng;
use crate::{Error, Result};

/// Sorted, duplicate-free set of class ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassSet(Vec<u32>);

impl ClassSet {
    pub fn new(classes: impl IntoIterator<Item = u32>) -> Self {
        let mut v: Vec<u32> = classes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn contains(&self, class: u32) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn max(&self) -> Option<u32> {
        self.0.last().copied()
    }

    pub fn union(&self, other: &ClassSet) -> ClassSet {
        ClassSet::new(self.iter().chain(other.iter()))
    }

    pub fn is_disjoint(&self, other: &ClassSet) -> bool {
        !self.iter().any(|c| other.contains(c))
    }
}

impl FromIterator<u32> for ClassSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        ClassSet::new(iter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub task_index: usize,
    pub class_ids: ClassSet,
    /// Row indices into the training dataset, ascending.
    pub train_rows: Vec<usize>,
    /// Row indices into the test dataset, ascending.
    pub test_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub class_order: Vec<u32>,
    pub base_size: usize,
    pub increment: usize,
    pub num_classes: u32,
    pub tasks: Vec<TaskSplit>,
}

/// Sizes of consecutive tasks for `num_classes` classes.
pub fn task_sizes(num_classes: usize, base_size: usize, increment: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut assigned = 0;
    if base_size > 0 {
        sizes.push(base_size);
        assigned = base_size;
    }
    while assigned < num_classes {
        let n = increment.min(num_classes - assigned);
        sizes.push(n);
        assigned += n;
    }
    sizes
}

/// Splits `train`/`test` into a Base-`base_size`, Inc-`increment` task sequence.
///
/// Class order is ascending label order unless `class_order_seed` is given,
/// in which case it is a seeded shuffle of the labels.
pub fn build_scenario(
    train: &LabeledDataset,
    test: &LabeledDataset,
    base_size: usize,
    increment: usize,
    class_order_seed: Option<u64>,
) -> Result<Scenario> {
    let num_classes = train.num_classes();
    if increment == 0 {
        return Err(Error::Config("increment must be at least 1".into()));
    }
    if base_size + increment > num_classes as usize {
        return Err(Error::Config(format!(
            "base {base_size} + increment {increment} exceeds {num_classes} classes"
        )));
    }
    if test.num_classes() != num_classes {
        return Err(Error::Consistency(format!(
            "train has {num_classes} classes, test has {}",
            test.num_classes()
        )));
    }

    let mut class_order: Vec<u32> = (0..num_classes).collect();
    if let Some(seed) = class_order_seed {
        SeededRng::new(seed).shuffle_in_place(&mut class_order);
    }

    let mut tasks = Vec::new();
    let mut offset = 0;
    for (task_index, size) in task_sizes(num_classes as usize, base_size, increment)
        .into_iter()
        .enumerate()
    {
        let class_ids = ClassSet::new(class_order[offset..offset + size].iter().copied());
        offset += size;
        tasks.push(TaskSplit {
            task_index,
            train_rows: rows_with_labels(train.labels(), &class_ids),
            test_rows: rows_with_labels(test.labels(), &class_ids),
            class_ids,
        });
    }

    Ok(Scenario {
        class_order,
        base_size,
        increment,
        num_classes,
        tasks,
    })
}

fn rows_with_labels(labels: &[u32], classes: &ClassSet) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| classes.contains(l))
        .map(|(i, _)| i)
        .collect()
}

impl Scenario {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Union of the class sets of tasks `0..=through_task`.
    pub fn seen_classes(&self, through_task: usize) -> Result<ClassSet> {
        if through_task >= self.tasks.len() {
            return Err(Error::OutOfRange {
                index: through_task,
                len: self.tasks.len(),
            });
        }
        Ok(self.tasks[..=through_task]
            .iter()
            .flat_map(|t| t.class_ids.iter())
            .collect())
    }

    /// Test rows of every class seen through `through_task`, ascending.
    pub fn seen_test_rows(&self, through_task: usize) -> Result<Vec<usize>> {
        if through_task >= self.tasks.len() {
            return Err(Error::OutOfRange {
                index: through_task,
                len: self.tasks.len(),
            });
        }
        let mut rows: Vec<usize> = self.tasks[..=through_task]
            .iter()
            .flat_map(|t| t.test_rows.iter().copied())
            .collect();
        rows.sort_unstable();
        Ok(rows)
    }
}
