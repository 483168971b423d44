use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Disjoint label spaces, no task identity at test time.
    ClassIncremental,
    /// Random shards sharing the full label space.
    DataIncremental,
    /// Disjoint label spaces, predictions restricted to the task's classes.
    TaskIncremental,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::ClassIncremental => "class_incremental",
            Protocol::DataIncremental => "data_incremental",
            Protocol::TaskIncremental => "task_incremental",
        }
    }

    /// Default target value of the rescaled square loss for this protocol.
    pub fn default_beta(self) -> f64 {
        match self {
            Protocol::ClassIncremental | Protocol::TaskIncremental => 25.0,
            Protocol::DataIncremental => 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub data: Dataset,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub protocol: Protocol,
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub split_seed: u64,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Seeded class permutation chunked into `num_tasks` near-equal groups.
fn class_groups(num_classes: usize, num_tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 {
        return Err(Error::config("num_tasks", "must be at least 1"));
    }
    if num_tasks > num_classes {
        return Err(Error::config(
            "num_tasks",
            format!("{num_tasks} tasks cannot split {num_classes} classes into non-empty groups"),
        ));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(near_equal_chunks(&classes, num_tasks)
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            g
        })
        .collect())
}

fn near_equal_chunks<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

fn split_by_classes(
    d: &Dataset,
    num_tasks: usize,
    seed: u64,
    protocol: Protocol,
) -> Result<TaskSequence> {
    let groups = class_groups(d.num_classes(), num_tasks, seed)?;
    let tasks = groups
        .into_iter()
        .map(|classes| Task {
            data: d.filter_classes(&classes),
            classes,
        })
        .collect();
    Ok(TaskSequence {
        protocol,
        tasks,
        num_classes: d.num_classes(),
        split_seed: seed,
    })
}

/// Shuffles the classes with `seed` and routes samples to tasks by label.
pub fn split_class_incremental(d: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    split_by_classes(d, num_tasks, seed, Protocol::ClassIncremental)
}

/// Same partition as [`split_class_incremental`], evaluated with task identity.
pub fn split_task_incremental(d: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    split_by_classes(d, num_tasks, seed, Protocol::TaskIncremental)
}

/// Seeded permutation of the samples cut into shards whose sizes differ by at most one.
pub fn split_data_incremental(d: &Dataset, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::config("num_tasks", "must be at least 1"));
    }
    if d.len() < num_tasks {
        return Err(Error::Data(format!(
            "{} samples cannot fill {num_tasks} non-empty shards",
            d.len()
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let all: Vec<usize> = (0..d.num_classes()).collect();
    let tasks = near_equal_chunks(&order, num_tasks)
        .into_iter()
        .map(|idx| Task {
            data: d.subset(&idx),
            classes: all.clone(),
        })
        .collect();
    Ok(TaskSequence {
        protocol: Protocol::DataIncremental,
        tasks,
        num_classes: d.num_classes(),
        split_seed: seed,
    })
}

pub fn split(d: &Dataset, protocol: Protocol, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    match protocol {
        Protocol::ClassIncremental => split_class_incremental(d, num_tasks, seed),
        Protocol::DataIncremental => split_data_incremental(d, num_tasks, seed),
        Protocol::TaskIncremental => split_task_incremental(d, num_tasks, seed),
    }
}

/// Train and test sequences split with the same seed. Class groups depend
/// only on the class count and the seed, so task `t` covers the same
/// classes in both.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub train: TaskSequence,
    pub test: TaskSequence,
}

impl Benchmark {
    pub fn new(
        name: impl Into<String>,
        train: &Dataset,
        test: &Dataset,
        protocol: Protocol,
        num_tasks: usize,
        seed: u64,
    ) -> Result<Self> {
        if train.num_classes() != test.num_classes() || train.dim() != test.dim() {
            return Err(Error::Data(
                "train and test sets have different shapes".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            train: split(train, protocol, num_tasks, seed)?,
            test: split(test, protocol, num_tasks, seed)?,
        })
    }

    pub fn protocol(&self) -> Protocol {
        self.train.protocol
    }

    pub fn num_tasks(&self) -> usize {
        self.train.len()
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }
}
