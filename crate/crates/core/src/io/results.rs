//! Result tables written by experiment runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the comparison table: a method's final accuracy on one
/// benchmark for one seed. Timing cells are empty unless timing was recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub protocol: String,
    pub tasks: usize,
    pub method: String,
    pub accuracy: f64,
    pub inference_us_per_sample: Option<f64>,
    pub train_seconds: Option<f64>,
    pub seed: u64,
}

/// Accuracy trajectory of one method over the task sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub dataset: String,
    pub protocol: String,
    pub method: String,
    pub seed: u64,
    pub task: usize,
    pub component_accuracy: f64,
    pub accuracy_after_task: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub dataset: String,
    pub protocol: String,
    pub method: String,
    pub seed: u64,
    pub task: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "dataset",
    "protocol",
    "tasks",
    "method",
    "accuracy",
    "inference_us_per_sample",
    "train_seconds",
    "seed",
];

/// Writes the rows in the order given; callers sort them.
pub fn write_results(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(path.as_ref(), rows, &RESULT_COLUMNS)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    read_rows(path.as_ref())
}

pub fn write_task_rows(rows: &[TaskRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        rows,
        &[
            "dataset",
            "protocol",
            "method",
            "seed",
            "task",
            "component_accuracy",
            "accuracy_after_task",
        ],
    )
}

pub fn write_epoch_rows(rows: &[EpochRow], path: impl AsRef<Path>) -> Result<()> {
    write_rows(
        path.as_ref(),
        rows,
        &[
            "dataset",
            "protocol",
            "method",
            "seed",
            "task",
            "epoch",
            "mean_loss",
            "learning_rate",
        ],
    )
}
