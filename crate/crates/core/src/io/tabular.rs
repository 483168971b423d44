//! Labelled feature tables in CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};

fn default_label_column() -> String {
    "label".into()
}

/// How to read a feature table: every column except `label_column` is a
/// numeric feature; labels are integers in `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Inferred as the largest label plus one when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub standardize: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: default_label_column(),
            num_classes: None,
            standardize: false,
        }
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn read_raw(path: &Path, schema: &CsvSchema) -> Result<(usize, Vec<f64>, Vec<usize>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(|e| data_err(path, e))?.clone();
    if headers.is_empty() {
        return Err(data_err(path, "empty file"));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| data_err(path, format!("no column named {:?}", schema.label_column)))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(data_err(path, "no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| data_err(path, format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(data_err(
                path,
                format!(
                    "line {line}: {} cells, header has {}",
                    record.len(),
                    headers.len()
                ),
            ));
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                let label: usize = cell.parse().map_err(|_| {
                    data_err(
                        path,
                        format!("line {line}: label {cell:?} is not a class index"),
                    )
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    data_err(
                        path,
                        format!(
                            "line {line}, column {}: {cell:?} is not a number",
                            headers[i].to_owned()
                        ),
                    )
                })?;
                if !v.is_finite() {
                    return Err(data_err(path, format!("line {line}: non-finite value")));
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(data_err(path, "no data rows"));
    }
    Ok((dim, features, labels))
}

fn build(path: &Path, schema: &CsvSchema, raw: (usize, Vec<f64>, Vec<usize>)) -> Result<Dataset> {
    let (dim, features, labels) = raw;
    let max = labels.iter().copied().max().unwrap_or(0);
    let classes = schema.num_classes.unwrap_or(max + 1);
    if max >= classes {
        return Err(data_err(path, format!("label {max} outside 0..{classes}")));
    }
    Dataset::new(dim, classes, features, labels)
}

/// Reads one table. With `standardize` set, columns are standardized using
/// this table's own statistics.
pub fn load_csv_dataset(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let d = build(path, schema, read_raw(path, schema)?)?;
    if schema.standardize {
        Standardizer::fit(&d)?.apply(&d)
    } else {
        Ok(d)
    }
}

/// Reads a train and a test table. Standardization statistics come from the
/// training table only.
pub fn load_csv_split(
    train: impl AsRef<Path>,
    test: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<(Dataset, Dataset)> {
    let raw = CsvSchema {
        standardize: false,
        ..schema.clone()
    };
    let tr = build(train.as_ref(), schema, read_raw(train.as_ref(), &raw)?)?;
    let te_raw = read_raw(test.as_ref(), &raw)?;
    let pinned = CsvSchema {
        num_classes: Some(schema.num_classes.unwrap_or(tr.num_classes())),
        ..raw
    };
    let te = build(test.as_ref(), &pinned, te_raw)?;
    if te.dim() != tr.dim() {
        return Err(Error::Data(format!(
            "train table has {} features, test table {}",
            tr.dim(),
            te.dim()
        )));
    }
    if schema.standardize {
        let s = Standardizer::fit(&tr)?;
        Ok((s.apply(&tr)?, s.apply(&te)?))
    } else {
        Ok((tr, te))
    }
}
