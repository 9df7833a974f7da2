//! CSV emission of the per-batch metric history and evaluation curve.

use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::{BatchRecord, EvalPoint};

/// Column order of `metrics.csv`.
pub const METRIC_COLUMNS: [&str; 10] = [
    "epoch",
    "batch",
    "tau_tilde",
    "lambda",
    "loss_cls",
    "loss_adv",
    "loss_gen",
    "loss_kd",
    "teacher_entropy",
    "student_lr",
];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::input(format!("{}: {e}", path.display()))
}

fn write_rows<T: serde::Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the header and one row per record; undefined losses are empty cells.
pub fn write_metrics_csv(path: &Path, records: &[BatchRecord]) -> Result<()> {
    write_rows(path, &METRIC_COLUMNS, records)
}

pub fn write_evals_csv(path: &Path, evals: &[EvalPoint]) -> Result<()> {
    write_rows(path, &["epoch", "pgd_t"], evals)
}

/// A numeric CSV table; empty cells read as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let columns: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        Error::input(format!("{}: row {}: '{cell}' is not a number", path.display(), i + 2))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { columns, rows })
}
