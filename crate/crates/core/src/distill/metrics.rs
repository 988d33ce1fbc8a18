use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::dm::StepLog;
use super::eval::EvalResult;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct Summary<'a> {
    summary: bool,
    rows: usize,
    eval_mean: Option<f64>,
    eval_std: Option<f64>,
    accuracies: &'a [f64],
    seeds: &'a [u64],
}

/// Writes one JSON object per log row, then a summary row.
pub fn export_metrics(log: &[StepLog], eval: Option<&EvalResult>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    for row in log {
        if ![row.task_loss, row.l_m, row.l_b, row.l_a, row.active_buckets].iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite metric at iteration {}", row.iter)));
        }
        writeln!(out, "{}", serde_json::to_string(row).expect("row serializes")).map_err(io)?;
    }
    let summary = Summary {
        summary: true,
        rows: log.len(),
        eval_mean: eval.map(|e| e.mean),
        eval_std: eval.map(|e| e.std),
        accuracies: eval.map_or(&[], |e| &e.accuracies),
        seeds: eval.map_or(&[], |e| &e.seeds),
    };
    writeln!(out, "{}", serde_json::to_string(&summary).expect("summary serializes")).map_err(io)?;
    out.flush().map_err(io)
}
