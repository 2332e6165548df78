//! Metrics persistence: per-iteration loss curves as CSV (consumed by the
//! ablation aggregator and the acceptance suite) and the ablation comparison
//! table.
//!
//! Floats are written in Rust's shortest round-trip form, so files are
//! bit-identical across identical runs and parse back exactly.

use crate::error::{Error, Result};
use crate::train::IterRow;
use std::fmt::Write as _;
use std::path::Path;

/// Serializes training rows: `iteration,loss_guidance,loss_class,loss_total`
/// plus one `kl_<j>` column per insertion point.
pub fn metrics_to_csv(rows: &[IterRow], gt_modules: usize) -> String {
    let mut out = String::new();
    out.push_str("iteration,loss_guidance,loss_class,loss_total");
    for j in 0..gt_modules {
        let _ = write!(out, ",kl_{j}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{},{},{},{}", row.iteration, row.guidance, row.class_loss, row.total);
        for v in &row.per_module {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[IterRow], gt_modules: usize) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows, gt_modules))?;
    Ok(())
}

/// Parses a metrics CSV produced by [`write_metrics_csv`], validating the
/// header and row homogeneity.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<IterRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::corrupt(path, format!("cannot read metrics: {e}")))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::corrupt(path, "empty metrics file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4
        || cols[..4] != ["iteration", "loss_guidance", "loss_class", "loss_total"]
        || !cols[4..].iter().enumerate().all(|(j, c)| *c == format!("kl_{j}"))
    {
        return Err(Error::corrupt(path, format!("unexpected header '{header}'")));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::corrupt(
                path,
                format!("row {} has {} fields, header has {}", lineno + 2, fields.len(), cols.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::corrupt(path, format!("bad number '{s}' on row {}", lineno + 2)))
        };
        rows.push(IterRow {
            iteration: fields[0]
                .parse()
                .map_err(|_| Error::corrupt(path, format!("bad iteration on row {}", lineno + 2)))?,
            guidance: parse(fields[1])?,
            class_loss: parse(fields[2])?,
            total: parse(fields[3])?,
            per_module: fields[4..].iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(rows)
}

/// One row of the ablation comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub accuracies: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

/// Serializes the comparison table: `ablation,seed_<s>...,mean`.
pub fn ablation_to_csv(rows: &[AblationRow], seeds: &[u64]) -> String {
    let mut out = String::from("ablation");
    for s in seeds {
        let _ = write!(out, ",seed_{s}");
    }
    out.push_str(",mean\n");
    for row in rows {
        out.push_str(&row.name);
        for v in &row.accuracies {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{}", row.mean());
        out.push('\n');
    }
    out
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::corrupt(path, format!("cannot read table: {e}")))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::corrupt(path, "empty table"))?;
    let ncols = header.split(',').count();
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::corrupt(path, format!("ragged row '{line}'")));
        }
        let accuracies = fields[1..fields.len() - 1]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::corrupt(path, format!("bad accuracy '{s}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(AblationRow {
            name: fields[0].to_string(),
            accuracies,
        });
    }
    Ok(rows)
}
