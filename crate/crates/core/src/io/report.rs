//! Long-format CSV tables for reports and diagnostics.

use std::path::Path;

use serde::Serialize;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::harness::{AblationTable, DiscrepancyCurve};
use crate::merging::MergeReport;

fn to_csv<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

#[derive(Serialize)]
struct IterationRow<'a> {
    iteration: usize,
    site: usize,
    label: &'a str,
    objective: f64,
    objective_recaptured: f64,
    max_relative_change: Option<f64>,
}

/// One row per (iteration, site).
pub fn iterations_csv(report: &MergeReport) -> Result<Vec<u8>> {
    to_csv(report.iterations.iter().flat_map(|it| {
        report.sites.iter().enumerate().map(move |(j, label)| IterationRow {
            iteration: it.iteration,
            site: j,
            label,
            objective: it.objective[j],
            objective_recaptured: it.objective_recaptured[j],
            max_relative_change: it.max_relative_change,
        })
    }))
}

#[derive(Serialize)]
struct SiteTaskRow<'a> {
    task: usize,
    site: usize,
    label: &'a str,
    value: f64,
}

/// One row per (task, site) of a `[task][site]` table.
fn site_task_csv(labels: &[String], values: impl Fn(usize, usize) -> f64, tasks: usize) -> Result<Vec<u8>> {
    to_csv((0..tasks).flat_map(|n| {
        let values = &values;
        labels.iter().enumerate().map(move |(j, label)| SiteTaskRow {
            task: n,
            site: j,
            label,
            value: values(n, j),
        })
    }))
}

pub fn discrepancy_csv(curve: &DiscrepancyCurve) -> Result<Vec<u8>> {
    site_task_csv(&curve.sites, |n, j| curve.values[n][j], curve.values.len())
}

/// Balance shares (`[site][task]`); empty for a single task.
pub fn balance_csv(sites: &[String], shares: Option<&[Vec<f64>]>) -> Result<Vec<u8>> {
    match shares {
        Some(shares) => {
            let tasks = shares.first().map_or(0, Vec::len);
            site_task_csv(sites, |n, j| shares[j][n], tasks)
        }
        None => to_csv(std::iter::empty::<SiteTaskRow>()),
    }
}

#[derive(Serialize)]
struct AblationRow {
    value: f64,
    status: &'static str,
    mean_alignment_error: Option<f64>,
    mean_output_error: Option<f64>,
    objective: Option<f64>,
    first_objective: Option<f64>,
    converged_at: Option<usize>,
    error: Option<String>,
}

pub fn ablation_csv(table: &AblationTable) -> Result<Vec<u8>> {
    to_csv(table.points.iter().map(|p| {
        let s = p.score.as_ref();
        AblationRow {
            value: p.value,
            status: if s.is_some() { "ok" } else { "failed" },
            mean_alignment_error: s.map(|s| s.heldout.mean_alignment_error()),
            mean_output_error: s.map(|s| {
                s.heldout.output_error.iter().sum::<f64>() / s.heldout.output_error.len() as f64
            }),
            objective: s.map(|s| s.objective),
            first_objective: s.map(|s| s.first_objective),
            converged_at: s.and_then(|s| s.converged_at),
            error: p.error.clone(),
        }
    }))
}

pub fn write_csv(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
