use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::table::{pct, Table};
use super::ComplexityReport;
use crate::error::{invalid, Result};

pub const REPORT_VERSION: u32 = 1;

/// One accuracy figure with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub method: String,
    pub task: String,
    pub accuracy: f64,
    pub checkpoint_id: String,
    pub dataset_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

const METHOD_ORDER: [&str; 7] = ["STS", "NMTS", "UMTS", "KDMTS", "KDMTS_RA", "WIMUSE", "EXTENDED"];
const TASK_ORDER: [&str; 3] = ["GR", "IL", "UI"];

fn rank(order: &[&str], s: &str) -> (usize, String) {
    let base = s.split(['-', ' ']).next().unwrap_or(s).to_ascii_uppercase();
    (order.iter().position(|o| *o == base).unwrap_or(order.len()), s.to_string())
}

fn ordered<'a>(items: impl Iterator<Item = &'a str>, order: &[&str]) -> Vec<String> {
    let set: BTreeSet<(usize, String)> = items.map(|s| rank(order, s)).collect();
    set.into_iter().map(|(_, s)| s).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn provenance(t: &mut Table, recs: &[&ResultRecord]) {
    let ck: BTreeSet<&str> = recs.iter().map(|r| r.checkpoint_id.as_str()).collect();
    let ds: BTreeSet<&str> = recs.iter().map(|r| r.dataset_digest.as_str()).collect();
    t.meta("report_version", REPORT_VERSION.to_string());
    t.meta("checkpoints", ck.into_iter().collect::<Vec<_>>().join(";"));
    t.meta("dataset_digests", ds.into_iter().collect::<Vec<_>>().join(";"));
}

/// Methods × tasks grid (plus Average) for one dataset, averaging repeated
/// records of the same cell.
pub fn dataset_grid(records: &[ResultRecord], dataset: &str) -> Table {
    let recs: Vec<&ResultRecord> = records.iter().filter(|r| r.dataset == dataset).collect();
    let methods = ordered(recs.iter().map(|r| r.method.as_str()), &METHOD_ORDER);
    let tasks = ordered(recs.iter().map(|r| r.task.as_str()), &TASK_ORDER);
    let mut headers = vec!["method"];
    headers.extend(tasks.iter().map(String::as_str));
    headers.push("Average");
    let mut t = Table::new(format!("{dataset}: test accuracy (%)"), &headers);
    provenance(&mut t, &recs);
    for m in &methods {
        let mut row = vec![m.clone()];
        let mut cells = Vec::new();
        for task in &tasks {
            let xs: Vec<f64> = recs
                .iter()
                .filter(|r| &r.method == m && &r.task == task)
                .map(|r| r.accuracy)
                .collect();
            if xs.is_empty() {
                row.push("-".into());
            } else {
                cells.push(mean(&xs));
                row.push(pct(mean(&xs)));
            }
        }
        row.push(if cells.is_empty() { "-".into() } else { pct(mean(&cells)) });
        t.push(row);
    }
    t
}

/// Candidate cross-dataset aggregations of one method's accuracies.
pub fn headline_averages(records: &[ResultRecord], method: &str) -> Table {
    let recs: Vec<&ResultRecord> = records.iter().filter(|r| r.method.eq_ignore_ascii_case(method)).collect();
    let mut t = Table::new(
        format!("{method}: cross-dataset averages (%)"),
        &["aggregation", "scope", "value", "status"],
    );
    provenance(&mut t, &recs);
    t.meta(
        "note",
        "candidate aggregations disagree in general; only the per-task mean over datasets is primary",
    );
    let mut cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &recs {
        cell.entry((r.dataset.clone(), r.task.clone())).or_default().push(r.accuracy);
    }
    let cell: BTreeMap<(String, String), f64> = cell.into_iter().map(|(k, v)| (k, mean(&v))).collect();
    let tasks = ordered(recs.iter().map(|r| r.task.as_str()), &TASK_ORDER);
    let datasets: Vec<String> = recs.iter().map(|r| r.dataset.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    for task in &tasks {
        let xs: Vec<f64> = cell.iter().filter(|((_, t), _)| t == task).map(|(_, v)| *v).collect();
        t.push(vec!["per_task_mean_over_datasets".into(), task.clone(), pct(mean(&xs)), "primary".into()]);
    }
    for d in &datasets {
        let xs: Vec<f64> = cell.iter().filter(|((ds, _), _)| ds == d).map(|(_, v)| *v).collect();
        t.push(vec!["per_dataset_mean_over_tasks".into(), d.clone(), pct(mean(&xs)), "candidate".into()]);
    }
    let dataset_means: Vec<f64> = datasets
        .iter()
        .map(|d| mean(&cell.iter().filter(|((ds, _), _)| ds == d).map(|(_, v)| *v).collect::<Vec<_>>()))
        .collect();
    if !dataset_means.is_empty() {
        t.push(vec!["mean_of_dataset_means".into(), "all".into(), pct(mean(&dataset_means)), "candidate".into()]);
        let all: Vec<f64> = cell.values().copied().collect();
        t.push(vec!["mean_over_all_cells".into(), "all".into(), pct(mean(&all)), "candidate".into()]);
    }
    t
}

fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Writes `results`, one grid per dataset and the headline averages, each
/// as CSV and text. Output depends only on the records.
pub fn emit_report(records: &[ResultRecord], dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(invalid("no results to report"));
    }
    let mut recs = records.to_vec();
    recs.sort_by(|a, b| {
        (&a.dataset, rank(&METHOD_ORDER, &a.method), rank(&TASK_ORDER, &a.task), &a.checkpoint_id)
            .cmp(&(&b.dataset, rank(&METHOD_ORDER, &b.method), rank(&TASK_ORDER, &b.task), &b.checkpoint_id))
            .then(a.accuracy.total_cmp(&b.accuracy))
    });
    let mut files = Vec::new();
    let mut long = Table::new(
        "all results",
        &["dataset", "method", "task", "accuracy", "checkpoint_id", "dataset_digest"],
    );
    long.meta("report_version", REPORT_VERSION.to_string());
    for r in &recs {
        long.push(vec![
            r.dataset.clone(),
            r.method.clone(),
            r.task.clone(),
            format!("{:.6}", r.accuracy),
            r.checkpoint_id.clone(),
            r.dataset_digest.clone(),
        ]);
    }
    files.extend(long.write(dir, "results")?);
    let datasets: BTreeSet<&str> = recs.iter().map(|r| r.dataset.as_str()).collect();
    for d in datasets {
        files.extend(dataset_grid(&recs, d).write(dir, &format!("table_{}", file_stem(d)))?);
    }
    if recs.iter().any(|r| r.method.eq_ignore_ascii_case("WIMUSE")) {
        files.extend(headline_averages(&recs, "WIMUSE").write(dir, "headline_averages")?);
    }
    Ok(ReportFiles { files })
}

/// Complexity comparison, one row per profiled model.
pub fn emit_complexity(reports: &[ComplexityReport], dir: &Path) -> Result<ReportFiles> {
    let first = reports.first().ok_or_else(|| invalid("no profiles to report"))?;
    let mut t = Table::new(
        "model complexity",
        &["method", "tasks", "input", "batch", "params", "multiadds_M", "peak_memory_MB", "latency_ms"],
    );
    let env = &first.environment;
    t.meta("report_version", REPORT_VERSION.to_string());
    t.meta(
        "environment",
        format!(
            "{} {} cpus={} cpu={} optimized={}",
            env.os,
            env.arch,
            env.logical_cpus,
            env.cpu_model.as_deref().unwrap_or("unknown"),
            env.optimized
        ),
    );
    for r in reports {
        t.push(vec![
            r.model_kind.clone(),
            r.tasks.join("+"),
            format!("{}x{}x{}", r.input_shape[0], r.input_shape[1], r.input_shape[2]),
            r.batch.to_string(),
            r.parameters.to_string(),
            format!("{:.2}", r.multiadds as f64 / 1e6),
            r.peak_memory_bytes.map_or("n/a".into(), |b| format!("{:.2}", b as f64 / 1e6)),
            format!("{:.2}", r.latency_ms_median),
        ]);
    }
    Ok(ReportFiles {
        files: t.write(dir, "complexity")?,
    })
}
