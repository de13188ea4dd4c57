//! Evaluation, complexity profiling, experiment drivers, report emission
//! and the command-line surface.

mod alloc;
pub mod cli;
mod experiments;
mod report;
mod table;

pub use alloc::{allocation_tracking_active, PeakScope, TrackingAllocator};
pub use experiments::{
    run_ablation, run_ratio_sweep, spearman, AblationConfig, AblationRow, AblationTable, SummaryRow, SweepConfig,
    SweepPoint, SweepResult, Trend,
};
pub use report::{emit_complexity, emit_report, ReportFiles, ResultRecord};
pub use table::{pct, Table};

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::csi_data::{dataset_digest, CsiDataset};
use crate::error::{invalid, Error, Result};
use crate::model_zoo::{build_model, predict_dataset, to_input, ModelVariant};
use crate::net_blocks::{Geometry, Tensor};
use crate::trainer::checkpoint_id;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub class_names: Vec<String>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub class_counts: Vec<usize>,
}

impl TaskEval {
    fn from_predictions(class_names: Vec<String>, truth: &[usize], pred: &[usize]) -> Self {
        let m = class_names.len();
        let mut confusion = vec![vec![0; m]; m];
        for (&y, &p) in truth.iter().zip(pred) {
            confusion[y][p] += 1;
        }
        let class_counts = confusion.iter().map(|r| r.iter().sum()).collect();
        let hits: usize = (0..m).map(|i| confusion[i][i]).sum();
        TaskEval {
            class_names,
            accuracy: hits as f64 / truth.len().max(1) as f64,
            confusion,
            class_counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub model_id: String,
    pub dataset_source: String,
    pub dataset_digest: String,
    pub samples: usize,
    pub tasks: BTreeMap<String, TaskEval>,
}

impl EvalReport {
    pub fn accuracy(&self, task: &str) -> Option<f64> {
        self.tasks.get(task).map(|t| t.accuracy)
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.tasks.values().map(|t| t.accuracy).sum::<f64>() / self.tasks.len().max(1) as f64
    }

    /// One report record per task.
    pub fn records(&self, dataset: &str, method: &str) -> Vec<ResultRecord> {
        self.tasks
            .iter()
            .map(|(t, e)| ResultRecord {
                dataset: dataset.to_string(),
                method: method.to_string(),
                task: t.clone(),
                accuracy: e.accuracy,
                checkpoint_id: self.model_id.clone(),
                dataset_digest: self.dataset_digest.clone(),
            })
            .collect()
    }
}

/// Builds an [`EvalReport`] from externally produced predictions.
pub fn evaluate_predictions(
    predictions: &BTreeMap<String, Vec<usize>>,
    ds: &CsiDataset,
    model_kind: &str,
    model_id: &str,
) -> Result<EvalReport> {
    let mut tasks = BTreeMap::new();
    for (t, p) in predictions {
        let spec = ds.meta.task(t).ok_or_else(|| Error::UnknownTask(t.clone()))?;
        let y = ds.labels_for(t)?;
        if p.len() != y.len() || p.iter().any(|&c| c >= spec.num_classes) {
            return Err(invalid(format!("predictions for {t} do not match the dataset")));
        }
        tasks.insert(t.clone(), TaskEval::from_predictions(spec.class_names.clone(), &y, p));
    }
    Ok(EvalReport {
        model_kind: model_kind.to_string(),
        model_id: model_id.to_string(),
        dataset_source: format!("{:?}", ds.meta.source).to_uppercase(),
        dataset_digest: dataset_digest(ds),
        samples: ds.len(),
        tasks,
    })
}

/// Evaluation-mode accuracy and confusion matrices for every model task.
pub fn evaluate(model: &ModelVariant, ds: &CsiDataset) -> Result<EvalReport> {
    for spec in model.tasks() {
        match ds.meta.task(&spec.name) {
            Some(t) if t.num_classes == spec.num_classes => {}
            Some(_) => return Err(invalid(format!("task {} has a different class count", spec.name))),
            None => return Err(Error::UnknownTask(spec.name.clone())),
        }
    }
    let g = model.geometry;
    if ds.meta.shape() != [g.links, g.subcarriers, g.packets] {
        return Err(Error::GeometryMismatch(format!(
            "dataset is {:?}, model expects {g}",
            ds.meta.shape()
        )));
    }
    let preds = predict_dataset(model, ds, 32)?;
    evaluate_predictions(&preds, ds, model.kind.as_str(), &checkpoint_id(model)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub crate_version: String,
    pub optimized: bool,
}

pub fn environment() -> Environment {
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|v| v.trim().to_string())
    });
    Environment {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        cpu_model,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        optimized: !cfg!(debug_assertions),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model_kind: String,
    pub tasks: Vec<String>,
    /// `[links, subcarriers, packets]` of the profiled input.
    pub input_shape: [usize; 3],
    pub batch: usize,
    /// Inference parameters: encoders, adaptors and classifiers.
    pub parameters: usize,
    pub multiadds: u64,
    /// Peak heap growth during one labeling pass; `None` unless the
    /// tracking allocator is installed.
    pub peak_memory_bytes: Option<u64>,
    pub latency_ms_median: f64,
    pub latency_runs: usize,
    pub environment: Environment,
}

/// Analytic counts plus measured memory and latency of one evaluation-mode
/// labeling pass over `batch` inputs of `subcarriers × packets`.
pub fn profile(model: &ModelVariant, input_shape: (usize, usize), batch: usize, runs: usize) -> Result<ComplexityReport> {
    let (s, p) = input_shape;
    if batch == 0 {
        return Err(invalid("batch must be >= 1"));
    }
    let g = model.geometry;
    if s != g.subcarriers {
        return Err(Error::GeometryMismatch(format!(
            "model has {} subcarriers, input shape asks for {s}",
            g.subcarriers
        )));
    }
    let multiadds = model.multiadds_at(p, batch)?;
    let geometry = Geometry::new(g.links, s, p);
    // counts never depend on values, so another length only needs a rebuild
    let rebuilt;
    let runner = if p == g.packets {
        model
    } else {
        let specs: Vec<_> = model.tasks().into_iter().cloned().collect();
        rebuilt = build_model(model.kind, geometry, &specs, model.seed)?;
        &rebuilt
    };
    let x = Tensor::from_vec(
        [batch, geometry.input_channels(), p],
        (0..batch * geometry.input_channels() * p)
            .map(|i| ((i * 2654435761) % 1000) as f32 / 1000.0)
            .collect(),
    );
    runner.forward_eval(&x, false)?;
    let peak = {
        let scope = PeakScope::start();
        runner.forward_eval(&x, false)?;
        scope.peak_bytes()
    };
    let runs = runs.max(20);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(runner.forward_eval(&x, false)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median = if runs % 2 == 1 {
        times[runs / 2]
    } else {
        0.5 * (times[runs / 2 - 1] + times[runs / 2])
    };
    Ok(ComplexityReport {
        model_kind: model.kind.as_str().into(),
        tasks: model.task_names(),
        input_shape: [g.links, s, p],
        batch,
        parameters: model.inference_parameters(),
        multiadds,
        peak_memory_bytes: peak,
        latency_ms_median: median,
        latency_runs: runs,
        environment: environment(),
    })
}

/// Packs a dataset into one input tensor (all samples).
pub fn dataset_input(ds: &CsiDataset) -> Result<Tensor> {
    to_input(&ds.samples.iter().collect::<Vec<_>>())
}
