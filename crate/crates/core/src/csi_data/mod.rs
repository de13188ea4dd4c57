//! CSI amplitude samples and datasets.
//!
//! A [`CsiDataset`] is a manifest ([`DatasetMeta`]) plus an ordered list of
//! [`CsiSample`]s that all share the manifest geometry `links × subcarriers ×
//! packets`. Amplitudes are stored as `f32` in row-major (link, subcarrier,
//! time) order, which is also the network input order: flattening the first
//! two axes gives `L·S` input channels grouped by link.

mod format;
mod import;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use format::{
    dataset_digest, decode_sample_blob, encode_sample_blob, load_dataset, write_dataset,
    DatasetManifest, SampleEntry, FORMAT_VERSION, SAMPLE_MAGIC,
};
pub use import::{import_dataset, source_tasks, ImportLayout, ImportOptions, DEFAULT_WIDAR_PACKETS};
pub use split::{split_dataset, stratify_mode, StratifyMode};
pub use synth::{synth_cir, synth_dataset, PathModulation, PathParams, SynthConfig};

/// Gesture recognition.
pub const GR: &str = "GR";
/// Indoor localization.
pub const IL: &str = "IL";
/// User identification.
pub const UI: &str = "UI";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let spec = TaskSpec {
            name: name.into(),
            num_classes: class_names.len(),
            class_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A task whose classes are named `"<prefix>0" .. "<prefix>{n-1}"`.
    pub fn numbered(name: impl Into<String>, prefix: &str, n: usize) -> Result<Self> {
        Self::new(name, (0..n).map(|i| format!("{prefix}{i}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(invalid("task name must not be empty"));
        }
        if self.num_classes < 2 {
            return Err(invalid(format!(
                "task {} needs at least 2 classes, got {}",
                self.name, self.num_classes
            )));
        }
        if self.class_names.len() != self.num_classes {
            return Err(invalid(format!(
                "task {}: {} class names for {} classes",
                self.name,
                self.class_names.len(),
                self.num_classes
            )));
        }
        let distinct: BTreeSet<&String> = self.class_names.iter().collect();
        if distinct.len() != self.class_names.len() {
            return Err(invalid(format!("task {}: duplicate class names", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DataSource {
    Aril,
    Csida,
    Widar3,
    Synth,
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ARIL" => Ok(DataSource::Aril),
            "CSIDA" => Ok(DataSource::Csida),
            "WIDAR3" | "WIDAR3.0" => Ok(DataSource::Widar3),
            "SYNTH" => Ok(DataSource::Synth),
            other => Err(invalid(format!("unknown data source `{other}`"))),
        }
    }
}

/// Dataset geometry and task vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub tasks: Vec<TaskSpec>,
    pub links: usize,
    pub subcarriers: usize,
    pub packets: usize,
    pub sampling_rate_hz: Option<f64>,
    pub duration_s: Option<f64>,
    pub source: DataSource,
}

impl DatasetMeta {
    pub fn shape(&self) -> [usize; 3] {
        [self.links, self.subcarriers, self.packets]
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.links == 0 || self.subcarriers == 0 || self.packets == 0 {
            return Err(invalid(format!(
                "geometry must be positive, got {}x{}x{}",
                self.links, self.subcarriers, self.packets
            )));
        }
        if self.tasks.is_empty() {
            return Err(invalid("dataset declares no tasks"));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !names.insert(t.name.as_str()) {
                return Err(Error::DuplicateTask(t.name.clone()));
            }
        }
        if let (Some(rate), Some(dur)) = (self.sampling_rate_hz, self.duration_s) {
            let expected = (rate * dur).round();
            if !(expected.is_finite() && expected as usize == self.packets) {
                return Err(Error::GeometryMismatch(format!(
                    "packets {} != round(rate {rate} x duration {dur})",
                    self.packets
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub sample_id: String,
    /// `[links, subcarriers, packets]`.
    pub shape: [usize; 3],
    /// Row-major (link, subcarrier, time).
    pub amplitude: Vec<f32>,
    pub labels: BTreeMap<String, usize>,
}

impl CsiSample {
    pub fn new(
        sample_id: impl Into<String>,
        shape: [usize; 3],
        amplitude: Vec<f32>,
        labels: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if amplitude.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} values for {shape:?}"),
                actual: format!("{} values", amplitude.len()),
            });
        }
        if let Some(i) = amplitude.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            let (l, rest) = (i / (shape[1] * shape[2]), i % (shape[1] * shape[2]));
            return Err(Error::NonFinite {
                index: vec![l, rest / shape[2], rest % shape[2]],
            });
        }
        Ok(CsiSample {
            sample_id: sample_id.into(),
            shape,
            amplitude,
            labels,
        })
    }

    pub fn label(&self, task: &str) -> Result<usize> {
        self.labels
            .get(task)
            .copied()
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Amplitude at `(link, subcarrier, time)`.
    pub fn at(&self, l: usize, s: usize, p: usize) -> f32 {
        self.amplitude[(l * self.shape[1] + s) * self.shape[2] + p]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<CsiSample>,
}

impl CsiDataset {
    /// Validates every invariant: geometry, unique ids, labels in range.
    pub fn new(meta: DatasetMeta, samples: Vec<CsiSample>) -> Result<Self> {
        meta.validate()?;
        let shape = meta.shape();
        let mut ids = BTreeSet::new();
        for s in &samples {
            if s.shape != shape {
                return Err(Error::GeometryMismatch(format!(
                    "sample {} has shape {:?}, manifest declares {:?}",
                    s.sample_id, s.shape, shape
                )));
            }
            if !ids.insert(s.sample_id.as_str()) {
                return Err(invalid(format!("duplicate sample id {}", s.sample_id)));
            }
            for t in &meta.tasks {
                let y = s.label(&t.name)?;
                if y >= t.num_classes {
                    return Err(invalid(format!(
                        "sample {}: label {y} out of range for task {} ({} classes)",
                        s.sample_id, t.name, t.num_classes
                    )));
                }
            }
        }
        Ok(CsiDataset { meta, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// A dataset over a subset of samples (by index), sharing the manifest.
    pub fn subset(&self, indices: &[usize]) -> CsiDataset {
        CsiDataset {
            meta: self.meta.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn labels_for(&self, task: &str) -> Result<Vec<usize>> {
        self.samples.iter().map(|s| s.label(task)).collect()
    }

    /// Restricts the manifest to the given tasks, in the given order.
    pub fn select_tasks(&self, tasks: &[&str]) -> Result<CsiDataset> {
        let mut meta = self.meta.clone();
        meta.tasks = tasks
            .iter()
            .map(|n| {
                self.meta
                    .task(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownTask(n.to_string()))
            })
            .collect::<Result<_>>()?;
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.labels.retain(|k, _| tasks.contains(&k.as_str()));
                s
            })
            .collect();
        Ok(CsiDataset { meta, samples })
    }
}

/// Elementwise complex modulus of a CSI array; the phase is discarded.
///
/// `shape` is `[L, S, P]` and is only used to report the offending index of
/// a non-finite entry.
pub fn amplitude_of(h: &[Complex64], shape: [usize; 3]) -> Result<Vec<f64>> {
    let n: usize = shape.iter().product();
    if h.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} entries for {shape:?}"),
            actual: format!("{}", h.len()),
        });
    }
    h.iter()
        .enumerate()
        .map(|(i, z)| {
            if z.re.is_finite() && z.im.is_finite() {
                Ok(z.norm())
            } else {
                let plane = shape[1] * shape[2];
                Err(Error::NonFinite {
                    index: vec![i / plane, (i % plane) / shape[2], i % shape[2]],
                })
            }
        })
        .collect()
}

/// Linear interpolation of the time axis onto `target_p` evenly spaced points
/// spanning the original first and last packet.
pub fn resample_time(sample: &CsiSample, target_p: usize) -> Result<CsiSample> {
    if target_p < 2 {
        return Err(invalid(format!("target length must be >= 2, got {target_p}")));
    }
    let [l, s, p] = sample.shape;
    let mut out = Vec::with_capacity(l * s * target_p);
    for row in sample.amplitude.chunks_exact(p) {
        if p == target_p {
            out.extend_from_slice(row);
            continue;
        }
        for j in 0..target_p {
            out.push(interpolate(row, j, target_p));
        }
    }
    Ok(CsiSample {
        sample_id: sample.sample_id.clone(),
        shape: [l, s, target_p],
        amplitude: out,
        labels: sample.labels.clone(),
    })
}

fn interpolate(row: &[f32], j: usize, target_p: usize) -> f32 {
    let p = row.len();
    if p == 1 {
        return row[0];
    }
    let x = j as f64 * (p - 1) as f64 / (target_p - 1) as f64;
    let i0 = (x.floor() as usize).min(p - 2);
    let frac = x - i0 as f64;
    let (a, b) = (row[i0] as f64, row[i0 + 1] as f64);
    (a + (b - a) * frac) as f32
}
