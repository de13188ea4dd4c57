//! Importers from public-dataset layouts (as NumPy `.npy` exports) into the
//! canonical format.
//!
//! Two layouts are understood:
//!
//! * **stacked**: `amplitude.npy` of shape `[N, S, P]` (one link) or
//!   `[N, L, S, P]`, plus one `<TASK>.npy` integer vector of length `N` per
//!   task (`GR.npy`, `IL.npy`, `UI.npy`). Used for ARIL and CSIDA exports.
//! * **per-sample**: `index.csv` with a header `file,<TASK>,...` and one
//!   `.npy` per row shaped `[L, S, P]` or `[R, L, S, P]` (receivers first).
//!   Lengths may differ between rows; every sample is resampled to a common
//!   `P`. Used for Widar3.0, where only one receiver is kept.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use npyz::{DType, NpyFile, TypeChar};

use super::{resample_time, CsiDataset, CsiSample, DataSource, DatasetMeta, TaskSpec, GR, IL, UI};
use crate::error::{invalid, Error, Result};

/// Widar3.0 recordings are 1300-2200 packets long; they are resampled to this.
pub const DEFAULT_WIDAR_PACKETS: usize = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportLayout {
    Stacked,
    PerSample,
}

impl ImportLayout {
    pub fn detect(dir: &Path) -> Result<Self> {
        if dir.join("amplitude.npy").is_file() {
            Ok(ImportLayout::Stacked)
        } else if dir.join("index.csv").is_file() {
            Ok(ImportLayout::PerSample)
        } else {
            Err(invalid(format!(
                "{} has neither amplitude.npy nor index.csv",
                dir.display()
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImportOptions {
    pub source: DataSource,
    /// Detected from the directory contents when `None`.
    pub layout: Option<ImportLayout>,
    /// Target time length; defaults to 1800 for Widar3.0, otherwise none.
    pub resample_to: Option<usize>,
    /// Receiver kept from `[R, L, S, P]` per-sample arrays.
    pub receiver: usize,
    /// Subtract 1 from every label (MATLAB-style exports).
    pub one_based_labels: bool,
}

impl ImportOptions {
    pub fn new(source: DataSource) -> Self {
        ImportOptions {
            source,
            layout: None,
            resample_to: None,
            receiver: 0,
            one_based_labels: false,
        }
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Task vocabularies of the public datasets.
pub fn source_tasks(source: DataSource) -> Result<Vec<TaskSpec>> {
    Ok(match source {
        DataSource::Aril => vec![
            TaskSpec::new(GR, names(&["up", "down", "left", "right", "circle", "cross"]))?,
            TaskSpec::numbered(IL, "location", 16)?,
        ],
        DataSource::Csida => vec![
            TaskSpec::new(
                GR,
                names(&["hand left", "hand right", "lift", "press", "draw circle", "draw zigzag"]),
            )?,
            TaskSpec::numbered(IL, "location", 5)?,
            TaskSpec::numbered(UI, "user", 5)?,
        ],
        DataSource::Widar3 => vec![
            TaskSpec::new(
                GR,
                names(&["push&pull", "sweep", "clap", "slide", "draw circle", "draw zigzag"]),
            )?,
            TaskSpec::numbered(IL, "location", 5)?,
            TaskSpec::numbered(UI, "user", 16)?,
        ],
        DataSource::Synth => return Err(invalid("synthetic data is generated, not imported")),
    })
}

fn source_timing(source: DataSource, packets: usize) -> (Option<f64>, Option<f64>) {
    match source {
        DataSource::Csida if packets == 1800 => (Some(1000.0), Some(1.8)),
        _ => (None, None),
    }
}

struct NpyArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_npy(path: &Path) -> Result<NpyArray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let npy = NpyFile::new(BufReader::new(file)).map_err(|e| Error::io(path, e))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let bad = || invalid(format!("{}: unsupported dtype", path.display()));
    let ts = match npy.dtype() {
        DType::Plain(ts) => ts,
        _ => return Err(bad()),
    };
    let io = |e| Error::io(path, e);
    let values: Vec<f64> = match (ts.type_char(), ts.size_field()) {
        (TypeChar::Float, 4) => npy.into_vec::<f32>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Float, 8) => npy.into_vec::<f64>().map_err(io)?,
        (TypeChar::Int, 1) => npy.into_vec::<i8>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Int, 2) => npy.into_vec::<i16>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Int, 4) => npy.into_vec::<i32>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Int, 8) => npy.into_vec::<i64>().map_err(io)?.into_iter().map(|v| v as f64).collect(),
        (TypeChar::Uint, 1) => npy.into_vec::<u8>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Uint, 2) => npy.into_vec::<u16>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Uint, 4) => npy.into_vec::<u32>().map_err(io)?.into_iter().map(f64::from).collect(),
        (TypeChar::Uint, 8) => npy.into_vec::<u64>().map_err(io)?.into_iter().map(|v| v as f64).collect(),
        _ => return Err(bad()),
    };
    Ok(NpyArray { shape, values })
}

fn to_label(v: f64, one_based: bool, task: &TaskSpec, where_: &str) -> Result<usize> {
    let shifted = if one_based { v - 1.0 } else { v };
    if shifted.fract() != 0.0 || shifted < 0.0 || shifted as usize >= task.num_classes {
        return Err(invalid(format!(
            "{where_}: label {v} invalid for task {} ({} classes)",
            task.name, task.num_classes
        )));
    }
    Ok(shifted as usize)
}

fn to_amplitude(values: &[f64]) -> Vec<f32> {
    // Amplitude exports are moduli; tiny negative values come from lossy
    // conversions and are clamped.
    values.iter().map(|&v| v.max(0.0) as f32).collect()
}

pub fn import_dataset(dir: &Path, opts: &ImportOptions) -> Result<CsiDataset> {
    let layout = match opts.layout {
        Some(l) => l,
        None => ImportLayout::detect(dir)?,
    };
    let all_tasks = source_tasks(opts.source)?;
    let resample = opts.resample_to.or(match opts.source {
        DataSource::Widar3 => Some(DEFAULT_WIDAR_PACKETS),
        _ => None,
    });
    let (tasks, mut samples) = match layout {
        ImportLayout::Stacked => import_stacked(dir, &all_tasks, opts)?,
        ImportLayout::PerSample => import_per_sample(dir, &all_tasks, opts, resample)?,
    };
    if let (Some(p), ImportLayout::Stacked) = (resample, layout) {
        samples = samples
            .iter()
            .map(|s| resample_time(s, p))
            .collect::<Result<_>>()?;
    }
    let shape = samples
        .first()
        .map(|s| s.shape)
        .ok_or_else(|| invalid("no samples found"))?;
    let (sampling_rate_hz, duration_s) = source_timing(opts.source, shape[2]);
    let meta = DatasetMeta {
        tasks,
        links: shape[0],
        subcarriers: shape[1],
        packets: shape[2],
        sampling_rate_hz,
        duration_s,
        source: opts.source,
    };
    CsiDataset::new(meta, samples)
}

type Imported = (Vec<TaskSpec>, Vec<CsiSample>);

fn import_stacked(dir: &Path, all_tasks: &[TaskSpec], opts: &ImportOptions) -> Result<Imported> {
    let amp = read_npy(&dir.join("amplitude.npy"))?;
    let (n, shape) = match amp.shape.as_slice() {
        &[n, s, p] => (n, [1, s, p]),
        &[n, l, s, p] => (n, [l, s, p]),
        other => {
            return Err(Error::ShapeMismatch {
                expected: "[N, S, P] or [N, L, S, P]".into(),
                actual: format!("{other:?}"),
            })
        }
    };
    let tasks: Vec<TaskSpec> = all_tasks
        .iter()
        .filter(|t| dir.join(format!("{}.npy", t.name)).is_file())
        .cloned()
        .collect();
    if tasks.is_empty() {
        return Err(invalid("no label files (GR.npy, IL.npy, UI.npy) found"));
    }
    let mut labels = Vec::new();
    for t in &tasks {
        let arr = read_npy(&dir.join(format!("{}.npy", t.name)))?;
        if arr.values.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} labels for {}", t.name),
                actual: format!("{}", arr.values.len()),
            });
        }
        labels.push(arr.values);
    }
    let per = shape.iter().product::<usize>();
    let samples = (0..n)
        .map(|i| {
            let lbl = tasks
                .iter()
                .zip(&labels)
                .map(|(t, v)| {
                    Ok((t.name.clone(), to_label(v[i], opts.one_based_labels, t, &format!("row {i}"))?))
                })
                .collect::<Result<BTreeMap<_, _>>>()?;
            CsiSample::new(
                format!("{i:06}"),
                shape,
                to_amplitude(&amp.values[i * per..(i + 1) * per]),
                lbl,
            )
        })
        .collect::<Result<_>>()?;
    Ok((tasks, samples))
}

fn import_per_sample(
    dir: &Path,
    all_tasks: &[TaskSpec],
    opts: &ImportOptions,
    resample: Option<usize>,
) -> Result<Imported> {
    let index = dir.join("index.csv");
    let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| invalid("index.csv is empty"))?
        .split(',')
        .map(str::trim)
        .collect();
    if header.first() != Some(&"file") {
        return Err(invalid("index.csv header must start with `file`"));
    }
    let columns: Vec<(usize, TaskSpec)> = header
        .iter()
        .enumerate()
        .skip(1)
        .map(|(c, name)| {
            all_tasks
                .iter()
                .find(|t| t.name == *name)
                .cloned()
                .map(|t| (c, t))
                .ok_or_else(|| Error::UnknownTask(name.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(invalid(format!("index.csv row {row}: wrong column count")));
        }
        let arr = read_npy(&dir.join(fields[0]))?;
        let (shape, offset) = match arr.shape.as_slice() {
            &[l, s, p] => ([l, s, p], 0),
            &[r, l, s, p] => {
                if opts.receiver >= r {
                    return Err(invalid(format!(
                        "{}: receiver {} requested, {r} present",
                        fields[0], opts.receiver
                    )));
                }
                ([l, s, p], opts.receiver * l * s * p)
            }
            other => {
                return Err(Error::ShapeMismatch {
                    expected: "[L, S, P] or [R, L, S, P]".into(),
                    actual: format!("{other:?}"),
                })
            }
        };
        let per: usize = shape.iter().product();
        let mut labels = BTreeMap::new();
        for (c, t) in &columns {
            let v: f64 = fields[*c]
                .parse()
                .map_err(|_| invalid(format!("index.csv row {row}: bad label `{}`", fields[*c])))?;
            labels.insert(t.name.clone(), to_label(v, opts.one_based_labels, t, fields[0])?);
        }
        let sample = CsiSample::new(
            fields[0].trim_end_matches(".npy").to_string(),
            shape,
            to_amplitude(&arr.values[offset..offset + per]),
            labels,
        )?;
        samples.push(match resample {
            Some(p) => resample_time(&sample, p)?,
            None => sample,
        });
    }
    Ok((columns.into_iter().map(|(_, t)| t).collect(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use npyz::WriterBuilder;
    use std::io::Write;

    fn write_npy<T: npyz::AutoSerialize + Copy>(path: &Path, shape: &[u64], data: &[T]) {
        let f = File::create(path).unwrap();
        let mut w = npyz::WriteOptions::new()
            .default_dtype()
            .shape(shape)
            .writer(std::io::BufWriter::new(f))
            .begin_nd()
            .unwrap();
        w.extend(data.iter().copied()).unwrap();
        w.finish().unwrap();
    }

    #[test]
    fn aril_stacked_layout() {
        let dir = tempfile::tempdir().unwrap();
        let n = 1440;
        let amp: Vec<f32> = (0..n * 52 * 192).map(|i| (i % 97) as f32 * 0.01).collect();
        write_npy(&dir.path().join("amplitude.npy"), &[n as u64, 52, 192], &amp);
        let gr: Vec<i64> = (0..n as i64).map(|i| i % 6).collect();
        let il: Vec<i64> = (0..n as i64).map(|i| (i / 6) % 16).collect();
        write_npy(&dir.path().join("GR.npy"), &[n as u64], &gr);
        write_npy(&dir.path().join("IL.npy"), &[n as u64], &il);
        let ds = import_dataset(dir.path(), &ImportOptions::new(DataSource::Aril)).unwrap();
        assert_eq!(ds.meta.shape(), [1, 52, 192]);
        assert_eq!(ds.len(), 1440);
        assert_eq!(ds.meta.task(GR).unwrap().num_classes, 6);
        assert_eq!(ds.meta.task(IL).unwrap().num_classes, 16);
        assert_eq!(ds.samples[7].labels[IL], 1);
        assert_eq!(ds.samples[1].at(0, 0, 0), amp[52 * 192]);
    }

    #[test]
    fn one_based_labels_shift() {
        let dir = tempfile::tempdir().unwrap();
        write_npy(&dir.path().join("amplitude.npy"), &[2, 1, 3, 4], &[1.0f64; 24]);
        write_npy(&dir.path().join("GR.npy"), &[2], &[1u8, 6]);
        let mut opts = ImportOptions::new(DataSource::Csida);
        opts.one_based_labels = true;
        let ds = import_dataset(dir.path(), &opts).unwrap();
        assert_eq!(ds.labels_for(GR).unwrap(), vec![0, 5]);
        opts.one_based_labels = false;
        assert!(import_dataset(dir.path(), &opts).is_err());
    }

    #[test]
    fn widar_per_sample_resamples_and_picks_receiver() {
        let dir = tempfile::tempdir().unwrap();
        let mut index = File::create(dir.path().join("index.csv")).unwrap();
        writeln!(index, "file,GR,IL,UI").unwrap();
        for (i, p) in [1300usize, 2200].into_iter().enumerate() {
            // receiver r carries the constant r + 1
            let data: Vec<f32> = (0..2)
                .flat_map(|r| std::iter::repeat(r as f32 + 1.0).take(3 * 30 * p))
                .collect();
            let name = format!("s{i}.npy");
            write_npy(&dir.path().join(&name), &[2, 3, 30, p as u64], &data);
            writeln!(index, "{name},{i},{i},{}", 15 - i).unwrap();
        }
        drop(index);
        let mut opts = ImportOptions::new(DataSource::Widar3);
        opts.receiver = 1;
        let ds = import_dataset(dir.path(), &opts).unwrap();
        assert_eq!(ds.meta.shape(), [3, 30, DEFAULT_WIDAR_PACKETS]);
        assert!(ds.samples.iter().all(|s| s.amplitude.iter().all(|&v| v == 2.0)));
        assert_eq!(ds.samples[1].labels[UI], 14);
    }

    #[test]
    fn missing_layout_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(import_dataset(dir.path(), &ImportOptions::new(DataSource::Aril)).is_err());
    }
}
