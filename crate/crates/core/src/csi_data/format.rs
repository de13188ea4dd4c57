//! Canonical dataset directory.
//!
//! ```text
//! <root>/manifest.json          UTF-8 JSON, see DatasetManifest
//! <root>/samples/000000.csia    one blob per sample
//! ```
//!
//! A blob is the 4 magic bytes `CSIA`, a `u8` version (1), three `u32`
//! little-endian dimensions `(L, S, P)`, then `L·S·P` little-endian `f32`
//! amplitudes in row-major (link, subcarrier, time) order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CsiDataset, CsiSample, DataSource, DatasetMeta, TaskSpec};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLE_MAGIC: &[u8; 4] = b"CSIA";
const BLOB_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub file: String,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub tasks: Vec<TaskSpec>,
    #[serde(rename = "L")]
    pub links: usize,
    #[serde(rename = "S")]
    pub subcarriers: usize,
    #[serde(rename = "P")]
    pub packets: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub source: DataSource,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    fn from_dataset(ds: &CsiDataset) -> Self {
        let m = &ds.meta;
        DatasetManifest {
            format_version: FORMAT_VERSION,
            tasks: m.tasks.clone(),
            links: m.links,
            subcarriers: m.subcarriers,
            packets: m.packets,
            sampling_rate_hz: m.sampling_rate_hz,
            duration_s: m.duration_s,
            source: m.source,
            samples: ds
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| SampleEntry {
                    id: s.sample_id.clone(),
                    file: format!("samples/{i:06}.csia"),
                    labels: s.labels.clone(),
                })
                .collect(),
        }
    }

    fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            tasks: self.tasks.clone(),
            links: self.links,
            subcarriers: self.subcarriers,
            packets: self.packets,
            sampling_rate_hz: self.sampling_rate_hz,
            duration_s: self.duration_s,
            source: self.source,
        }
    }
}

pub fn encode_sample_blob(sample: &CsiSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * sample.amplitude.len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.push(BLOB_VERSION);
    for d in sample.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &sample.amplitude {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a blob into `(shape, amplitudes)`.
pub fn decode_sample_blob(bytes: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::MalformedManifest("sample blob lacks CSIA header".into()));
    }
    if bytes[4] != BLOB_VERSION {
        return Err(Error::UnsupportedVersion {
            found: bytes[4] as u32,
            expected: BLOB_VERSION as u32,
        });
    }
    let dim = |i: usize| {
        let o = 5 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::GeometryMismatch(format!(
            "blob declares {shape:?} ({n} values) but carries {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((shape, values))
}

pub fn write_dataset(ds: &CsiDataset, root: &Path) -> Result<()> {
    let samples_dir = root.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let manifest = DatasetManifest::from_dataset(ds);
    for (entry, sample) in manifest.samples.iter().zip(&ds.samples) {
        let path = root.join(&entry.file);
        fs::write(&path, encode_sample_blob(sample)).map_err(|e| Error::io(&path, e))?;
    }
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(root: &Path) -> Result<CsiDataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::UnsupportedVersion {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::MalformedManifest("missing format_version".into())),
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let meta = manifest.meta();
    let expected = meta.shape();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = root.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (shape, amplitude) = decode_sample_blob(&bytes)?;
        if shape != expected {
            return Err(Error::GeometryMismatch(format!(
                "{}: payload {shape:?}, manifest {expected:?}",
                entry.file
            )));
        }
        samples.push(CsiSample::new(
            entry.id.clone(),
            shape,
            amplitude,
            entry.labels.clone(),
        )?);
    }
    CsiDataset::new(meta, samples)
}

/// SHA-256 over the canonical manifest and every sample blob, hex encoded.
pub fn dataset_digest(ds: &CsiDataset) -> String {
    let mut h = Sha256::new();
    let manifest = DatasetManifest::from_dataset(ds);
    h.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
    for s in &ds.samples {
        h.update(encode_sample_blob(s));
    }
    hex::encode(h.finalize())
}
