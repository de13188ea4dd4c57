//! Binary model archive.
//!
//! ```text
//! "WMCK"  u32 version
//! u64 manifest length, manifest JSON (CheckpointManifest)
//! u32 array count, then per array:
//!     u32 name length, name (UTF-8)
//!     u8 kind (0 weight, 1 buffer), u8 frozen
//!     u32 rank, u64 dims[rank]
//!     f32 values (little endian)
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Teacher arrays are stored under `teacher.<task>.` and are always frozen.
//! All integers are little endian.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csi_data::TaskSpec;
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::model_zoo::{build_model, ModelKind, ModelVariant};
use crate::net_blocks::{DepthProfile, Geometry, Module, Param, ParamKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEntry {
    pub task: TaskSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub geometry: Geometry,
    pub tasks: Vec<TaskSpec>,
    pub depth_profile: DepthProfile,
    pub seed: u64,
    pub hyper: Option<HyperParams>,
    pub teachers: Vec<TeacherEntry>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

fn manifest_of(model: &ModelVariant, hyper: Option<&HyperParams>) -> CheckpointManifest {
    CheckpointManifest {
        kind: model.kind,
        geometry: model.geometry,
        tasks: model.tasks().into_iter().cloned().collect(),
        depth_profile: model.kind.depth_profile(),
        seed: model.seed,
        hyper: hyper.cloned(),
        teachers: model
            .teachers
            .iter()
            .map(|(_, t)| TeacherEntry {
                task: t.heads[0].spec.clone(),
                seed: t.seed,
            })
            .collect(),
        notes: BTreeMap::new(),
    }
}

fn put_array(buf: &mut Vec<u8>, name: &str, p: &Param, force_frozen: bool) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(match p.kind {
        ParamKind::Weight => 0,
        ParamKind::Buffer => 1,
    });
    buf.push((p.frozen || force_frozen) as u8);
    buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
    for d in &p.shape {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in &p.value {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &ModelVariant, hyper: Option<&HyperParams>) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&manifest_of(model, hyper))?;
    let mut arrays = Vec::new();
    model.visit("", &mut |n, p| arrays.push((n, p, false)));
    for (task, t) in &model.teachers {
        t.visit(&format!("teacher.{task}"), &mut |n, p| arrays.push((n, p, true)));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (n, p, f) in &arrays {
        put_array(&mut buf, n, p, *f);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(model: &ModelVariant, hyper: Option<&HyperParams>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model, hyper)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::MalformedManifest("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct StoredArray {
    kind: u8,
    frozen: bool,
    shape: Vec<usize>,
    values: Vec<f32>,
}

/// Decodes a checkpoint; `expected` rejects a geometry other than the one given.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<Geometry>) -> Result<(ModelVariant, CheckpointManifest)> {
    if bytes.len() < 8 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedManifest("not a model checkpoint".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::DigestMismatch("checkpoint content does not match its digest".into()));
    }
    let r_body = &mut Reader { buf: body, pos: 8 };
    let mlen = r_body.u64()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r_body.take(mlen)?)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if let Some(g) = expected {
        if g != manifest.geometry {
            return Err(Error::GeometryMismatch(format!(
                "checkpoint geometry {} differs from expected {g}",
                manifest.geometry
            )));
        }
    }
    let count = r_body.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let nlen = r_body.u32()? as usize;
        let name = String::from_utf8(r_body.take(nlen)?.to_vec())
            .map_err(|_| Error::MalformedManifest("array name is not UTF-8".into()))?;
        let kind = r_body.u8()?;
        let frozen = r_body.u8()? != 0;
        let rank = r_body.u32()? as usize;
        let shape = (0..rank).map(|_| r_body.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r_body
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(
            name,
            StoredArray {
                kind,
                frozen,
                shape,
                values,
            },
        );
    }
    let model = rebuild(&manifest, &mut arrays)?;
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::MalformedManifest(format!("unexpected array {extra}")));
    }
    Ok((model, manifest))
}

fn fill(m: &mut dyn Module, prefix: &str, arrays: &mut BTreeMap<String, StoredArray>) -> Result<()> {
    let mut err = None;
    m.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match arrays.remove(&name) {
            Some(a) if a.shape == p.shape && a.kind == (p.kind == ParamKind::Buffer) as u8 => {
                p.value = a.values;
                p.frozen = a.frozen;
            }
            Some(a) => {
                err = Some(Error::GeometryMismatch(format!(
                    "array {name}: stored {:?}, model {:?}",
                    a.shape, p.shape
                )))
            }
            None => err = Some(Error::MalformedManifest(format!("missing array {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn rebuild(manifest: &CheckpointManifest, arrays: &mut BTreeMap<String, StoredArray>) -> Result<ModelVariant> {
    if manifest.kind.depth_profile() != manifest.depth_profile {
        return Err(Error::MalformedManifest("depth profile does not match the variant".into()));
    }
    // initial values are placeholders, every array is overwritten below
    let mut model = build_model(manifest.kind, manifest.geometry, &manifest.tasks, manifest.seed)?;
    fill(&mut model, "", arrays)?;
    let mut seen = BTreeSet::new();
    for t in &manifest.teachers {
        if !seen.insert(t.task.name.clone()) {
            return Err(Error::DuplicateTask(t.task.name.clone()));
        }
        let mut teacher = build_model(ModelKind::Sts, manifest.geometry, std::slice::from_ref(&t.task), t.seed)?;
        fill(&mut teacher, &format!("teacher.{}", t.task.name), arrays)?;
        model.attach_teacher(&t.task.name, teacher)?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, expected: Option<Geometry>) -> Result<ModelVariant> {
    load_checkpoint_with_manifest(path, expected).map(|(m, _)| m)
}

pub fn load_checkpoint_with_manifest(path: &Path, expected: Option<Geometry>) -> Result<(ModelVariant, CheckpointManifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

/// Hex SHA-256 of the encoded archive; identifies a checkpoint in reports.
pub fn checkpoint_id(model: &ModelVariant) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode_checkpoint(model, None)?)))
}
