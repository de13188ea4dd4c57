//! Model variants assembled from [`crate::net_blocks`].
//!
//! Every variant shares a shallow encoder and a deep encoder and has one
//! classifier per task. `KDMTS_RA` and `WIMUSE` add a residual adaptor per
//! task whose output is concatenated with the common feature along time
//! before the classifier. Distilled variants (`KDMTS`, `KDMTS_RA`, `WIMUSE`)
//! carry a `C × C` linear transform per task and a frozen single-task
//! teacher per task; `UMTS` carries one log-variance per task. Transforms,
//! log-variances and teachers are training-only and excluded from
//! [`ModelVariant::inference_parameters`] and [`ModelVariant::count_multiadds`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::csi_data::{CsiSample, TaskSpec};
use crate::error::{invalid, Error, Result};
use crate::net_blocks::{
    join, Classifier, DeepEncoder, DepthProfile, Geometry, Module, Param, ResidualAdaptor, ShallowEncoder, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "STS")]
    Sts,
    #[serde(rename = "NMTS")]
    Nmts,
    #[serde(rename = "UMTS")]
    Umts,
    #[serde(rename = "KDMTS")]
    Kdmts,
    #[serde(rename = "KDMTS_RA")]
    KdmtsRa,
    #[serde(rename = "WIMUSE")]
    Wimuse,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Sts,
        ModelKind::Nmts,
        ModelKind::Umts,
        ModelKind::Kdmts,
        ModelKind::KdmtsRa,
        ModelKind::Wimuse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Sts => "STS",
            ModelKind::Nmts => "NMTS",
            ModelKind::Umts => "UMTS",
            ModelKind::Kdmts => "KDMTS",
            ModelKind::KdmtsRa => "KDMTS_RA",
            ModelKind::Wimuse => "WIMUSE",
        }
    }

    pub fn depth_profile(self) -> DepthProfile {
        match self {
            ModelKind::Sts => DepthProfile::Sts,
            _ => DepthProfile::Mts,
        }
    }

    pub fn has_adaptors(self) -> bool {
        matches!(self, ModelKind::KdmtsRa | ModelKind::Wimuse)
    }

    pub fn needs_teachers(self) -> bool {
        matches!(self, ModelKind::Kdmts | ModelKind::KdmtsRa | ModelKind::Wimuse)
    }

    pub fn uses_logits_kd(self) -> bool {
        self == ModelKind::Wimuse
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| invalid(format!("unknown model variant `{s}`")))
    }
}

/// Per-task parts of a model.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub spec: TaskSpec,
    pub adaptor: Option<ResidualAdaptor>,
    pub classifier: Classifier,
    /// `[C, C]` student-to-teacher transform, identity at init.
    pub lt: Option<Param>,
    /// Uncertainty log-variance, zero at init.
    pub log_var: Option<Param>,
}

impl TaskHead {
    fn new(kind: ModelKind, spec: TaskSpec, channels: usize, seed: u64) -> Result<Self> {
        let name = spec.name.clone();
        let adaptor = kind
            .has_adaptors()
            .then(|| ResidualAdaptor::new(channels, seed, &format!("ra.{name}")))
            .transpose()?;
        let lt = kind.needs_teachers().then(|| {
            let mut m = vec![0.0; channels * channels];
            for i in 0..channels {
                m[i * channels + i] = 1.0;
            }
            Param::weight(vec![channels, channels], m)
        });
        let log_var = (kind == ModelKind::Umts).then(|| Param::filled(vec![1], 0.0));
        Ok(TaskHead {
            classifier: Classifier::new(channels, spec.num_classes, seed, &format!("head.{name}"))?,
            spec,
            adaptor,
            lt,
            log_var,
        })
    }

    pub(crate) fn visit_with<'a>(&'a self, f: &mut dyn FnMut(String, &'a Param)) {
        let n = &self.spec.name;
        if let Some(a) = &self.adaptor {
            a.visit(&format!("ra.{n}"), f);
        }
        self.classifier.visit(&format!("head.{n}"), f);
        if let Some(p) = &self.lt {
            f(format!("lt.{n}"), p);
        }
        if let Some(p) = &self.log_var {
            f(format!("logvar.{n}"), p);
        }
    }

    pub(crate) fn visit_mut_with(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        let n = self.spec.name.clone();
        if let Some(a) = &mut self.adaptor {
            a.visit_mut(&format!("ra.{n}"), f);
        }
        self.classifier.visit_mut(&format!("head.{n}"), f);
        if let Some(p) = &mut self.lt {
            f(format!("lt.{n}"), p);
        }
        if let Some(p) = &mut self.log_var {
            f(format!("logvar.{n}"), p);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelVariant {
    pub kind: ModelKind,
    pub geometry: Geometry,
    pub seed: u64,
    pub se: ShallowEncoder,
    pub de: DeepEncoder,
    pub heads: Vec<TaskHead>,
    /// Frozen single-task models keyed by task name.
    pub teachers: BTreeMap<String, ModelVariant>,
    cache: Option<TrainCache>,
}

#[derive(Debug, Clone)]
struct TrainCache {
    trunk_trained: bool,
    common_len: usize,
    /// Heads run in training mode, by index.
    trained_heads: Vec<bool>,
}

/// Results of one forward pass; logits are `[B, M, 1]`.
#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    pub logits: BTreeMap<String, Tensor>,
    /// High-level feature for STS, shared common feature otherwise.
    pub common_feature: Tensor,
    pub comp_features: BTreeMap<String, Tensor>,
    pub teacher_features: BTreeMap<String, Tensor>,
    pub teacher_logits: BTreeMap<String, Tensor>,
}

/// Upstream gradients for [`ModelVariant::backward`].
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub logits: BTreeMap<String, Tensor>,
    pub common_feature: Option<Tensor>,
}

pub fn build_model(kind: ModelKind, geometry: Geometry, tasks: &[TaskSpec], seed: u64) -> Result<ModelVariant> {
    geometry.validate()?;
    match (kind, tasks.len()) {
        (ModelKind::Sts, 1) => {}
        (ModelKind::Sts, n) => return Err(invalid(format!("STS takes exactly one task, got {n}"))),
        (_, n) if n < 2 => return Err(invalid(format!("{kind} needs at least two tasks, got {n}"))),
        _ => {}
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in tasks {
        t.validate()?;
        if !seen.insert(t.name.as_str()) {
            return Err(Error::DuplicateTask(t.name.clone()));
        }
    }
    let c = geometry.channels();
    let model = ModelVariant {
        kind,
        geometry,
        seed,
        se: ShallowEncoder::new(geometry, seed, "se")?,
        de: DeepEncoder::new(c, kind.depth_profile(), seed, "de")?,
        heads: tasks
            .iter()
            .map(|t| TaskHead::new(kind, t.clone(), c, seed))
            .collect::<Result<_>>()?,
        teachers: BTreeMap::new(),
        cache: None,
    };
    // the classifier needs at least three time steps
    model.count_multiadds(1)?;
    Ok(model)
}

/// Packs samples into a `[B, L·S, P]` input tensor.
pub fn to_input(samples: &[&CsiSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
    let [l, s, p] = first.shape;
    let mut data = Vec::with_capacity(samples.len() * l * s * p);
    for x in samples {
        if x.shape != first.shape {
            return Err(Error::GeometryMismatch(format!("{:?} vs {:?}", x.shape, first.shape)));
        }
        data.extend_from_slice(&x.amplitude);
    }
    Ok(Tensor::from_vec([samples.len(), l * s, p], data))
}

impl ModelVariant {
    pub fn tasks(&self) -> Vec<&TaskSpec> {
        self.heads.iter().map(|h| &h.spec).collect()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.heads.iter().map(|h| h.spec.name.clone()).collect()
    }

    pub fn head(&self, task: &str) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.spec.name == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn head_mut(&mut self, task: &str) -> Result<&mut TaskHead> {
        self.heads
            .iter_mut()
            .find(|h| h.spec.name == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let g = &self.geometry;
        if x.channels() != g.input_channels() || x.len() != g.packets {
            return Err(Error::GeometryMismatch(format!(
                "model expects {} channels x {} packets, got {} x {}",
                g.input_channels(),
                g.packets,
                x.channels(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Attaches a frozen single-task teacher for `task`.
    pub fn attach_teacher(&mut self, task: &str, mut teacher: ModelVariant) -> Result<()> {
        let head = self.head(task)?;
        if teacher.kind != ModelKind::Sts {
            return Err(Error::Teacher(format!("teacher for {task} must be STS, got {}", teacher.kind)));
        }
        if teacher.geometry != self.geometry {
            return Err(Error::GeometryMismatch(format!(
                "teacher geometry {} differs from student {}",
                teacher.geometry, self.geometry
            )));
        }
        if teacher.heads[0].spec != head.spec {
            return Err(Error::Teacher(format!(
                "teacher task {} does not match student task {task}",
                teacher.heads[0].spec.name
            )));
        }
        teacher.set_frozen(true);
        teacher.teachers.clear();
        self.teachers.insert(task.to_string(), teacher);
        Ok(())
    }

    pub fn has_all_teachers(&self) -> bool {
        self.heads.iter().all(|h| self.teachers.contains_key(&h.spec.name))
    }

    /// Evaluation-mode forward pass. Teacher outputs are included only when
    /// `with_teachers` is set and teachers are attached.
    pub fn forward_eval(&self, x: &Tensor, with_teachers: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let low = self.se.forward_eval(x)?;
        let common = self.de.forward_eval(&low)?;
        let mut out = ForwardOutput::default();
        for h in &self.heads {
            let n = h.spec.name.clone();
            let input = match &h.adaptor {
                Some(a) => {
                    let comp = a.forward_eval(&low)?;
                    let cat = Tensor::concat_time(&comp, &common);
                    out.comp_features.insert(n.clone(), comp);
                    cat
                }
                None => common.clone(),
            };
            out.logits.insert(n, h.classifier.forward_eval(&input)?);
        }
        out.common_feature = common;
        if with_teachers {
            let all: Vec<&String> = self.teachers.keys().collect();
            self.teacher_outputs(x, &all, &mut out)?;
        }
        Ok(out)
    }

    fn teacher_outputs(&self, x: &Tensor, tasks: &[&String], out: &mut ForwardOutput) -> Result<()> {
        for (task, t) in self.teachers.iter().filter(|(k, _)| tasks.contains(k)) {
            let o = t.forward_eval(x, false)?;
            out.teacher_logits.insert(task.clone(), o.logits[task].clone());
            out.teacher_features.insert(task.clone(), o.common_feature);
        }
        Ok(())
    }

    /// Training-mode forward pass with caches for [`ModelVariant::backward`].
    ///
    /// Fully frozen blocks run in evaluation mode and receive no gradient.
    /// Distilled variants require every teacher and return their outputs.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x)?;
        if self.kind.needs_teachers() && !self.has_all_teachers() {
            return Err(Error::Teacher(format!("{} training needs a teacher for every task", self.kind)));
        }
        let trunk_frozen = self.de.is_frozen();
        if trunk_frozen != self.se.is_frozen() {
            return Err(Error::Frozen("shallow and deep encoders must be frozen together".into()));
        }
        let trunk_trained = !trunk_frozen;
        let (low, common) = if trunk_trained {
            let low = self.se.forward_train(x)?;
            let common = self.de.forward_train(&low)?;
            (low, common)
        } else {
            let low = self.se.forward_eval(x)?;
            let common = self.de.forward_eval(&low)?;
            (low, common)
        };
        let mut out = ForwardOutput::default();
        let mut trained_heads = Vec::with_capacity(self.heads.len());
        for h in &mut self.heads {
            let n = h.spec.name.clone();
            let head_trained = !(h.classifier.is_frozen() && h.adaptor.as_ref().is_none_or(|a| a.is_frozen()));
            let input = match &mut h.adaptor {
                Some(a) => {
                    let comp = if head_trained {
                        a.forward_train(&low)?
                    } else {
                        a.forward_eval(&low)?
                    };
                    let cat = Tensor::concat_time(&comp, &common);
                    out.comp_features.insert(n.clone(), comp);
                    cat
                }
                None => common.clone(),
            };
            let z = if head_trained {
                h.classifier.forward_train(&input)?
            } else {
                h.classifier.forward_eval(&input)?
            };
            out.logits.insert(n, z);
            trained_heads.push(head_trained);
        }
        let needed: Vec<String> = self
            .heads
            .iter()
            .zip(&trained_heads)
            .filter(|(_, &t)| t)
            .map(|(h, _)| h.spec.name.clone())
            .collect();
        self.cache = Some(TrainCache {
            trunk_trained,
            common_len: common.len(),
            trained_heads,
        });
        out.common_feature = common;
        self.teacher_outputs(x, &needed.iter().collect::<Vec<_>>(), &mut out)?;
        Ok(out)
    }

    /// Back-propagates logits gradients (and an optional extra gradient on
    /// the common feature) into every non-frozen weight.
    pub fn backward(&mut self, grads: &OutputGrads) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| invalid("backward called without forward_train"))?;
        let need_trunk = cache.trunk_trained;
        let mut d_common = grads.common_feature.clone();
        let mut d_low: Option<Tensor> = None;
        for (h, &trained) in self.heads.iter_mut().zip(&cache.trained_heads) {
            if !trained {
                continue;
            }
            let dz = grads
                .logits
                .get(&h.spec.name)
                .ok_or_else(|| invalid(format!("no logits gradient for {}", h.spec.name)))?;
            let need_input = need_trunk || h.adaptor.is_some();
            let Some(d_in) = h.classifier.backward(dz, need_input) else {
                continue;
            };
            let d_shared = match &mut h.adaptor {
                Some(a) => {
                    let comp_len = d_in.len() - cache.common_len;
                    let (d_comp, d_shared) = Tensor::split_time(&d_in, comp_len);
                    if let Some(dl) = a.backward(&d_comp, need_trunk) {
                        match &mut d_low {
                            Some(acc) => acc.add_assign(&dl),
                            None => d_low = Some(dl),
                        }
                    }
                    d_shared
                }
                None => d_in,
            };
            if need_trunk {
                match &mut d_common {
                    Some(acc) => acc.add_assign(&d_shared),
                    None => d_common = Some(d_shared),
                }
            }
        }
        if need_trunk {
            let dc = d_common.ok_or_else(|| invalid("no gradient reaches the trunk"))?;
            let mut dl = self.de.backward(&dc);
            if let Some(extra) = &d_low {
                dl.add_assign(extra);
            }
            self.se.backward(&dl);
        }
        Ok(())
    }

    /// Learnable elements used at inference: encoders, adaptors, classifiers.
    pub fn inference_parameters(&self) -> usize {
        self.se.count_parameters()
            + self.de.count_parameters()
            + self
                .heads
                .iter()
                .map(|h| h.classifier.count_parameters() + h.adaptor.as_ref().map_or(0, |a| a.count_parameters()))
                .sum::<usize>()
    }

    /// Non-frozen learnable elements, training-only parts included.
    pub fn trainable_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.numel()
            }
        });
        n
    }

    /// Inference multiply-adds for `batch` samples of the model geometry.
    pub fn count_multiadds(&self, batch: usize) -> Result<u64> {
        self.multiadds_at(self.geometry.packets, batch)
    }

    /// Multiply-adds at an arbitrary time length `packets`.
    pub fn multiadds_at(&self, packets: usize, batch: usize) -> Result<u64> {
        let se = self.se.cost(packets)?;
        let de = self.de.cost(se.out_len)?;
        let mut total = se.multiadds + de.multiadds;
        for h in &self.heads {
            let mut len = de.out_len;
            if let Some(a) = &h.adaptor {
                let c = a.cost(se.out_len)?;
                total += c.multiadds;
                len += c.out_len;
            }
            total += h.classifier.cost(len)?.multiadds;
        }
        Ok(total * batch as u64)
    }

    /// SHA-256 of each teacher's arrays.
    pub fn teacher_digests(&self) -> BTreeMap<String, String> {
        self.teachers
            .iter()
            .map(|(t, m)| (t.clone(), crate::net_blocks::digest_module(m, &format!("teacher.{t}"))))
            .collect()
    }

    /// SHA-256 over every frozen array of the student, buffers included.
    pub fn frozen_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        self.visit("", &mut |name, p| {
            if p.frozen {
                h.update(name.as_bytes());
                for v in &p.value {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// Clears gradient accumulators of every array.
    pub fn zero_grad(&mut self) {
        Module::zero_grad(self);
    }
}

impl Module for ModelVariant {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param)) {
        self.se.visit(&join(prefix, "se"), f);
        self.de.visit(&join(prefix, "de"), f);
        for h in &self.heads {
            h.visit_with(&mut |n, p| f(join(prefix, &n), p));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.se.visit_mut(&join(prefix, "se"), f);
        self.de.visit_mut(&join(prefix, "de"), f);
        for h in &mut self.heads {
            h.visit_mut_with(&mut |n, p| f(join(prefix, &n), p));
        }
    }
}

/// Adds a task to a trained two-or-more-task WIMUSE model. Every existing
/// array is frozen; the new adaptor, classifier and transform are trainable.
pub fn extend_with_task(
    model: &ModelVariant,
    new_task: TaskSpec,
    teacher: ModelVariant,
    seed: u64,
) -> Result<ModelVariant> {
    if model.kind != ModelKind::Wimuse {
        return Err(invalid(format!("only WIMUSE models can be extended, got {}", model.kind)));
    }
    new_task.validate()?;
    if model.head(&new_task.name).is_ok() {
        return Err(Error::DuplicateTask(new_task.name.clone()));
    }
    let mut ext = model.clone();
    ext.cache = None;
    ext.set_frozen(true);
    let head = TaskHead::new(ModelKind::Wimuse, new_task.clone(), model.geometry.channels(), seed)?;
    ext.heads.push(head);
    ext.attach_teacher(&new_task.name, teacher)?;
    ext.count_multiadds(1)?;
    Ok(ext)
}

/// Evaluation-mode predictions for every sample, per model task, computed
/// in chunks of `batch_size`.
pub fn predict_dataset(
    model: &ModelVariant,
    ds: &crate::csi_data::CsiDataset,
    batch_size: usize,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = model.task_names().into_iter().map(|t| (t, Vec::new())).collect();
    for chunk in ds.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&CsiSample> = chunk.iter().collect();
        let o = model.forward_eval(&to_input(&refs)?, false)?;
        for (t, p) in predict(&o) {
            out.get_mut(&t).unwrap().extend(p);
        }
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per task, one entry per batch row.
pub fn predict(output: &ForwardOutput) -> BTreeMap<String, Vec<usize>> {
    output
        .logits
        .iter()
        .map(|(t, z)| {
            let m = z.channels();
            (t.clone(), z.data.chunks_exact(m).map(argmax).collect())
        })
        .collect()
}
