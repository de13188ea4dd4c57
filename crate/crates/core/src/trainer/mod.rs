//! Optimisation: Adam, the step learning-rate schedule, the two training
//! phases (single-task teachers, then multi-task students), task extension,
//! checkpoints and the per-epoch metrics log.

mod checkpoint;

pub use checkpoint::{
    checkpoint_id, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_with_manifest,
    save_checkpoint, CheckpointManifest, TeacherEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csi_data::{CsiDataset, CsiSample, DataSource};
use crate::error::{invalid, Error, Result};
use crate::losses::{batch_loss, BatchLoss, CommonBatch, HyperParams, Objective, TaskBatch, TeacherBatch};
use crate::model_zoo::{build_model, predict, predict_dataset, to_input, ModelKind, ModelVariant, OutputGrads};
use crate::net_blocks::{derive_seed, Module, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// `None` selects the preset for the model kind and data source.
    pub hyper: Option<HyperParams>,
    /// Test accuracy is measured every `eval_every` epochs and at the last one.
    pub eval_every: usize,
    /// Stop once evaluation-mode accuracy on the training set reaches this
    /// value for every trained task.
    pub target_train_accuracy: Option<f64>,
    /// `best.wmck` and `final.wmck` are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Appended to, one key=value line per epoch.
    pub log_path: Option<PathBuf>,
    /// Informational only; computation always runs on the CPU.
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 8,
            initial_lr: 1e-3,
            decay_epochs: vec![100, 200, 300],
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            hyper: None,
            eval_every: 1,
            target_train_accuracy: None,
            checkpoint_dir: None,
            log_path: None,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(invalid("initial_lr must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(invalid("decay_factor must be in (0, 1]"));
        }
        // the decay points only need to be increasing; ones past the run are inert
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("decay epochs must be strictly increasing"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(invalid("Adam betas must be in [0, 1) and eps > 0"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be >= 1"));
        }
        if let Some(h) = &self.hyper {
            h.validate()?;
        }
        Ok(())
    }

    /// Strict form: every decay epoch must also fall inside the run.
    pub fn validate_schedule(&self) -> Result<()> {
        self.validate()?;
        if self.decay_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(invalid(format!("decay epochs must be < epochs ({})", self.epochs)));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate for a 0-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.initial_lr * cfg.decay_factor.powi(k as i32)
}

/// Distillation weights used when the config has none.
///
/// | kind | source | λ | τ |
/// |---|---|---|---|
/// | KDMTS, KDMTS_RA | ARIL | 4 | 8 |
/// | WIMUSE | ARIL | 8 | 8 |
/// | distilled | CSIDA, Widar3 | 2 | 2 |
/// | distilled | synthetic | 2 | 2 |
///
/// Task weights are 1. Only the distilled kinds read λ and τ.
pub fn preset_hyper(kind: ModelKind, source: DataSource, tasks: &[&str]) -> HyperParams {
    let (lambda, tau) = match (source, kind) {
        (DataSource::Aril, ModelKind::Wimuse) => (8.0, 8.0),
        (DataSource::Aril, _) => (4.0, 8.0),
        _ => (2.0, 2.0),
    };
    HyperParams::uniform(tasks, lambda, tau)
}

/// Batches of sample indices for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch.{epoch}")));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Adam with per-array moment buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable array of `m` from its accumulated gradient.
    pub fn step(&mut self, m: &mut dyn Module, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = (lr / c1) as f32;
        let (b1f, b2f) = (b1 as f32, b2 as f32);
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        let moments = &mut self.moments;
        m.visit_mut("", &mut |name, p| {
            if !p.is_trainable() {
                return;
            }
            let (mm, vv) = moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.numel()], vec![0.0; p.numel()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                mm[i] = b1f * mm[i] + (1.0 - b1f) * g;
                vv[i] = b2f * vv[i] + (1.0 - b2f) * g * g;
                p.value[i] -= step_size * mm[i] / (vv[i].sqrt() / c2_sqrt + eps);
            }
        });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskEpoch {
    pub ce: f64,
    pub kd1: f64,
    pub kd2: f64,
    /// Accuracy of training-mode predictions accumulated over the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean objective value over the epoch's batches.
    pub loss: f64,
    pub ce: f64,
    pub kd1: f64,
    pub kd2: f64,
    pub train: BTreeMap<String, TaskEpoch>,
    /// Present on evaluation epochs, for every model task.
    pub test_accuracy: Option<BTreeMap<String, f64>>,
    /// Evaluation-mode training accuracy, present when an accuracy target is set.
    pub eval_train_accuracy: Option<BTreeMap<String, f64>>,
    pub seconds: f64,
}

impl EpochRecord {
    /// The key=value metrics-log line.
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} lr={:e} loss={:.6} ce={:.6} kd1={:.6} kd2={:.6}",
            self.epoch, self.lr, self.loss, self.ce, self.kd1, self.kd2
        );
        for (t, e) in &self.train {
            s += &format!(
                " {t}.ce={:.6} {t}.kd1={:.6} {t}.kd2={:.6} {t}.train_acc={:.4}",
                e.ce, e.kd1, e.kd2, e.train_accuracy
            );
        }
        for (t, a) in self.eval_train_accuracy.iter().flatten() {
            s += &format!(" {t}.eval_train_acc={a:.4}");
        }
        for (t, a) in self.test_accuracy.iter().flatten() {
            s += &format!(" {t}.test_acc={a:.4}");
        }
        s + &format!(" seconds={:.3}", self.seconds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub tasks: Vec<String>,
    pub trained_tasks: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_mean_test_accuracy: Option<f64>,
    pub stopped_early: bool,
    pub trainable_parameters: usize,
    pub optimizer_steps: u64,
    pub wall_clock_s: f64,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }

    /// Test accuracies from the last evaluation epoch.
    pub fn final_test_accuracy(&self) -> Option<&BTreeMap<String, f64>> {
        self.epochs.iter().rev().find_map(|e| e.test_accuracy.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelVariant,
    /// Highest mean test accuracy; `None` without a test set.
    pub best: Option<ModelVariant>,
    pub report: TrainReport,
}

/// Accuracy per model task, evaluation mode.
pub fn accuracy(model: &ModelVariant, ds: &CsiDataset) -> Result<BTreeMap<String, f64>> {
    let preds = predict_dataset(model, ds, 32)?;
    preds
        .into_iter()
        .map(|(t, p)| {
            let y = ds.labels_for(&t)?;
            let hit = p.iter().zip(&y).filter(|(a, b)| a == b).count();
            Ok((t, hit as f64 / y.len().max(1) as f64))
        })
        .collect()
}

fn check_dataset(model: &ModelVariant, ds: &CsiDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let g = model.geometry;
    if ds.meta.shape() != [g.links, g.subcarriers, g.packets] {
        return Err(Error::GeometryMismatch(format!(
            "dataset is {:?}, model expects {g}",
            ds.meta.shape()
        )));
    }
    for spec in model.tasks() {
        match ds.meta.task(&spec.name) {
            None => return Err(Error::UnknownTask(spec.name.clone())),
            Some(t) if t.num_classes != spec.num_classes => {
                return Err(invalid(format!(
                    "task {}: dataset has {} classes, model {}",
                    spec.name, t.num_classes, spec.num_classes
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn to_tensor(shape: [usize; 3], x: &[f64]) -> Tensor {
    Tensor::from_vec(shape, x.iter().map(|&v| v as f32).collect())
}

/// One forward, loss and backward pass over `batch`; gradients are left in
/// the model (call [`Adam::step`] afterwards). Returns the loss and the
/// training-mode predictions per trained task.
pub fn train_step(
    model: &mut ModelVariant,
    batch: &[&CsiSample],
    hyper: &HyperParams,
) -> Result<(BatchLoss, BTreeMap<String, Vec<usize>>)> {
    let x = to_input(batch)?;
    let out = model.forward_train(&x)?;
    let trained: Vec<String> = model
        .heads
        .iter()
        .filter(|h| !(h.classifier.is_frozen() && h.adaptor.as_ref().is_none_or(|a| a.is_frozen())))
        .map(|h| h.spec.name.clone())
        .collect();
    if trained.is_empty() {
        return Err(Error::Frozen("no trainable task head".into()));
    }
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut teacher = Vec::new();
    for t in &trained {
        logits.push(to_f64(&out.logits[t].data));
        labels.push(batch.iter().map(|s| s.label(t)).collect::<Result<Vec<_>>>()?);
        teacher.push(match (out.teacher_features.get(t), out.teacher_logits.get(t)) {
            (Some(f), Some(z)) => Some((
                to_f64(&f.data),
                f.len(),
                to_f64(&z.data),
                to_f64(&model.head(t)?.lt.as_ref().ok_or_else(|| invalid("missing transform"))?.value),
            )),
            _ => None,
        });
    }
    let tasks: Vec<TaskBatch> = trained
        .iter()
        .enumerate()
        .map(|(i, t)| TaskBatch {
            name: t,
            logits: &logits[i],
            num_classes: out.logits[t].channels(),
            labels: &labels[i],
            teacher: teacher[i].as_ref().map(|(f, fl, z, lt)| TeacherBatch {
                feature: f,
                feature_len: *fl,
                logits: z,
                lt,
            }),
        })
        .collect();
    let common = to_f64(&out.common_feature.data);
    let common_batch = CommonBatch {
        feature: &common,
        channels: out.common_feature.channels(),
        len: out.common_feature.len(),
    };
    let log_vars: Vec<f64> = trained
        .iter()
        .map(|t| Ok(model.head(t)?.log_var.as_ref().map_or(0.0, |p| p.value[0] as f64)))
        .collect::<Result<_>>()?;
    let objective = match model.kind {
        ModelKind::Sts | ModelKind::Nmts => Objective::WeightedCe,
        ModelKind::Umts => Objective::Uncertainty(&log_vars),
        k => Objective::Distill {
            logits: k.uses_logits_kd(),
        },
    };
    let loss = batch_loss(&tasks, Some(common_batch), hyper, objective)?;
    if loss.degenerate_kd > 0 {
        log::warn!("{} samples had a zero-norm feature in distillation", loss.degenerate_kd);
    }

    model.zero_grad();
    let grads = OutputGrads {
        logits: trained
            .iter()
            .map(|t| (t.clone(), to_tensor(out.logits[t].shape, &loss.d_logits[t])))
            .collect(),
        common_feature: (!loss.d_common.is_empty()).then(|| to_tensor(out.common_feature.shape, &loss.d_common)),
    };
    model.backward(&grads)?;
    for (i, t) in trained.iter().enumerate() {
        let h = model.head_mut(t)?;
        if let (Some(lt), Some(d)) = (h.lt.as_mut(), loss.d_lt.get(t)) {
            if lt.is_trainable() {
                lt.grad.iter_mut().zip(d).for_each(|(g, d)| *g += *d as f32);
            }
        }
        if let (Some(lv), Some(d)) = (h.log_var.as_mut(), loss.d_log_vars.get(i)) {
            if lv.is_trainable() {
                lv.grad[0] += *d as f32;
            }
        }
    }
    let mut preds = predict(&out);
    preds.retain(|t, _| trained.contains(t));
    Ok((loss, preds))
}

fn append_log(path: &PathBuf, line: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// The shared loop behind every training entry point.
pub fn fit(
    mut model: ModelVariant,
    train: &CsiDataset,
    test: Option<&CsiDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(&model, train)?;
    if let Some(t) = test {
        check_dataset(&model, t)?;
    }
    let names = model.task_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let hyper = cfg
        .hyper
        .clone()
        .unwrap_or_else(|| preset_hyper(model.kind, train.meta.source, &name_refs));
    hyper.validate()?;

    let started = Instant::now();
    let teacher_digests = model.teacher_digests();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = TrainReport {
        kind: model.kind.to_string(),
        tasks: names.clone(),
        trainable_parameters: model.trainable_parameters(),
        ..Default::default()
    };
    let mut best: Option<(f64, ModelVariant)> = None;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let lr = lr_at(epoch, cfg);
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        let mut rec = EpochRecord {
            epoch,
            lr,
            ..Default::default()
        };
        let mut hits: BTreeMap<String, usize> = BTreeMap::new();
        for idx in &batches {
            let samples: Vec<&CsiSample> = idx.iter().map(|&i| &train.samples[i]).collect();
            let (loss, preds) = train_step(&mut model, &samples, &hyper)?;
            if !loss.total.is_finite() {
                return Err(invalid(format!("loss became non-finite at epoch {epoch}")));
            }
            adam.step(&mut model, lr);
            let w = idx.len() as f64;
            rec.loss += loss.total * w;
            rec.ce += loss.ce * w;
            rec.kd1 += loss.kd1 * w;
            rec.kd2 += loss.kd2 * w;
            for (t, terms) in &loss.per_task {
                let e = rec.train.entry(t.clone()).or_default();
                e.ce += terms.ce * w;
                e.kd1 += terms.kd1 * w;
                e.kd2 += terms.kd2 * w;
            }
            for (t, p) in preds {
                let h = hits.entry(t.clone()).or_default();
                *h += p.iter().zip(&samples).filter(|(p, s)| s.labels.get(&t) == Some(p)).count();
            }
        }
        let n = train.len() as f64;
        rec.loss /= n;
        rec.ce /= n;
        rec.kd1 /= n;
        rec.kd2 /= n;
        for (t, e) in rec.train.iter_mut() {
            e.ce /= n;
            e.kd1 /= n;
            e.kd2 /= n;
            e.train_accuracy = hits.get(t).copied().unwrap_or(0) as f64 / n;
        }
        let last = epoch + 1 == cfg.epochs;
        let mut reached = false;
        if let Some(target) = cfg.target_train_accuracy {
            // evaluation mode is only checked once the running accuracy is close
            if rec.train.values().all(|e| e.train_accuracy >= target - 0.05) || last {
                let acc = accuracy(&model, train)?;
                reached = rec.train.keys().all(|t| acc[t] >= target);
                rec.eval_train_accuracy = Some(acc);
            }
        }
        if let Some(ts) = test {
            if last || reached || (epoch + 1) % cfg.eval_every == 0 {
                let acc = accuracy(&model, ts)?;
                let mean = acc.values().sum::<f64>() / acc.len() as f64;
                if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                    best = Some((mean, model.clone()));
                    report.best_epoch = Some(epoch);
                    report.best_mean_test_accuracy = Some(mean);
                }
                rec.test_accuracy = Some(acc);
            }
        }
        rec.seconds = t0.elapsed().as_secs_f64();
        let line = rec.log_line();
        log::info!("{} {line}", model.kind);
        if let Some(p) = &cfg.log_path {
            append_log(p, &format!("kind={} {line}", model.kind))?;
        }
        report.epochs.push(rec);
        if reached {
            report.stopped_early = !last;
            break;
        }
    }

    if model.teacher_digests() != teacher_digests {
        return Err(Error::Teacher("teacher parameters changed during training".into()));
    }
    report.optimizer_steps = adam.steps();
    if let Some(dir) = &cfg.checkpoint_dir {
        let fin = dir.join("final.wmck");
        save_checkpoint(&model, Some(&hyper), &fin)?;
        report.final_checkpoint = Some(fin);
        if let Some((_, b)) = &best {
            let p = dir.join("best.wmck");
            save_checkpoint(b, Some(&hyper), &p)?;
            report.best_checkpoint = Some(p);
        }
    }
    report.trained_tasks = report.last().train.keys().cloned().collect();
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        best: best.map(|(_, m)| m),
        report,
    })
}

/// Phase 1: a single-task network for `task`, initialised from `cfg.seed`.
pub fn train_sts(task: &str, train: &CsiDataset, test: Option<&CsiDataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = train
        .meta
        .task(task)
        .cloned()
        .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    let model = build_model(ModelKind::Sts, train.meta_geometry(), &[spec], cfg.seed)?;
    fit(model, train, test, cfg)
}

/// Phase 2: a multi-task model over every task of `train`, distilled from
/// `teachers` for the kinds that need them.
pub fn train_mts(
    kind: ModelKind,
    train: &CsiDataset,
    test: Option<&CsiDataset>,
    teachers: BTreeMap<String, ModelVariant>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if kind == ModelKind::Sts {
        return Err(invalid("use train_sts for single-task models"));
    }
    if !kind.needs_teachers() && !teachers.is_empty() {
        return Err(Error::Teacher(format!("{kind} does not take teachers")));
    }
    let mut model = build_model(kind, train.meta_geometry(), &train.meta.tasks, cfg.seed)?;
    if kind.needs_teachers() {
        for t in model.task_names() {
            if !teachers.contains_key(&t) {
                return Err(Error::Teacher(format!("no teacher for task {t}")));
            }
        }
        for (t, m) in teachers {
            model.attach_teacher(&t, m)?;
        }
    }
    fit(model, train, test, cfg)
}

/// Trains only the parts added by `extend_with_task`. Every other array
/// must still be frozen.
pub fn train_extension(
    ext: ModelVariant,
    train: &CsiDataset,
    test: Option<&CsiDataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let new = ext
        .heads
        .last()
        .ok_or_else(|| invalid("model has no heads"))?
        .spec
        .name
        .clone();
    if !ext.se.is_frozen() || !ext.de.is_frozen() {
        return Err(Error::Frozen("extension training requires a frozen trunk".into()));
    }
    for h in &ext.heads[..ext.heads.len() - 1] {
        let mut frozen = true;
        h.visit_with(&mut |_, p| frozen &= p.frozen);
        if !frozen {
            return Err(Error::Frozen(format!("base head {} is not frozen", h.spec.name)));
        }
    }
    if !ext.teachers.contains_key(&new) {
        return Err(Error::Teacher(format!("no teacher for new task {new}")));
    }
    fit(ext, train, test, cfg)
}

trait MetaGeometry {
    fn meta_geometry(&self) -> crate::net_blocks::Geometry;
}

impl MetaGeometry for CsiDataset {
    fn meta_geometry(&self) -> crate::net_blocks::Geometry {
        crate::net_blocks::Geometry::new(self.meta.links, self.meta.subcarriers, self.meta.packets)
    }
}
