//! Checks shared by the acceptance suite and the focused integration tests.
//! Each returns `Ok(detail)` on success and `Err(detail)` on failure.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wimuse::csi_data::{resample_time, CsiSample, TaskSpec, GR, IL, UI};
use wimuse::losses::*;
use wimuse::model_zoo::{build_model, to_input, ModelKind};
use wimuse::net_blocks::{DepthProfile, Geometry, Tensor, CHANNELS_PER_LINK};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a tiny floor.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let up = f(&x);
            x[i] = x0 - h;
            let down = f(&x);
            x[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

const H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Worst relative error per named gradient over `instances` random cases.
pub type GradSummary = BTreeMap<String, (f64, usize)>;

fn record(s: &mut GradSummary, name: &str, err: f64) {
    let e = s.entry(name.to_string()).or_insert((0.0, 0));
    e.0 = e.0.max(err);
    e.1 += 1;
}

pub fn gradient_checks(instances: usize, seed: u64) -> GradSummary {
    let mut s = GradSummary::new();
    let mut r = rng(seed);
    for _ in 0..instances {
        // cross-entropy on logits
        let m = r.random_range(2..7);
        let z = uniform(&mut r, m, -3.0, 3.0);
        let y = r.random_range(0..m);
        let (_, g) = cross_entropy_logits(&z, y);
        let n = numeric_grad(&z, H, |z| cross_entropy_logits(z, y).0);
        record(&mut s, "ce.logits", rel_error(&g, &n));

        // feature distillation, unequal lengths
        let c = r.random_range(2..5);
        let (ls, lt) = (r.random_range(3..14), r.random_range(2..9));
        let fs = uniform(&mut r, c * ls, 0.0, 2.0);
        let ft = uniform(&mut r, c * lt, 0.0, 2.0);
        let w = uniform(&mut r, c * c, -1.0, 1.0);
        let f = feature_kd_loss(&fs, ls, &ft, lt, &w, c).unwrap();
        let kd = |a: &[f64], b: &[f64], w: &[f64]| feature_kd_loss(a, ls, b, lt, w, c).unwrap().loss;
        record(&mut s, "kd1.student", rel_error(&f.d_student, &numeric_grad(&fs, H, |x| kd(x, &ft, &w))));
        record(&mut s, "kd1.teacher", rel_error(&f.d_teacher, &numeric_grad(&ft, H, |x| kd(&fs, x, &w))));
        record(&mut s, "kd1.lt", rel_error(&f.d_lt, &numeric_grad(&w, H, |x| kd(&fs, &ft, x))));

        // logits distillation, both directions
        let zs = uniform(&mut r, m, -4.0, 4.0);
        let zt = uniform(&mut r, m, -4.0, 4.0);
        let tau = r.random_range(0.5..8.0);
        for (dir, tag) in [(KdDirection::AsWritten, "as_written"), (KdDirection::Conventional, "conventional")] {
            let k = logits_kd_loss(&zs, &zt, tau, dir).unwrap();
            let ns = numeric_grad(&zs, H, |x| logits_kd_loss(x, &zt, tau, dir).unwrap().loss);
            let nt = numeric_grad(&zt, H, |x| logits_kd_loss(&zs, x, tau, dir).unwrap().loss);
            record(&mut s, &format!("kd2.{tag}.student"), rel_error(&k.d_student, &ns));
            record(&mut s, &format!("kd2.{tag}.teacher"), rel_error(&k.d_teacher, &nt));
        }

        // uncertainty weighting on its own
        let tasks = r.random_range(2..4);
        let l = uniform(&mut r, tasks, 0.1, 3.0);
        let sv = uniform(&mut r, tasks, -1.5, 1.5);
        let u = uncertainty_weighted(&l, &sv).unwrap();
        let nl = numeric_grad(&l, H, |x| uncertainty_weighted(x, &sv).unwrap().value);
        let nsv = numeric_grad(&sv, H, |x| uncertainty_weighted(&l, x).unwrap().value);
        record(&mut s, "umts.losses", rel_error(&u.d_losses, &nl));
        record(&mut s, "umts.log_vars", rel_error(&u.d_log_vars, &nsv));

        batch_gradients(&mut r, &mut s);
    }
    s
}

struct Inst {
    names: Vec<String>,
    ms: Vec<usize>,
    b: usize,
    c: usize,
    len: usize,
    tlen: usize,
    logits: Vec<Vec<f64>>,
    labels: Vec<Vec<usize>>,
    tfeat: Vec<Vec<f64>>,
    tlog: Vec<Vec<f64>>,
    lts: Vec<Vec<f64>>,
    common: Vec<f64>,
}

impl Inst {
    fn random(r: &mut ChaCha8Rng) -> Self {
        let k = r.random_range(2..4);
        let b = r.random_range(1..4);
        let c = r.random_range(2..4);
        let (len, tlen) = (r.random_range(3..12), r.random_range(2..8));
        let names: Vec<String> = [GR, IL, UI][..k].iter().map(|s| s.to_string()).collect();
        let ms: Vec<usize> = (0..k).map(|_| r.random_range(2..6)).collect();
        Inst {
            logits: ms.iter().map(|&m| uniform(r, b * m, -3.0, 3.0)).collect(),
            labels: ms.iter().map(|&m| (0..b).map(|_| r.random_range(0..m)).collect()).collect(),
            tfeat: (0..k).map(|_| uniform(r, b * c * tlen, 0.0, 2.0)).collect(),
            tlog: ms.iter().map(|&m| uniform(r, b * m, -3.0, 3.0)).collect(),
            lts: (0..k).map(|_| uniform(r, c * c, -1.0, 1.0)).collect(),
            common: uniform(r, b * c * len, 0.0, 2.0),
            names,
            ms,
            b,
            c,
            len,
            tlen,
        }
    }

    fn eval(&self, hyper: &HyperParams, objective: Objective) -> BatchLoss {
        let tasks: Vec<TaskBatch> = (0..self.names.len())
            .map(|i| TaskBatch {
                name: &self.names[i],
                logits: &self.logits[i],
                num_classes: self.ms[i],
                labels: &self.labels[i],
                teacher: Some(TeacherBatch {
                    feature: &self.tfeat[i],
                    feature_len: self.tlen,
                    logits: &self.tlog[i],
                    lt: &self.lts[i],
                }),
            })
            .collect();
        let common = CommonBatch {
            feature: &self.common,
            channels: self.c,
            len: self.len,
        };
        batch_loss(&tasks, Some(common), hyper, objective).unwrap()
    }
}

fn batch_gradients(r: &mut ChaCha8Rng, s: &mut GradSummary) {
    let inst = Inst::random(r);
    let names: Vec<&str> = inst.names.iter().map(String::as_str).collect();
    let mut hyper = HyperParams::uniform(&names, r.random_range(0.5..4.0), r.random_range(1.0..8.0));
    for (i, n) in names.iter().enumerate() {
        hyper.omega.insert(n.to_string(), 0.5 + i as f64);
    }
    let obj = Objective::Distill { logits: true };
    let base = inst.eval(&hyper, obj);
    let mut d_logits = Vec::new();
    let mut n_logits = Vec::new();
    for i in 0..names.len() {
        d_logits.extend_from_slice(&base.d_logits[names[i]]);
        n_logits.extend(numeric_grad(&inst.logits[i], H, |x| {
            let mut j = Inst { logits: inst.logits.clone(), ..inst.clone_shallow() };
            j.logits[i] = x.to_vec();
            j.eval(&hyper, obj).total
        }));
    }
    record(s, "eq17.logits", rel_error(&d_logits, &n_logits));
    let nc = numeric_grad(&inst.common, H, |x| {
        let j = Inst { common: x.to_vec(), ..inst.clone_shallow() };
        j.eval(&hyper, obj).total
    });
    record(s, "eq17.common", rel_error(&base.d_common, &nc));
    let mut d_lt = Vec::new();
    let mut n_lt = Vec::new();
    for i in 0..names.len() {
        d_lt.extend_from_slice(&base.d_lt[names[i]]);
        n_lt.extend(numeric_grad(&inst.lts[i], H, |x| {
            let mut j = inst.clone_shallow();
            j.lts[i] = x.to_vec();
            j.eval(&hyper, obj).total
        }));
    }
    record(s, "eq17.lt", rel_error(&d_lt, &n_lt));

    // uncertainty-weighted objective through the batch path
    let sv = uniform(r, names.len(), -1.0, 1.0);
    let u = inst.eval(&hyper, Objective::Uncertainty(&sv));
    let mut d = Vec::new();
    let mut n = Vec::new();
    for i in 0..names.len() {
        d.extend_from_slice(&u.d_logits[names[i]]);
        n.extend(numeric_grad(&inst.logits[i], H, |x| {
            let mut j = inst.clone_shallow();
            j.logits[i] = x.to_vec();
            j.eval(&hyper, Objective::Uncertainty(&sv)).total
        }));
    }
    record(s, "umts.batch.logits", rel_error(&d, &n));
    let nsv = numeric_grad(&sv, H, |x| inst.eval(&hyper, Objective::Uncertainty(x)).total);
    record(s, "umts.batch.log_vars", rel_error(&u.d_log_vars, &nsv));
}

impl Inst {
    fn clone_shallow(&self) -> Inst {
        Inst {
            names: self.names.clone(),
            ms: self.ms.clone(),
            b: self.b,
            c: self.c,
            len: self.len,
            tlen: self.tlen,
            logits: self.logits.clone(),
            labels: self.labels.clone(),
            tfeat: self.tfeat.clone(),
            tlog: self.tlog.clone(),
            lts: self.lts.clone(),
            common: self.common.clone(),
        }
    }
}

pub fn gradient_criterion(instances: usize) -> Check {
    let s = gradient_checks(instances, 2024);
    let worst = s.iter().map(|(_, (e, _))| *e).fold(0.0, f64::max);
    let min_n = s.values().map(|(_, n)| *n).min().unwrap_or(0);
    let detail = format!("{} gradients, >= {min_n} instances each, worst rel err {worst:.2e}", s.len());
    let bad: Vec<String> = s
        .iter()
        .filter(|(_, (e, _))| *e > GRAD_TOL)
        .map(|(k, (e, _))| format!("{k}={e:.2e}"))
        .collect();
    if bad.is_empty() && min_n >= instances {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", bad.join(" ")))
    }
}

/// Independent length arithmetic (conv/pool output formula).
pub fn out_len(len: usize, k: usize, s: usize, p: usize) -> usize {
    (len + 2 * p - k) / s + 1
}

pub struct ExpectedLens {
    pub low: usize,
    pub common: usize,
    pub comp: usize,
}

pub fn expected_lens(packets: usize, profile: DepthProfile) -> ExpectedLens {
    let conv = out_len(packets, 7, 2, 3);
    let low = out_len(conv, 3, 2, 1);
    let strides: &[usize] = match profile {
        DepthProfile::Sts => &[1, 2, 1, 2, 1],
        DepthProfile::Mts => &[1, 2, 1],
    };
    let common = strides.iter().fold(low, |l, &s| out_len(l, 3, s, 1));
    ExpectedLens {
        low,
        common,
        comp: out_len(low, 3, 2, 1),
    }
}

fn tasks_for(n: &[(&str, usize)]) -> Vec<TaskSpec> {
    n.iter().map(|(t, m)| TaskSpec::numbered(*t, "c", *m).unwrap()).collect()
}

/// Runs every kind at `g` and compares logits and feature shapes.
pub fn check_shapes_at(g: Geometry, tasks: &[TaskSpec], x: &Tensor) -> std::result::Result<(), String> {
    let c = CHANNELS_PER_LINK * g.links;
    for kind in ModelKind::ALL {
        let ts: Vec<TaskSpec> = if kind == ModelKind::Sts { tasks[..1].to_vec() } else { tasks.to_vec() };
        let m = build_model(kind, g, &ts, 1).map_err(|e| format!("{kind} at {g}: {e}"))?;
        let o = m.forward_eval(x, false).map_err(|e| format!("{kind} at {g}: {e}"))?;
        let e = expected_lens(g.packets, kind.depth_profile());
        let b = x.batch();
        if o.common_feature.shape != [b, c, e.common] {
            return Err(format!("{kind} at {g}: common {:?} != {:?}", o.common_feature.shape, [b, c, e.common]));
        }
        for t in &ts {
            let z = &o.logits[&t.name];
            if z.shape != [b, t.num_classes, 1] {
                return Err(format!("{kind} at {g}: logits {:?}", z.shape));
            }
            if kind.has_adaptors() && o.comp_features[&t.name].shape != [b, c, e.comp] {
                return Err(format!("{kind} at {g}: comp {:?}", o.comp_features[&t.name].shape));
            }
        }
        if !kind.has_adaptors() && !o.comp_features.is_empty() {
            return Err(format!("{kind} has compensation features"));
        }
    }
    Ok(())
}

fn input(g: Geometry, b: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = b * g.input_channels() * g.packets;
    Tensor::from_vec([b, g.input_channels(), g.packets], (0..n).map(|_| r.random_range(0.0..1.0)).collect())
}

pub fn shape_criterion() -> Check {
    let aril = tasks_for(&[(GR, 6), (IL, 16)]);
    let csida = tasks_for(&[(GR, 6), (IL, 5), (UI, 5)]);
    let widar = tasks_for(&[(GR, 6), (IL, 5), (UI, 16)]);
    check_shapes_at(Geometry::new(1, 52, 192), &aril, &input(Geometry::new(1, 52, 192), 2, 0))?;
    check_shapes_at(Geometry::new(3, 114, 1800), &csida, &input(Geometry::new(3, 114, 1800), 1, 1))?;
    // a raw 3 x 30 x 2000 recording resampled to 1800 packets
    let raw_g = Geometry::new(3, 30, 2000);
    let raw = input(raw_g, 1, 2);
    let labels = BTreeMap::from([(GR.to_string(), 0), (IL.to_string(), 0), (UI.to_string(), 0)]);
    let sample = CsiSample::new("w0", [3, 30, 2000], raw.data.clone(), labels).map_err(|e| e.to_string())?;
    let resampled = resample_time(&sample, 1800).map_err(|e| e.to_string())?;
    if resampled.shape != [3, 30, 1800] {
        return Err(format!("resampled shape {:?}", resampled.shape));
    }
    let x = to_input(&[&resampled]).map_err(|e| e.to_string())?;
    check_shapes_at(Geometry::new(3, 30, 1800), &widar, &x)?;
    let mut r = rng(99);
    let mut seen = Vec::new();
    for i in 0..10 {
        let g = Geometry::new(r.random_range(1..4), r.random_range(1..9), 4 * r.random_range(12..64));
        let ms = [(GR, r.random_range(2..7)), (IL, r.random_range(2..7)), (UI, r.random_range(2..7))];
        check_shapes_at(g, &tasks_for(&ms), &input(g, r.random_range(1..4), 100 + i))?;
        seen.push(g.to_string());
    }
    Ok(format!("3 reference geometries and 10 random ({}) x 6 kinds", seen.join(", ")))
}

// ---------------------------------------------------------------------------
// parameter and cost reconciliation

pub fn aril_tasks() -> (TaskSpec, TaskSpec) {
    (TaskSpec::numbered(GR, "g", 6).unwrap(), TaskSpec::numbered(IL, "l", 16).unwrap())
}

pub const ARIL: Geometry = Geometry {
    links: 1,
    subcarriers: 52,
    packets: 192,
};

fn aril_model(kind: ModelKind, task: Option<&TaskSpec>) -> wimuse::model_zoo::ModelVariant {
    let (gr, il) = aril_tasks();
    let tasks = match task {
        Some(t) => vec![t.clone()],
        None => vec![gr, il],
    };
    build_model(kind, ARIL, &tasks, 0).unwrap()
}

pub fn parameter_criterion() -> Check {
    let (gr, il) = aril_tasks();
    let cases: Vec<(&str, wimuse::model_zoo::ModelVariant, usize)> = vec![
        ("STS-GR", aril_model(ModelKind::Sts, Some(&gr)), 674_566),
        ("STS-IL", aril_model(ModelKind::Sts, Some(&il)), 677_136),
        ("NMTS", aril_model(ModelKind::Nmts, None), 563_222),
        ("UMTS", aril_model(ModelKind::Umts, None), 563_222),
        ("KDMTS", aril_model(ModelKind::Kdmts, None), 563_222),
        ("KDMTS_RA", aril_model(ModelKind::KdmtsRa, None), 662_038),
        ("WIMUSE", aril_model(ModelKind::Wimuse, None), 662_038),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, m, want) in cases {
        let got = m.inference_parameters();
        ok &= got == want;
        parts.push(format!("{name}={got}{}", if got == want { "" } else { "(!)" }));
    }
    if ok {
        Ok(parts.join(" "))
    } else {
        Err(parts.join(" "))
    }
}

pub fn multiadds_criterion() -> Check {
    let (gr, _) = aril_tasks();
    let cases = [
        ("STS-GR", aril_model(ModelKind::Sts, Some(&gr)), 285.56e6),
        ("NMTS", aril_model(ModelKind::Nmts, None), 298.20e6),
        ("WIMUSE", aril_model(ModelKind::Wimuse, None), 411.45e6),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, m, want) in cases {
        let got = m.count_multiadds(16).map_err(|e| e.to_string())? as f64;
        let dev = (got - want) / want;
        ok &= dev.abs() <= 0.01;
        parts.push(format!("{name}={:.2}M ({:+.3}%)", got / 1e6, 100.0 * dev));
    }
    if ok {
        Ok(parts.join(" "))
    } else {
        Err(parts.join(" "))
    }
}

// ---------------------------------------------------------------------------
// loss examples, each against an independent oracle

fn close(a: f64, b: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    if (a - b).abs() <= tol * b.abs().max(1.0) {
        Ok(())
    } else {
        Err(format!("{what}: {a} vs {b}"))
    }
}

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Adaptive average pooling of each channel row to `out` positions.
fn oracle_pool(x: &[f64], channels: usize, len: usize, out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(channels * out);
    for c in 0..channels {
        for i in 0..out {
            let a = (i * len) / out;
            let b = ((i + 1) * len).div_ceil(out);
            let row = &x[c * len..(c + 1) * len];
            y.push(row[a..b].iter().sum::<f64>() / (b - a) as f64);
        }
    }
    y
}

fn oracle_feature_kd(s: &[f64], ls: usize, t: &[f64], lt: usize, w: &[f64], c: usize) -> f64 {
    let ps = oracle_pool(s, c, ls, KD_POOLED_LEN);
    let pt = oracle_pool(t, c, lt, KD_POOLED_LEN);
    let mut mixed = vec![0.0; c * KD_POOLED_LEN];
    for o in 0..c {
        for i in 0..c {
            for k in 0..KD_POOLED_LEN {
                mixed[o * KD_POOLED_LEN + k] += w[o * c + i] * ps[i * KD_POOLED_LEN + k];
            }
        }
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let (a, b) = (unit(&mixed), unit(&pt));
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn oracle_logits_kd(zs: &[f64], zt: &[f64], tau: f64) -> f64 {
    let p1 = oracle_softmax(&zs.iter().map(|v| v / tau).collect::<Vec<_>>());
    let p2 = oracle_softmax(&zt.iter().map(|v| v / tau).collect::<Vec<_>>());
    -p1.iter().zip(&p2).map(|(a, b)| a * b.ln()).sum::<f64>()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn loss_examples() -> std::result::Result<usize, String> {
    let mut n = 0;
    let mut chk = |r: std::result::Result<(), String>| r.map(|_| n += 1);
    // softmax
    let p = softmax(&[0.0, 0.0]);
    chk(close(p[0], 0.5, 1e-12, "softmax sym").and(close(p[1], 0.5, 1e-12, "softmax sym")))?;
    let p = softmax(&[0.0, 3f64.ln()]);
    chk(close(p[0], 0.25, 1e-12, "softmax ln3").and(close(p[1], 0.75, 1e-12, "softmax ln3")))?;
    let p = softmax(&[1.0, 2.0, 3.0]);
    let o = oracle_softmax(&[1.0, 2.0, 3.0]);
    for i in 0..3 {
        chk(close(p[i], o[i], 1e-12, "softmax 123"))?;
    }
    let big = softmax(&[1000.0, 1000.0 + 3f64.ln()]);
    chk(close(big[1], 0.75, 1e-12, "softmax shift"))?;
    // cross-entropy
    chk(close(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0, 1e-12, "ce onehot"))?;
    chk(close(cross_entropy(&[0.2; 5], 3), 5f64.ln(), 1e-12, "ce uniform"))?;
    chk(close(cross_entropy(&[0.25, 0.75], 1), -(0.75f64.ln()), 1e-12, "ce 0.75"))?;
    let ce0 = cross_entropy(&[1.0, 0.0], 1);
    chk(if ce0.is_finite() && ce0 > 20.0 { Ok(()) } else { Err(format!("ce clamp {ce0}")) })?;
    // multi-task sum
    let m = |l: &[(&str, f64)], w: &[(&str, f64)]| {
        let f = |v: &[(&str, f64)]| v.iter().map(|(k, x)| (k.to_string(), *x)).collect::<BTreeMap<_, _>>();
        multitask_ce(&f(l), &f(w))
    };
    chk(close(m(&[("a", 0.3), ("b", 0.9)], &[("a", 1.0), ("b", 1.0)]).unwrap(), 1.2, 1e-12, "ce sum"))?;
    chk(close(m(&[("a", 0.3), ("b", 0.9)], &[("a", 1.0), ("b", 0.0)]).unwrap(), 0.3, 1e-12, "ce first"))?;
    chk(close(m(&[("a", 0.5), ("b", 1.0)], &[("a", 2.0), ("b", 3.0)]).unwrap(), 4.0, 1e-12, "ce 2,3"))?;
    chk(if m(&[("a", 0.5), ("b", 1.0)], &[("a", 2.0)]).is_err() { Ok(()) } else { Err("missing weight accepted".into()) })?;
    // uncertainty weighting
    chk(close(uncertainty_weighted(&[0.4, 1.1], &[0.0, 0.0]).unwrap().value, 1.5, 1e-12, "umts zero"))?;
    for l in [0.3f64, 1.0, 2.5] {
        let at = |s: f64| uncertainty_weighted(&[l], &[s]).unwrap().value;
        let s = l.ln();
        chk(close(at(s), 1.0 + l.ln(), 1e-12, "umts optimum"))?;
        chk(if at(s + 0.05) > at(s) && at(s - 0.05) > at(s) { Ok(()) } else { Err("umts not minimal".into()) })?;
    }
    let grow = uncertainty_weighted(&[1.0], &[1e3]).unwrap().value;
    chk(if grow > 999.0 { Ok(()) } else { Err(format!("umts asymptote {grow}")) })?;
    // feature distillation
    let mut r = rng(5);
    let (c, l) = (3, 7);
    let f = uniform(&mut r, c * l, 0.1, 2.0);
    let eye: Vec<f64> = (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = eye.iter().map(|v| -v).collect();
    chk(close(feature_kd_loss(&f, l, &f, l, &eye, c).unwrap().loss, 0.0, 1e-12, "kd1 aligned"))?;
    chk(close(feature_kd_loss(&f, l, &f, l, &neg, c).unwrap().loss, 2.0, 1e-12, "kd1 antipodal"))?;
    for _ in 0..20 {
        let (ls, lt) = (r.random_range(2..30), r.random_range(2..30));
        let s = uniform(&mut r, c * ls, 0.0, 3.0);
        let t = uniform(&mut r, c * lt, 0.0, 3.0);
        let w = uniform(&mut r, c * c, -1.0, 1.0);
        let got = feature_kd_loss(&s, ls, &t, lt, &w, c).unwrap().loss;
        chk(close(got, oracle_feature_kd(&s, ls, &t, lt, &w, c), 1e-10, "kd1 oracle"))?;
    }
    chk(if feature_kd_loss(&f, l, &f, l, &eye, c + 1).is_err() { Ok(()) } else { Err("kd1 channel mismatch accepted".into()) })?;
    // logits distillation
    let kd = |a: &[f64], b: &[f64], t: f64| logits_kd_loss(a, b, t, KdDirection::AsWritten).unwrap().loss;
    chk(close(kd(&[0.0, 0.0], &[0.0, 0.0], 1.0), 2f64.ln(), 1e-12, "kd2 ln2"))?;
    chk(close(kd(&[3.0, -1.0, 0.5, 2.0], &[-2.0, 4.0, 1.0, 0.0], 1e6), 4f64.ln(), 1e-5, "kd2 hot"))?;
    chk(close(kd(&[1.0, 0.0], &[0.0, 1.0], 8.0), oracle_logits_kd(&[1.0, 0.0], &[0.0, 1.0], 8.0), 1e-12, "kd2 oracle"))?;
    let conv = logits_kd_loss(&[1.0, 0.0], &[0.0, 1.0], 8.0, KdDirection::Conventional).unwrap().loss;
    chk(close(conv, oracle_logits_kd(&[0.0, 1.0], &[1.0, 0.0], 8.0), 1e-12, "kd2 conventional"))?;
    // total loss
    chk(total_loss_examples())?;
    Ok(n)
}

/// Composition, additivity and an equation-by-equation single-sample oracle.
fn total_loss_examples() -> std::result::Result<(), String> {
    let mut r = rng(17);
    let inst = Inst::random(&mut r);
    let names: Vec<&str> = inst.names.iter().map(String::as_str).collect();
    let mut hyper = HyperParams::uniform(&names, 0.0, 4.0);
    hyper.omega.insert(names[0].to_string(), 2.0);
    let own = inst.eval(&hyper, Objective::Distill { logits: false });
    let per: BTreeMap<String, f64> = own.per_task.iter().map(|(k, v)| (k.clone(), v.ce)).collect();
    close(own.total, multitask_ce(&per, &hyper.omega).unwrap(), 1e-12, "composition")?;
    hyper.lambda = 3.0;
    let full = inst.eval(&hyper, Objective::Distill { logits: true });
    let sum: f64 = full
        .per_task
        .iter()
        .map(|(k, v)| hyper.omega[k] * v.ce + hyper.lambda * v.kd1 + v.kd2)
        .sum();
    close(full.total, sum, 1e-9, "additivity")?;
    close(full.total, full.ce + full.kd1 + full.kd2, 1e-9, "component sum")?;

    // one sample, every term by hand
    let mut one = inst.clone_shallow();
    one.b = 1;
    for i in 0..one.names.len() {
        let m = one.ms[i];
        one.logits[i].truncate(m);
        one.tlog[i].truncate(m);
        one.labels[i].truncate(1);
        one.tfeat[i].truncate(one.c * one.tlen);
    }
    one.common.truncate(one.c * one.len);
    let got = one.eval(&hyper, Objective::Distill { logits: true }).total;
    let mut want = 0.0;
    for i in 0..one.names.len() {
        let p = oracle_softmax(&one.logits[i]);
        want += hyper.omega[&one.names[i]] * -p[one.labels[i][0]].ln();
        want += hyper.lambda * oracle_feature_kd(&one.common, one.len, &one.tfeat[i], one.tlen, &one.lts[i], one.c);
        want += oracle_logits_kd(&one.logits[i], &one.tlog[i], hyper.tau);
    }
    close(got, want, 1e-10, "single-sample oracle")
}

pub fn loss_criterion() -> Check {
    let examples = loss_examples()?;
    let mut r = rng(1000);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let c = r.random_range(1..6);
        let (ls, lt) = (r.random_range(1..40), r.random_range(1..40));
        let s = uniform(&mut r, c * ls, -2.0, 2.0);
        let t = uniform(&mut r, c * lt, -2.0, 2.0);
        let w = uniform(&mut r, c * c, -2.0, 2.0);
        let v = feature_kd_loss(&s, ls, &t, lt, &w, c).map_err(|e| e.to_string())?.loss;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo >= 0.0 && hi <= 2.0) {
        return Err(format!("feature distance outside [0,2]: [{lo}, {hi}]"));
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = r.random_range(2..20);
        let z = uniform(&mut r, m, -20.0, 20.0);
        let tau = r.random_range(0.1..10.0);
        let v = logits_kd_loss(&z, &z, tau, KdDirection::AsWritten).unwrap().loss;
        let h = entropy(&oracle_softmax(&z.iter().map(|x| x / tau).collect::<Vec<_>>()));
        worst = worst.max((v - h).abs());
    }
    if worst > 1e-9 {
        return Err(format!("self-distillation differs from entropy by {worst:.2e}"));
    }
    Ok(format!(
        "{examples} examples; feature distance range [{lo:.3}, {hi:.3}] over 1000; self-case max |kd2 - H| = {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// freezing and determinism

use wimuse::csi_data::{split_dataset, synth_dataset, CsiDataset, SynthConfig};
use wimuse::model_zoo::{extend_with_task, ModelVariant};
use wimuse::net_blocks::digest_module;
use wimuse::trainer::{
    checkpoint_id, decode_checkpoint, encode_checkpoint, epoch_batches, train_extension, train_mts, train_sts,
    TrainConfig,
};

pub fn tiny_synth(seed: u64) -> CsiDataset {
    synth_dataset(&SynthConfig {
        num_gestures: 2,
        num_locations: 2,
        num_users: 2,
        samples_per_combo: 4,
        subcarriers: 4,
        packets: 64,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

pub fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        decay_epochs: vec![],
        seed,
        ..TrainConfig::default()
    }
}

fn ensure(ok: bool, what: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn ids(ds: &CsiDataset) -> Vec<String> {
    ds.samples.iter().map(|s| s.sample_id.clone()).collect()
}

fn same_outputs(a: &ModelVariant, b: &ModelVariant, ds: &CsiDataset) -> bool {
    let refs: Vec<&CsiSample> = ds.samples.iter().take(4).collect();
    let x = to_input(&refs).unwrap();
    let (oa, ob) = (a.forward_eval(&x, false).unwrap(), b.forward_eval(&x, false).unwrap());
    oa.logits.iter().all(|(k, z)| z.data.iter().zip(&ob.logits[k].data).all(|(p, q)| p.to_bits() == q.to_bits()))
}

pub fn teachers_for(train: &CsiDataset, tasks: &[&str], cfg: &TrainConfig) -> BTreeMap<String, ModelVariant> {
    tasks
        .iter()
        .map(|t| (t.to_string(), train_sts(t, train, None, cfg).unwrap().model))
        .collect()
}

pub fn freeze_criterion() -> Check {
    let ds = tiny_synth(3);
    let (train, test) = split_dataset(&ds, 0.75, 1).map_err(|e| e.to_string())?;
    let cfg = quick_cfg(2, 5);

    // phase 2 leaves teachers untouched
    let pair = train.select_tasks(&[GR, IL]).map_err(|e| e.to_string())?;
    let teachers = teachers_for(&pair, &[GR, IL], &cfg);
    let before: BTreeMap<String, String> =
        teachers.iter().map(|(t, m)| (t.clone(), digest_module(m, &format!("teacher.{t}")))).collect();
    let init = build_model(ModelKind::Wimuse, geometry_of(&pair), &pair.meta.tasks, cfg.seed).unwrap();
    let out = train_mts(ModelKind::Wimuse, &pair, Some(&test), teachers.clone(), &cfg).map_err(|e| e.to_string())?;
    ensure(out.model.teacher_digests() == before, "teacher digest changed during phase 2")?;
    ensure(
        digest_module(&out.model.de, "de") != digest_module(&init.de, "de"),
        "phase 2 did not update the student trunk",
    )?;

    // extension keeps every existing array
    let ui_teacher = train_sts(UI, &train, None, &cfg).map_err(|e| e.to_string())?.model;
    let ui_spec = train.meta.task(UI).unwrap().clone();
    let ext = extend_with_task(&out.model, ui_spec, ui_teacher, 7).map_err(|e| e.to_string())?;
    let frozen = ext.frozen_digest();
    let teacher_before = ext.teacher_digests();
    let ext_out = train_extension(ext, &train, Some(&test), &cfg).map_err(|e| e.to_string())?;
    ensure(ext_out.model.frozen_digest() == frozen, "extension training changed frozen arrays")?;
    ensure(ext_out.model.teacher_digests() == teacher_before, "extension training changed a teacher")?;

    // same seed, same bits
    let ds2 = tiny_synth(3);
    ensure(wimuse::csi_data::dataset_digest(&ds) == wimuse::csi_data::dataset_digest(&ds2), "synthesis not reproducible")?;
    let (tr2, te2) = split_dataset(&ds2, 0.75, 1).map_err(|e| e.to_string())?;
    ensure(ids(&train) == ids(&tr2) && ids(&test) == ids(&te2), "split not reproducible")?;
    let (tr3, _) = split_dataset(&ds2, 0.75, 2).map_err(|e| e.to_string())?;
    ensure(ids(&train) != ids(&tr3), "split ignores its seed")?;
    let a = build_model(ModelKind::Wimuse, geometry_of(&pair), &pair.meta.tasks, 9).unwrap();
    let b = build_model(ModelKind::Wimuse, geometry_of(&pair), &pair.meta.tasks, 9).unwrap();
    let c = build_model(ModelKind::Wimuse, geometry_of(&pair), &pair.meta.tasks, 10).unwrap();
    ensure(checkpoint_id(&a).unwrap() == checkpoint_id(&b).unwrap(), "initialisation not reproducible")?;
    ensure(checkpoint_id(&a).unwrap() != checkpoint_id(&c).unwrap(), "initialisation ignores its seed")?;
    ensure(epoch_batches(50, 8, 4, 3) == epoch_batches(50, 8, 4, 3), "batch order not reproducible")?;
    ensure(epoch_batches(50, 8, 4, 3) != epoch_batches(50, 8, 4, 4), "batch order repeats across epochs")?;
    let again = train_mts(ModelKind::Wimuse, &pair, Some(&test), teachers, &cfg).map_err(|e| e.to_string())?;
    ensure(
        checkpoint_id(&again.model).unwrap() == checkpoint_id(&out.model).unwrap(),
        "training run not reproducible",
    )?;

    // checkpoint round trip
    for m in [&out.model, &ext_out.model] {
        let bytes = encode_checkpoint(m, None).map_err(|e| e.to_string())?;
        let (back, _) = decode_checkpoint(&bytes, Some(m.geometry)).map_err(|e| e.to_string())?;
        ensure(encode_checkpoint(&back, None).unwrap() == bytes, "checkpoint re-encoding differs")?;
        ensure(back.teacher_digests() == m.teacher_digests(), "checkpoint lost teacher state")?;
        ensure(same_outputs(m, &back, &test), "restored model predicts differently")?;
    }
    Ok("teacher and frozen digests stable; synthesis, split, init, batch order and training reproducible; checkpoints bit-exact".into())
}

pub fn geometry_of(ds: &CsiDataset) -> Geometry {
    let [l, s, p] = ds.meta.shape();
    Geometry::new(l, s, p)
}
