//! Scalar objectives in double precision, each with its analytic gradient.
//!
//! Batched objectives take row-major `f64` slices: logits `[B, M]`,
//! features `[B, C, T]`, linear transforms `[C, C]`. Batch reduction is the
//! mean.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net_blocks::adaptive_bins;

/// Lower clamp applied to every probability before taking a logarithm.
pub const LOG_EPS: f64 = 1e-12;
/// Length both features are pooled to before feature distillation.
pub const KD_POOLED_LEN: usize = 10;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    softmax(&z.iter().map(|v| v / tau).collect::<Vec<_>>())
}

/// `−ln p_y` with `p_y` clamped below at [`LOG_EPS`].
pub fn cross_entropy(p: &[f64], y: usize) -> f64 {
    -p[y].max(LOG_EPS).ln()
}

/// Cross-entropy of `softmax(z)` and its gradient with respect to `z`.
pub fn cross_entropy_logits(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let p = softmax(z);
    let loss = cross_entropy(&p, y);
    let mut g = p.clone();
    if p[y] > LOG_EPS {
        g[y] -= 1.0;
    } else {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    (loss, g)
}

/// `Σ_t ω_t · l_t`.
pub fn multitask_ce(losses: &BTreeMap<String, f64>, omega: &BTreeMap<String, f64>) -> Result<f64> {
    losses
        .iter()
        .map(|(t, l)| {
            omega
                .get(t)
                .map(|w| w * l)
                .ok_or_else(|| invalid(format!("no weight for task {t}")))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uncertainty {
    pub value: f64,
    pub d_losses: Vec<f64>,
    pub d_log_vars: Vec<f64>,
}

/// `Σ_t (e^{−s_t}·l_t + s_t)` with learnable log-variances `s_t`.
pub fn uncertainty_weighted(losses: &[f64], log_vars: &[f64]) -> Result<Uncertainty> {
    if losses.len() != log_vars.len() {
        return Err(invalid("one log-variance per task is required"));
    }
    let prec: Vec<f64> = log_vars.iter().map(|s| (-s).exp()).collect();
    Ok(Uncertainty {
        value: losses.iter().zip(log_vars).zip(&prec).map(|((l, s), p)| p * l + s).sum(),
        d_losses: prec.clone(),
        d_log_vars: losses.iter().zip(&prec).map(|(l, p)| 1.0 - p * l).collect(),
    })
}

/// Average-pools `[C, T]` to `[C, KD_POOLED_LEN]`.
pub fn pool_feature(x: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let bins = adaptive_bins(len, KD_POOLED_LEN);
    let mut out = Vec::with_capacity(channels * KD_POOLED_LEN);
    for row in x.chunks_exact(len).take(channels) {
        for &(s, e) in &bins {
            out.push(row[s..e].iter().sum::<f64>() / (e - s) as f64);
        }
    }
    out
}

fn unpool_grad(g: &[f64], channels: usize, len: usize) -> Vec<f64> {
    let bins = adaptive_bins(len, KD_POOLED_LEN);
    let mut out = vec![0.0; channels * len];
    for c in 0..channels {
        for (i, &(s, e)) in bins.iter().enumerate() {
            let v = g[c * KD_POOLED_LEN + i] / (e - s) as f64;
            for x in &mut out[c * len + s..c * len + e] {
                *x += v;
            }
        }
    }
    out
}

/// Returns the unit vector and the gradient map `g ↦ d(x/‖x‖)ᵀg` data; a
/// zero vector maps to zero.
fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        (vec![0.0; x.len()], 0.0)
    } else {
        (x.iter().map(|v| v / n).collect(), n)
    }
}

fn normalize_backward(unit: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; g.len()];
    }
    let dot: f64 = unit.iter().zip(g).map(|(a, b)| a * b).sum();
    unit.iter().zip(g).map(|(u, gi)| (gi - u * dot) / norm).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureKd {
    pub loss: f64,
    /// `[C, T_student]`.
    pub d_student: Vec<f64>,
    /// `[C, T_teacher]`.
    pub d_teacher: Vec<f64>,
    /// `[C, C]`.
    pub d_lt: Vec<f64>,
    /// Set when either normalized vector had zero norm.
    pub degenerate: bool,
}

/// Euclidean distance between the L2-normalized, flattened, length-10
/// pooled features, the student side mixed by `lt` first. Lies in `[0, 2]`.
pub fn feature_kd_loss(
    student: &[f64],
    student_len: usize,
    teacher: &[f64],
    teacher_len: usize,
    lt: &[f64],
    channels: usize,
) -> Result<FeatureKd> {
    if student.len() != channels * student_len || teacher.len() != channels * teacher_len {
        return Err(Error::ShapeMismatch {
            expected: format!("{channels} channels on both features"),
            actual: format!("student {} values, teacher {} values", student.len(), teacher.len()),
        });
    }
    if lt.len() != channels * channels {
        return Err(invalid("linear transform must be C x C"));
    }
    let k = KD_POOLED_LEN;
    let ps = pool_feature(student, channels, student_len);
    let pt = pool_feature(teacher, channels, teacher_len);
    let mut u = vec![0.0; channels * k];
    for i in 0..channels {
        for j in 0..channels {
            let w = lt[i * channels + j];
            if w != 0.0 {
                for t in 0..k {
                    u[i * k + t] += w * ps[j * k + t];
                }
            }
        }
    }
    let (a, na) = normalize(&u);
    let (b, nb) = normalize(&pt);
    let degenerate = na == 0.0 || nb == 0.0;
    if degenerate {
        log::warn!("feature distillation saw a zero-norm feature; mapped to the zero vector");
    }
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let loss = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let g: Vec<f64> = if loss > 0.0 {
        diff.iter().map(|v| v / loss).collect()
    } else {
        vec![0.0; diff.len()]
    };
    let du = normalize_backward(&a, na, &g);
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let dpt = normalize_backward(&b, nb, &neg);
    let mut d_lt = vec![0.0; channels * channels];
    let mut dps = vec![0.0; channels * k];
    for i in 0..channels {
        for j in 0..channels {
            let mut acc = 0.0;
            for t in 0..k {
                acc += du[i * k + t] * ps[j * k + t];
            }
            d_lt[i * channels + j] = acc;
            let w = lt[i * channels + j];
            if w != 0.0 {
                for t in 0..k {
                    dps[j * k + t] += w * du[i * k + t];
                }
            }
        }
    }
    Ok(FeatureKd {
        loss,
        d_student: unpool_grad(&dps, channels, student_len),
        d_teacher: unpool_grad(&dpt, channels, teacher_len),
        d_lt,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// `−Σ P_student · log P_teacher`.
    #[default]
    AsWritten,
    /// `−Σ P_teacher · log P_student`, the usual distillation direction.
    Conventional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsKd {
    pub loss: f64,
    pub d_student: Vec<f64>,
    pub d_teacher: Vec<f64>,
}

/// `−Σ_m P_a,m · ln P_b,m` and its gradients w.r.t. the logits of `a` and `b`.
fn soft_cross_entropy(za: &[f64], zb: &[f64], tau: f64) -> LogitsKd {
    let pa = softmax_scaled(za, tau);
    let pb = softmax_scaled(zb, tau);
    let cost: Vec<f64> = pb.iter().map(|p| -p.max(LOG_EPS).ln()).collect();
    let loss: f64 = pa.iter().zip(&cost).map(|(p, c)| p * c).sum();
    let d_a = pa.iter().zip(&cost).map(|(p, c)| p * (c - loss) / tau).collect();
    let sum_a: f64 = pa.iter().sum();
    let d_b = pb
        .iter()
        .zip(&pa)
        .map(|(b, a)| if *b > LOG_EPS { (b * sum_a - a) / tau } else { 0.0 })
        .collect();
    LogitsKd {
        loss,
        d_student: d_a,
        d_teacher: d_b,
    }
}

pub fn logits_kd_loss(z_student: &[f64], z_teacher: &[f64], tau: f64, direction: KdDirection) -> Result<LogitsKd> {
    if z_student.len() != z_teacher.len() {
        return Err(invalid("student and teacher logits differ in length"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(match direction {
        KdDirection::AsWritten => soft_cross_entropy(z_student, z_teacher, tau),
        KdDirection::Conventional => {
            let r = soft_cross_entropy(z_teacher, z_student, tau);
            LogitsKd {
                loss: r.loss,
                d_student: r.d_teacher,
                d_teacher: r.d_student,
            }
        }
    })
}

/// Weights of the distillation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub omega: BTreeMap<String, f64>,
    pub lambda: f64,
    pub tau: f64,
    #[serde(default)]
    pub kd_direction: KdDirection,
}

impl HyperParams {
    pub fn uniform(tasks: &[&str], lambda: f64, tau: f64) -> Self {
        HyperParams {
            omega: tasks.iter().map(|t| (t.to_string(), 1.0)).collect(),
            lambda,
            tau,
            kd_direction: KdDirection::AsWritten,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.omega.values().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("task weights must be finite and >= 0"));
        }
        if !self.omega.values().any(|w| *w > 0.0) {
            return Err(invalid("at least one task weight must be positive"));
        }
        Ok(())
    }

    pub fn weight(&self, task: &str) -> Result<f64> {
        self.omega
            .get(task)
            .copied()
            .ok_or_else(|| invalid(format!("no weight for task {task}")))
    }
}

/// Frozen-teacher outputs and the student-side transform for one task.
#[derive(Debug, Clone, Copy)]
pub struct TeacherBatch<'a> {
    /// `[B, C, T_teacher]`.
    pub feature: &'a [f64],
    pub feature_len: usize,
    /// `[B, M]`.
    pub logits: &'a [f64],
    /// `[C, C]`.
    pub lt: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct TaskBatch<'a> {
    pub name: &'a str,
    /// `[B, M]`.
    pub logits: &'a [f64],
    pub num_classes: usize,
    pub labels: &'a [usize],
    pub teacher: Option<TeacherBatch<'a>>,
}

/// The student's shared feature, `[B, C, T]`.
#[derive(Debug, Clone, Copy)]
pub struct CommonBatch<'a> {
    pub feature: &'a [f64],
    pub channels: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective<'a> {
    /// `Σ_t ω_t · CE_t`.
    WeightedCe,
    /// Uncertainty-weighted CE with one log-variance per task, in task order.
    Uncertainty(&'a [f64]),
    /// `Σ_t ω_t·CE_t + λ·kd1_t (+ kd2_t when `logits` is set)`.
    Distill { logits: bool },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskTerms {
    pub ce: f64,
    pub kd1: f64,
    pub kd2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BatchLoss {
    pub total: f64,
    /// Weighted contributions summing to `total` (uncertainty terms land in `ce`).
    pub ce: f64,
    pub kd1: f64,
    pub kd2: f64,
    /// Unweighted batch means per task.
    pub per_task: BTreeMap<String, TaskTerms>,
    pub d_logits: BTreeMap<String, Vec<f64>>,
    /// Gradient w.r.t. the common feature; zero-length when no term uses it.
    pub d_common: Vec<f64>,
    pub d_lt: BTreeMap<String, Vec<f64>>,
    pub d_log_vars: Vec<f64>,
    pub degenerate_kd: usize,
}

/// Mean over the batch of the chosen per-sample objective, with gradients.
pub fn batch_loss(
    tasks: &[TaskBatch<'_>],
    common: Option<CommonBatch<'_>>,
    hyper: &HyperParams,
    objective: Objective<'_>,
) -> Result<BatchLoss> {
    let b = tasks.first().map(|t| t.labels.len()).ok_or_else(|| invalid("no tasks"))?;
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    let inv_b = 1.0 / b as f64;
    let mut out = BatchLoss::default();
    let distill = matches!(objective, Objective::Distill { .. });
    if distill {
        let c = common.ok_or_else(|| Error::Teacher("distillation needs the common feature".into()))?;
        out.d_common = vec![0.0; c.feature.len()];
    }
    let mut mean_ce = Vec::with_capacity(tasks.len());
    for task in tasks {
        let m = task.num_classes;
        if task.logits.len() != b * m || task.labels.len() != b {
            return Err(Error::ShapeMismatch {
                expected: format!("{b} x {m} logits for {}", task.name),
                actual: format!("{} logits", task.logits.len()),
            });
        }
        let mut terms = TaskTerms::default();
        let mut dz = vec![0.0; b * m];
        for n in 0..b {
            let (l, g) = cross_entropy_logits(&task.logits[n * m..(n + 1) * m], task.labels[n]);
            terms.ce += l * inv_b;
            for (d, gi) in dz[n * m..(n + 1) * m].iter_mut().zip(g) {
                *d = gi * inv_b;
            }
        }
        mean_ce.push(terms.ce);
        let omega = match objective {
            Objective::Uncertainty(_) => 1.0,
            _ => hyper.weight(task.name)?,
        };
        dz.iter_mut().for_each(|v| *v *= omega);
        if let Objective::Distill { logits } = objective {
            let t = task
                .teacher
                .ok_or_else(|| Error::Teacher(format!("missing teacher outputs for {}", task.name)))?;
            let c = common.unwrap();
            let (cs, ts) = (c.channels * c.len, c.channels * t.feature_len);
            if t.feature.len() != b * ts || t.logits.len() != b * m {
                return Err(Error::Teacher(format!("teacher outputs for {} have the wrong size", task.name)));
            }
            let mut d_lt = vec![0.0; c.channels * c.channels];
            for n in 0..b {
                let f = feature_kd_loss(
                    &c.feature[n * cs..(n + 1) * cs],
                    c.len,
                    &t.feature[n * ts..(n + 1) * ts],
                    t.feature_len,
                    t.lt,
                    c.channels,
                )?;
                out.degenerate_kd += f.degenerate as usize;
                terms.kd1 += f.loss * inv_b;
                let scale = hyper.lambda * inv_b;
                for (d, g) in out.d_common[n * cs..(n + 1) * cs].iter_mut().zip(&f.d_student) {
                    *d += scale * g;
                }
                for (d, g) in d_lt.iter_mut().zip(&f.d_lt) {
                    *d += scale * g;
                }
                if logits {
                    let k = logits_kd_loss(
                        &task.logits[n * m..(n + 1) * m],
                        &t.logits[n * m..(n + 1) * m],
                        hyper.tau,
                        hyper.kd_direction,
                    )?;
                    terms.kd2 += k.loss * inv_b;
                    for (d, g) in dz[n * m..(n + 1) * m].iter_mut().zip(&k.d_student) {
                        *d += g * inv_b;
                    }
                }
            }
            out.kd1 += hyper.lambda * terms.kd1;
            out.kd2 += terms.kd2;
            out.d_lt.insert(task.name.to_string(), d_lt);
        }
        if !matches!(objective, Objective::Uncertainty(_)) {
            out.ce += omega * terms.ce;
        }
        out.d_logits.insert(task.name.to_string(), dz);
        out.per_task.insert(task.name.to_string(), terms);
    }
    if let Objective::Uncertainty(s) = objective {
        let u = uncertainty_weighted(&mean_ce, s)?;
        out.ce = u.value;
        for (task, scale) in tasks.iter().zip(&u.d_losses) {
            out.d_logits
                .get_mut(task.name)
                .unwrap()
                .iter_mut()
                .for_each(|v| *v *= scale);
        }
        out.d_log_vars = u.d_log_vars;
    }
    out.total = out.ce + out.kd1 + out.kd2;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.75, 1e-15));
        // oracle: e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, v) in softmax(&[1.0, 2.0, 3.0]).into_iter().enumerate() {
            assert!(close(v, ((i + 1) as f64).exp() / denom, 1e-15));
        }
        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!(close(cross_entropy(&[0.25; 4], 2), 4f64.ln(), 1e-15));
        assert!(close(cross_entropy(&[0.25, 0.75], 1), -(0.75f64).ln(), 1e-15));
        assert!(close(cross_entropy(&[1.0, 0.0], 1), -(LOG_EPS.ln()), 1e-15));
    }

    #[test]
    fn multitask_examples() {
        let l = |a: f64, b: f64| BTreeMap::from([("GR".to_string(), a), ("IL".to_string(), b)]);
        assert_eq!(multitask_ce(&l(0.3, 0.4), &l(1.0, 1.0)).unwrap(), 0.3 + 0.4);
        assert_eq!(multitask_ce(&l(0.3, 0.4), &l(1.0, 0.0)).unwrap(), 0.3);
        assert_eq!(multitask_ce(&l(0.5, 1.0), &l(2.0, 3.0)).unwrap(), 4.0);
        let missing = BTreeMap::from([("GR".to_string(), 1.0)]);
        assert!(multitask_ce(&l(0.5, 1.0), &missing).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        let u = uncertainty_weighted(&[0.7, 1.3], &[0.0, 0.0]).unwrap();
        assert!(close(u.value, 2.0, 1e-15));
        // analytic optimum of e^{-s} l + s is s = ln l with value 1 + ln l
        let l = 2.5f64;
        let at_opt = uncertainty_weighted(&[l], &[l.ln()]).unwrap();
        assert!(close(at_opt.value, 1.0 + l.ln(), 1e-12));
        assert!(at_opt.d_log_vars[0].abs() < 1e-12);
        for s in [-1.0, 0.5, 2.0] {
            assert!(uncertainty_weighted(&[l], &[l.ln() + s]).unwrap().value > at_opt.value);
        }
        assert!(uncertainty_weighted(&[l], &[1e6]).unwrap().value > 1e5);
    }

    fn identity(c: usize) -> Vec<f64> {
        let mut m = vec![0.0; c * c];
        for i in 0..c {
            m[i * c + i] = 1.0;
        }
        m
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn feature_kd_examples() {
        let c = 3;
        let f: Vec<f64> = (0..c * 12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let r = feature_kd_loss(&f, 12, &f, 12, &identity(c), c).unwrap();
        assert!(r.loss < 1e-12);
        let neg: Vec<f64> = f.iter().map(|v| -v).collect();
        let r = feature_kd_loss(&f, 12, &neg, 12, &identity(c), c).unwrap();
        assert!(close(r.loss, 2.0, 1e-12));
        let z = vec![0.0; c * 12];
        let r = feature_kd_loss(&z, 12, &f, 12, &identity(c), c).unwrap();
        assert!(r.degenerate && close(r.loss, 1.0, 1e-12));
        assert!(feature_kd_loss(&f, 12, &f, 11, &identity(c), c).is_err());
    }

    /// Brute-force oracle: explicit pooling loops, matrix product, norms.
    fn feature_kd_oracle(s: &[f64], ts: usize, t: &[f64], tt: usize, lt: &[f64], c: usize) -> f64 {
        let pool = |x: &[f64], len: usize| -> Vec<Vec<f64>> {
            (0..c)
                .map(|ch| {
                    (0..10)
                        .map(|i| {
                            let start = (i * len) / 10;
                            let end = ((i + 1) * len + 9) / 10;
                            (start..end).map(|k| x[ch * len + k]).sum::<f64>() / (end - start) as f64
                        })
                        .collect()
                })
                .collect()
        };
        let ps = pool(s, ts);
        let pt = pool(t, tt);
        let mut u = vec![];
        for i in 0..c {
            for k in 0..10 {
                u.push((0..c).map(|j| lt[i * c + j] * ps[j][k]).sum::<f64>());
            }
        }
        let v: Vec<f64> = pt.into_iter().flatten().collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter().zip(&v).map(|(a, b)| (a / nu - b / nv).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn feature_kd_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ts, tt) in [(24, 12), (7, 13), (10, 10), (48, 3)] {
            let c = 4;
            let s = random(c * ts, &mut rng);
            let t = random(c * tt, &mut rng);
            let lt = random(c * c, &mut rng);
            let r = feature_kd_loss(&s, ts, &t, tt, &lt, c).unwrap();
            assert!(close(r.loss, feature_kd_oracle(&s, ts, &t, tt, &lt, c), 1e-12));
        }
    }

    #[test]
    fn logits_kd_examples() {
        let r = logits_kd_loss(&[0.0, 0.0], &[0.0, 0.0], 1.0, KdDirection::AsWritten).unwrap();
        assert!(close(r.loss, 2f64.ln(), 1e-15));
        let r = logits_kd_loss(&[3.0, -1.0, 0.5], &[-2.0, 1.0, 4.0], 1e6, KdDirection::AsWritten).unwrap();
        assert!(close(r.loss, 3f64.ln(), 1e-5));
        // direct evaluation at tau = 8
        let tau = 8.0f64;
        let e = (1.0 / tau).exp();
        let p1 = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let p2 = [1.0 / (e + 1.0), e / (e + 1.0)];
        let oracle = -(p1[0] * p2[0].ln() + p1[1] * p2[1].ln());
        let r = logits_kd_loss(&[1.0, 0.0], &[0.0, 1.0], tau, KdDirection::AsWritten).unwrap();
        assert!(close(r.loss, oracle, 1e-14));
        let conv = logits_kd_loss(&[1.0, 0.0], &[0.0, 1.0], tau, KdDirection::Conventional).unwrap();
        assert!(close(conv.loss, -(p2[0] * p1[0].ln() + p2[1] * p1[1].ln()), 1e-14));
        assert!(logits_kd_loss(&[1.0], &[1.0, 2.0], 1.0, KdDirection::AsWritten).is_err());
        assert!(logits_kd_loss(&[1.0], &[1.0], 0.0, KdDirection::AsWritten).is_err());
    }

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut xm = x.to_vec();
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn grad_ok(num: f64, ana: f64) -> bool {
        (num - ana).abs() <= 1e-4 * num.abs().max(ana.abs()).max(1e-3)
    }

    #[test]
    fn logits_kd_gradients_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dir in [KdDirection::AsWritten, KdDirection::Conventional] {
            for _ in 0..20 {
                let zs = random(5, &mut rng);
                let zt = random(5, &mut rng);
                let tau = rng.random_range(0.5..8.0);
                let r = logits_kd_loss(&zs, &zt, tau, dir).unwrap();
                for i in 0..5 {
                    let ns = central_diff(|z| logits_kd_loss(z, &zt, tau, dir).unwrap().loss, &zs, i);
                    let nt = central_diff(|z| logits_kd_loss(&zs, z, tau, dir).unwrap().loss, &zt, i);
                    assert!(grad_ok(ns, r.d_student[i]) && grad_ok(nt, r.d_teacher[i]));
                }
            }
        }
    }

    #[test]
    fn feature_kd_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (c, ts, tt) = (3, 14, 7);
        for _ in 0..5 {
            let s = random(c * ts, &mut rng);
            let t = random(c * tt, &mut rng);
            let lt = random(c * c, &mut rng);
            let r = feature_kd_loss(&s, ts, &t, tt, &lt, c).unwrap();
            for i in 0..s.len() {
                let n = central_diff(|x| feature_kd_loss(x, ts, &t, tt, &lt, c).unwrap().loss, &s, i);
                assert!(grad_ok(n, r.d_student[i]));
            }
            for i in 0..t.len() {
                let n = central_diff(|x| feature_kd_loss(&s, ts, x, tt, &lt, c).unwrap().loss, &t, i);
                assert!(grad_ok(n, r.d_teacher[i]));
            }
            for i in 0..lt.len() {
                let n = central_diff(|x| feature_kd_loss(&s, ts, &t, tt, x, c).unwrap().loss, &lt, i);
                assert!(grad_ok(n, r.d_lt[i]));
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let p = softmax(&z);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn self_distillation_equals_entropy(
            z in prop::collection::vec(-5.0f64..5.0, 2..10),
            tau in 0.1f64..20.0,
        ) {
            let p = softmax_scaled(&z, tau);
            let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            let r = logits_kd_loss(&z, &z, tau, KdDirection::AsWritten).unwrap();
            prop_assert!((r.loss - h).abs() < 1e-9);
        }

        #[test]
        fn cross_entropy_is_non_negative(
            z in prop::collection::vec(-30.0f64..30.0, 2..8),
            y in 0usize..8,
        ) {
            let y = y % z.len();
            prop_assert!(cross_entropy(&softmax(&z), y) >= 0.0);
        }

        #[test]
        fn multitask_is_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, k in 0.0f64..3.0) {
            let w = BTreeMap::from([("x".to_string(), 0.7), ("y".to_string(), 1.9)]);
            let l1 = BTreeMap::from([("x".to_string(), a), ("y".to_string(), b)]);
            let l2 = BTreeMap::from([("x".to_string(), k * a), ("y".to_string(), b)]);
            let lhs = multitask_ce(&l2, &w).unwrap() - multitask_ce(&l1, &w).unwrap();
            prop_assert!((lhs - 0.7 * (k - 1.0) * a).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_kd_stays_in_range_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let c = rng.random_range(1..5);
            let ts = rng.random_range(1..30);
            let tt = rng.random_range(1..30);
            let r = feature_kd_loss(
                &random(c * ts, &mut rng),
                ts,
                &random(c * tt, &mut rng),
                tt,
                &random(c * c, &mut rng),
                c,
            )
            .unwrap();
            assert!((0.0..=2.0 + 1e-12).contains(&r.loss));
        }
    }
}
