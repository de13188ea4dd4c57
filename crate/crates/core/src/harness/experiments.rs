use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::table::{pct, Table};
use crate::csi_data::{dataset_digest, split_dataset, CsiDataset};
use crate::error::{invalid, Error, Result};
use crate::model_zoo::{ModelKind, ModelVariant};
use crate::trainer::{accuracy, checkpoint_id, train_mts, train_sts, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variants: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.variants.is_empty() {
            return Err(invalid("at least one variant is required"));
        }
        if self.variants.contains(&ModelKind::Sts) {
            return Err(invalid("ablations compare multi-task variants"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// Final-epoch model on the test set.
    pub accuracy: BTreeMap<String, f64>,
    /// Highest-mean-test-accuracy model.
    pub best_accuracy: Option<BTreeMap<String, f64>>,
    pub model_id: String,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub task: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for one seed.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<SummaryRow>,
    /// Variants left out, with the reason.
    pub skipped: Vec<(String, String)>,
    pub test_digest: String,
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn summary_for(&self, variant: ModelKind, task: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.variant == variant.as_str() && s.task == task)
    }

    /// One row per (variant, seed), one column per task.
    pub fn rows_table(&self) -> Table {
        let mut headers = vec!["variant", "seed"];
        headers.extend(self.tasks.iter().map(String::as_str));
        let mut t = Table::new("test accuracy (%) per seed, final model", &headers);
        t.meta("test_digest", self.test_digest.clone());
        for r in &self.rows {
            let mut row = vec![r.variant.clone(), r.seed.to_string()];
            row.extend(self.tasks.iter().map(|k| pct(r.accuracy[k])));
            t.push(row);
        }
        t
    }

    /// Mean ± std per variant and task.
    pub fn summary_table(&self) -> Table {
        let mut headers = vec!["variant"];
        headers.extend(self.tasks.iter().map(String::as_str));
        headers.push("Average");
        let mut t = Table::new("test accuracy (%) mean ± std over seeds", &headers);
        t.meta("test_digest", self.test_digest.clone());
        let variants: Vec<String> = self.rows.iter().fold(Vec::new(), |mut v, r| {
            if !v.contains(&r.variant) {
                v.push(r.variant.clone());
            }
            v
        });
        for v in variants {
            let mut row = vec![v.clone()];
            let mut avg = Vec::new();
            for task in &self.tasks {
                let s = self.summary.iter().find(|s| s.variant == v && &s.task == task).unwrap();
                row.push(format!("{} ± {}", pct(s.mean), pct(s.std)));
                avg.push(s.mean);
            }
            row.push(pct(avg.iter().sum::<f64>() / avg.len() as f64));
            t.push(row);
        }
        for (v, why) in &self.skipped {
            t.meta(&format!("skipped.{v}"), why.clone());
        }
        t
    }
}

/// Trains and tests every variant under every seed on the same split.
/// Distilled variants are skipped (and listed) when no teachers are given.
pub fn run_ablation(
    cfg: &AblationConfig,
    train: &CsiDataset,
    test: &CsiDataset,
    teachers: Option<&BTreeMap<String, ModelVariant>>,
) -> Result<AblationTable> {
    cfg.validate()?;
    let tasks: Vec<String> = train.meta.tasks.iter().map(|t| t.name.clone()).collect();
    let mut out = AblationTable {
        tasks: tasks.clone(),
        test_digest: dataset_digest(test),
        ..Default::default()
    };
    let mut runnable = Vec::new();
    for &v in &cfg.variants {
        if v.needs_teachers() && teachers.is_none() {
            out.skipped.push((v.as_str().into(), "no teachers supplied".into()));
        } else {
            runnable.push(v);
        }
    }
    if runnable.is_empty() {
        return Err(Error::Teacher("every requested variant needs teachers".into()));
    }
    for &v in &runnable {
        for &seed in &cfg.seeds {
            let tcfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let t = if v.needs_teachers() {
                teachers.unwrap().clone()
            } else {
                BTreeMap::new()
            };
            let o = train_mts(v, train, Some(test), t, &tcfg)?;
            log::info!("ablation {v} seed {seed}: {:.1}s", o.report.wall_clock_s);
            out.rows.push(AblationRow {
                variant: v.as_str().into(),
                seed,
                accuracy: accuracy(&o.model, test)?,
                best_accuracy: o.best.as_ref().map(|b| accuracy(b, test)).transpose()?,
                model_id: checkpoint_id(&o.model)?,
                train_seconds: o.report.wall_clock_s,
            });
        }
        for task in &tasks {
            let xs: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.variant == v.as_str())
                .map(|r| r.accuracy[task])
                .collect();
            let (mean, std) = mean_std(&xs);
            out.summary.push(SummaryRow {
                variant: v.as_str().into(),
                task: task.clone(),
                mean,
                std,
                n: xs.len(),
            });
        }
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// either side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Fractions of the whole dataset used for training.
    pub ratios: Vec<f64>,
    pub variants: Vec<ModelKind>,
    pub seeds: Vec<u64>,
    /// Fraction held out once as the common test pool.
    pub holdout: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    /// Teacher training settings; defaults to `train`.
    pub teacher: Option<TrainConfig>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(invalid("ratios must lie in (0, 1)"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(invalid("holdout must lie in (0, 1)"));
        }
        if let Some(r) = self.ratios.iter().find(|&&r| r > 1.0 - self.holdout + 1e-9) {
            return Err(invalid(format!(
                "ratio {r} exceeds the {} left after the holdout",
                1.0 - self.holdout
            )));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(invalid("at least one seed and one variant are required"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub variant: String,
    pub seed: u64,
    pub ratio: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub variant: String,
    pub task: String,
    /// Rank correlation of seed-mean accuracy against ratio.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub tasks: Vec<String>,
    pub points: Vec<SweepPoint>,
    pub trends: Vec<Trend>,
    pub test_digest: String,
    /// Train and test sample ids were disjoint at every ratio.
    pub disjoint: bool,
}

impl SweepResult {
    /// Seed-mean accuracy per (variant, task, ratio).
    pub fn curve(&self, variant: &str, task: &str) -> Vec<(f64, f64)> {
        let mut by_ratio: BTreeMap<String, (f64, Vec<f64>)> = BTreeMap::new();
        for p in self.points.iter().filter(|p| p.variant == variant) {
            by_ratio
                .entry(format!("{:.6}", p.ratio))
                .or_insert((p.ratio, Vec::new()))
                .1
                .push(p.accuracy[task]);
        }
        let mut c: Vec<(f64, f64)> = by_ratio.into_values().map(|(r, xs)| (r, mean_std(&xs).0)).collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        c
    }

    pub fn curves_table(&self) -> Table {
        let mut headers = vec!["variant", "ratio"];
        headers.extend(self.tasks.iter().map(String::as_str));
        let mut t = Table::new("test accuracy (%) vs training ratio, seed mean", &headers);
        t.meta("test_digest", self.test_digest.clone());
        t.meta("disjoint", self.disjoint.to_string());
        let variants: BTreeSet<&str> = self.points.iter().map(|p| p.variant.as_str()).collect();
        for v in variants {
            let curves: Vec<Vec<(f64, f64)>> = self.tasks.iter().map(|k| self.curve(v, k)).collect();
            for i in 0..curves[0].len() {
                let mut row = vec![v.to_string(), format!("{:.2}", curves[0][i].0)];
                row.extend(curves.iter().map(|c| pct(c[i].1)));
                t.push(row);
            }
        }
        t
    }

    pub fn trends_table(&self) -> Table {
        let mut t = Table::new("Spearman rank correlation of accuracy with ratio", &["variant", "task", "spearman"]);
        for tr in &self.trends {
            t.push(vec![
                tr.variant.clone(),
                tr.task.clone(),
                tr.spearman.map_or("n/a".into(), |r| format!("{r:.4}")),
            ]);
        }
        t
    }
}

fn ids(ds: &CsiDataset) -> BTreeSet<&str> {
    ds.samples.iter().map(|s| s.sample_id.as_str()).collect()
}

/// Retrains every variant at every training ratio against one fixed
/// held-out test pool.
pub fn run_ratio_sweep(cfg: &SweepConfig, ds: &CsiDataset) -> Result<SweepResult> {
    cfg.validate()?;
    let tasks: Vec<String> = ds.meta.tasks.iter().map(|t| t.name.clone()).collect();
    let (pool, test) = split_dataset(ds, 1.0 - cfg.holdout, cfg.split_seed)?;
    let test_ids = ids(&test);
    let mut out = SweepResult {
        tasks: tasks.clone(),
        test_digest: dataset_digest(&test),
        disjoint: true,
        ..Default::default()
    };
    let teacher_cfg = cfg.teacher.clone().unwrap_or_else(|| cfg.train.clone());
    for (ri, &ratio) in cfg.ratios.iter().enumerate() {
        let n_train = ((ratio * ds.len() as f64).round() as usize).min(pool.len());
        let train = if n_train == pool.len() {
            pool.clone()
        } else {
            split_dataset(&pool, n_train as f64 / pool.len() as f64, cfg.split_seed.wrapping_add(1 + ri as u64))?.0
        };
        for spec in &ds.meta.tasks {
            let present: BTreeSet<usize> = train.labels_for(&spec.name)?.into_iter().collect();
            if present.len() < spec.num_classes {
                return Err(invalid(format!(
                    "ratio {ratio} leaves a class of {} without training samples",
                    spec.name
                )));
            }
        }
        out.disjoint &= ids(&train).is_disjoint(&test_ids);
        for &seed in &cfg.seeds {
            let mut teachers = BTreeMap::new();
            if cfg.variants.iter().any(|v| v.needs_teachers()) {
                for t in &tasks {
                    let tc = TrainConfig {
                        seed,
                        ..teacher_cfg.clone()
                    };
                    teachers.insert(t.clone(), train_sts(t, &train, None, &tc)?.model);
                }
            }
            for &v in &cfg.variants {
                let tcfg = TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                let model = if v == ModelKind::Sts {
                    return Err(invalid("the sweep compares multi-task variants"));
                } else {
                    let t = if v.needs_teachers() { teachers.clone() } else { BTreeMap::new() };
                    train_mts(v, &train, None, t, &tcfg)?.model
                };
                out.points.push(SweepPoint {
                    variant: v.as_str().into(),
                    seed,
                    ratio,
                    train_size: train.len(),
                    test_size: test.len(),
                    accuracy: accuracy(&model, &test)?,
                });
            }
        }
    }
    for &v in &cfg.variants {
        for task in &tasks {
            let c = out.curve(v.as_str(), task);
            let (x, y): (Vec<f64>, Vec<f64>) = c.into_iter().unzip();
            out.trends.push(Trend {
                variant: v.as_str().into(),
                task: task.clone(),
                spearman: spearman(&x, &y),
            });
        }
    }
    Ok(out)
}
