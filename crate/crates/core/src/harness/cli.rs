//! Command-line surface. A TOML file given by `--config` supplies defaults
//! for any flag: top-level keys are global flags, a table named after the
//! subcommand holds its flags. Flags on the command line win.
//!
//! ```toml
//! seed = 3
//! out = "runs/aril"
//!
//! [train-mts]
//! variant = "WIMUSE"
//! teachers = ["runs/gr/final.wmck", "runs/il/final.wmck"]
//! epochs = 500
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{emit_complexity, emit_report, evaluate, profile, run_ablation, run_ratio_sweep, ResultRecord, Table};
use super::{AblationConfig, SweepConfig};
use crate::csi_data::{
    import_dataset, load_dataset, source_tasks, split_dataset, synth_dataset, write_dataset, CsiDataset, DataSource,
    ImportLayout, ImportOptions, SynthConfig,
};
use crate::error::{invalid, Error, Result};
use crate::losses::KdDirection;
use crate::model_zoo::{build_model, extend_with_task, ModelKind, ModelVariant};
use crate::net_blocks::Geometry;
use crate::trainer::{
    load_checkpoint, preset_hyper, train_extension, train_mts, train_sts, TrainConfig, TrainOutcome,
};

#[derive(Debug, Parser)]
#[command(name = "wimuse", version, about = "Gesture, location and user recognition from CSI amplitude", args_override_self = true)]
pub struct Cli {
    /// Seed for data generation, splitting, initialisation and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with flag defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multipath dataset.
    Synth(SynthArgs),
    /// Convert a public dataset layout to the canonical format.
    Import(ImportArgs),
    /// Stratified train/test split.
    Split(SplitArgs),
    /// Train a single-task model (a teacher).
    TrainSts(TrainStsArgs),
    /// Train a multi-task model.
    TrainMts(TrainMtsArgs),
    /// Add a task to a trained WIMUSE model and train the new parts.
    Extend(ExtendArgs),
    /// Accuracy and confusion matrices of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Parameter and multiply-add counts, memory and latency.
    Profile(ProfileArgs),
    /// Compare variants over several seeds.
    Ablate(AblateArgs),
    /// Accuracy against training-set ratio.
    Sweep(SweepArgs),
    /// Render result records as tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    pub gestures: usize,
    #[arg(long, default_value_t = 5)]
    pub locations: usize,
    #[arg(long, default_value_t = 5)]
    pub users: usize,
    #[arg(long, default_value_t = 20)]
    pub per_combo: usize,
    #[arg(long, default_value_t = 1)]
    pub links: usize,
    #[arg(long, default_value_t = 16)]
    pub subcarriers: usize,
    #[arg(long, default_value_t = 128)]
    pub packets: usize,
    #[arg(long, default_value_t = 100.0)]
    pub sampling_rate: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub jitter: f64,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// ARIL, CSIDA or WIDAR3.
    #[arg(long)]
    pub source: DataSource,
    #[arg(long)]
    pub input: PathBuf,
    /// `stacked` or `per-sample`; detected when omitted.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub resample: Option<usize>,
    #[arg(long)]
    pub receiver: Option<usize>,
    #[arg(long)]
    pub one_based_labels: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub ratio: f64,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the learning rate is scaled.
    #[arg(long, value_delimiter = ',')]
    pub decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// `as_written` or `conventional`.
    #[arg(long)]
    pub kd_direction: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Stop once evaluation-mode training accuracy reaches this value.
    #[arg(long)]
    pub target_train_acc: Option<f64>,
}

impl TrainArgs {
    fn config(&self, seed: u64, out: &Path, kind: ModelKind, source: DataSource, tasks: &[String]) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
        let mut hyper = preset_hyper(kind, source, &names);
        if let Some(l) = self.lambda {
            hyper.lambda = l;
        }
        if let Some(t) = self.tau {
            hyper.tau = t;
        }
        if let Some(k) = &self.kd_direction {
            hyper.kd_direction = match k.as_str() {
                "as_written" | "as-written" => KdDirection::AsWritten,
                "conventional" => KdDirection::Conventional,
                o => return Err(invalid(format!("unknown kd direction `{o}`"))),
            };
        }
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            initial_lr: self.lr.unwrap_or(d.initial_lr),
            decay_epochs: self.decay_epochs.clone().unwrap_or(d.decay_epochs),
            decay_factor: self.decay_factor.unwrap_or(d.decay_factor),
            seed,
            hyper: Some(hyper),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            target_train_accuracy: self.target_train_acc,
            checkpoint_dir: Some(out.to_path_buf()),
            log_path: Some(out.join("metrics.log")),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainStsArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct TrainMtsArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub variant: ModelKind,
    /// Comma-separated STS checkpoints, one per task.
    #[arg(long, value_delimiter = ',')]
    pub teachers: Vec<PathBuf>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ExtendArgs {
    /// Trained WIMUSE checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub new_task: String,
    /// STS checkpoint for the new task.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset label in result records; defaults to the data source.
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Method label in result records; defaults to the model kind.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Checkpoint to profile; otherwise a fresh `--variant` model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<ModelKind>,
    /// Task vocabulary for a fresh model.
    #[arg(long, default_value = "ARIL")]
    pub source: DataSource,
    /// Task of a fresh STS model.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub links: usize,
    /// `SxP` (subcarriers x packets).
    #[arg(long, default_value = "52x192")]
    pub input_shape: String,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub teachers: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "KDMTS,KDMTS_RA,WIMUSE")]
    pub variants: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    pub ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "NMTS,WIMUSE")]
    pub variants: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[command(flatten)]
    pub train_args: TrainArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `records.json` files or directories searched recursively for them.
    #[arg(long, value_delimiter = ',', required = true)]
    pub results: Vec<PathBuf>,
}

const SUBCOMMANDS: [&str; 11] = [
    "synth", "import", "split", "train-sts", "train-mts", "extend", "eval", "profile", "ablate", "sweep", "report",
];

fn toml_to_flags(table: &toml::Table, out: &mut Vec<String>) -> Result<()> {
    for (k, v) in table {
        let flag = format!("--{}", k.replace('_', "-"));
        let text = match v {
            toml::Value::Boolean(true) => {
                out.push(flag);
                continue;
            }
            toml::Value::Boolean(false) | toml::Value::Table(_) => continue,
            toml::Value::String(s) => s.clone(),
            toml::Value::Array(a) => a
                .iter()
                .map(|x| match x {
                    toml::Value::String(s) => s.clone(),
                    o => o.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            o => o.to_string(),
        };
        out.push(flag);
        out.push(text);
    }
    Ok(())
}

/// Rewrites `argv` so that config-file values precede command-line ones.
pub fn expand_config(argv: &[String]) -> Result<Vec<String>> {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if a == "--seed" || a == "--out" {
            i += 1;
        } else if sub.is_none() && SUBCOMMANDS.contains(&a.as_str()) {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(si)) = (config, sub) else {
        return Ok(argv.to_vec());
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| invalid(format!("config {}: {}", path.display(), e.message())))?;
    let name = argv[si].as_str();
    let mut injected = Vec::new();
    toml_to_flags(&table, &mut injected)?;
    for key in [name.to_string(), name.replace('-', "_")] {
        if let Some(toml::Value::Table(t)) = table.get(&key) {
            toml_to_flags(t, &mut injected)?;
        }
    }
    let mut out = vec![argv[0].clone(), argv[si].clone()];
    out.extend(injected);
    out.extend(argv[1..si].iter().cloned());
    out.extend(argv[si + 1..].iter().cloned());
    Ok(out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn source_name(ds: &CsiDataset) -> String {
    format!("{:?}", ds.meta.source).to_uppercase()
}

fn load_teachers(paths: &[PathBuf]) -> Result<BTreeMap<String, ModelVariant>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let m = load_checkpoint(p, None)?;
        if m.kind != ModelKind::Sts {
            return Err(Error::Teacher(format!("{} is a {} checkpoint, not STS", p.display(), m.kind)));
        }
        let task = m.heads[0].spec.name.clone();
        if out.insert(task.clone(), m).is_some() {
            return Err(Error::DuplicateTask(task));
        }
    }
    Ok(out)
}

fn finish_training(o: &TrainOutcome, test: Option<&CsiDataset>, out: &Path, method: &str) -> Result<String> {
    write_json(&out.join("train_report.json"), &o.report)?;
    let mut summary = format!("epochs={} seconds={:.1}", o.report.epochs.len(), o.report.wall_clock_s);
    if let Some(ts) = test {
        let r = evaluate(&o.model, ts)?;
        write_json(&out.join("records.json"), &r.records(&source_name(ts), method))?;
        for (t, e) in &r.tasks {
            summary += &format!(" {t}.test_acc={:.4}", e.accuracy);
        }
    }
    Ok(summary)
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X', '×']).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| invalid(format!("bad input shape `{s}`"))))
        .collect::<Result<_>>()?;
    match nums[..] {
        [a, b] => Ok((a, b)),
        [_, a, b] => Ok((a, b)),
        _ => Err(invalid(format!("input shape must be SxP, got `{s}`"))),
    }
}

fn find_records(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_file() {
        out.push(p.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(p)
        .map_err(|e| Error::io(p, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            find_records(&e, out)?;
        } else if e.file_name().is_some_and(|n| n == "records.json") {
            out.push(e);
        }
    }
    Ok(())
}

/// Runs one parsed command; returns the `ok ...` summary line.
pub fn run(cli: Cli) -> Result<String> {
    let out = cli.out.clone();
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                num_gestures: a.gestures,
                num_locations: a.locations,
                num_users: a.users,
                samples_per_combo: a.per_combo,
                links: a.links,
                subcarriers: a.subcarriers,
                packets: a.packets,
                sampling_rate_hz: a.sampling_rate,
                noise_sigma: a.noise,
                jitter: a.jitter,
                seed,
                ..Default::default()
            };
            let ds = synth_dataset(&cfg)?;
            write_dataset(&ds, &out)?;
            Ok(format!("command=synth samples={} out={}", ds.len(), out.display()))
        }
        Command::Import(a) => {
            let mut opts = ImportOptions::new(a.source);
            opts.layout = match a.layout.as_deref() {
                None => None,
                Some("stacked") => Some(ImportLayout::Stacked),
                Some("per-sample" | "per_sample") => Some(ImportLayout::PerSample),
                Some(o) => return Err(invalid(format!("unknown layout `{o}`"))),
            };
            if a.resample.is_some() {
                opts.resample_to = a.resample;
            }
            if let Some(r) = a.receiver {
                opts.receiver = r;
            }
            opts.one_based_labels = a.one_based_labels;
            let ds = import_dataset(&a.input, &opts)?;
            write_dataset(&ds, &out)?;
            Ok(format!("command=import samples={} out={}", ds.len(), out.display()))
        }
        Command::Split(a) => {
            let ds = load_dataset(&a.data)?;
            let (train, test) = split_dataset(&ds, a.ratio, seed)?;
            write_dataset(&train, &out.join("train"))?;
            write_dataset(&test, &out.join("test"))?;
            Ok(format!("command=split train={} test={} out={}", train.len(), test.len(), out.display()))
        }
        Command::TrainSts(a) => {
            let train = load_dataset(&a.train)?;
            let test = a.test.as_deref().map(load_dataset).transpose()?;
            let cfg = a.train_args.config(seed, &out, ModelKind::Sts, train.meta.source, &[a.task.clone()])?;
            let o = train_sts(&a.task, &train, test.as_ref(), &cfg)?;
            let s = finish_training(&o, test.as_ref(), &out, &format!("STS-{}", a.task))?;
            Ok(format!("command=train-sts task={} {s} out={}", a.task, out.display()))
        }
        Command::TrainMts(a) => {
            let train = load_dataset(&a.train)?;
            let test = a.test.as_deref().map(load_dataset).transpose()?;
            let tasks: Vec<String> = train.meta.tasks.iter().map(|t| t.name.clone()).collect();
            let cfg = a.train_args.config(seed, &out, a.variant, train.meta.source, &tasks)?;
            let teachers = load_teachers(&a.teachers)?;
            let o = train_mts(a.variant, &train, test.as_ref(), teachers, &cfg)?;
            let s = finish_training(&o, test.as_ref(), &out, a.variant.as_str())?;
            Ok(format!("command=train-mts variant={} {s} out={}", a.variant, out.display()))
        }
        Command::Extend(a) => {
            let base = load_checkpoint(&a.model, None)?;
            let train = load_dataset(&a.train)?;
            let test = a.test.as_deref().map(load_dataset).transpose()?;
            let spec = train
                .meta
                .task(&a.new_task)
                .cloned()
                .ok_or_else(|| Error::UnknownTask(a.new_task.clone()))?;
            let teacher = load_teachers(std::slice::from_ref(&a.teacher))?
                .remove(&a.new_task)
                .ok_or_else(|| Error::Teacher(format!("teacher checkpoint is not for task {}", a.new_task)))?;
            let ext = extend_with_task(&base, spec, teacher, seed)?;
            let tasks = ext.task_names();
            let cfg = a.train_args.config(seed, &out, ModelKind::Wimuse, train.meta.source, &tasks)?;
            let o = train_extension(ext, &train, test.as_ref(), &cfg)?;
            let s = finish_training(&o, test.as_ref(), &out, &format!("WIMUSE-EXT-{}", a.new_task))?;
            Ok(format!(
                "command=extend new_task={} trainable={} {s} out={}",
                a.new_task,
                o.report.trainable_parameters,
                out.display()
            ))
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.model, None)?;
            let ds = load_dataset(&a.data)?;
            let r = evaluate(&model, &ds)?;
            let dataset = a.dataset_name.unwrap_or_else(|| source_name(&ds));
            let method = a.method.unwrap_or_else(|| model.kind.as_str().to_string());
            write_json(&out.join("eval.json"), &r)?;
            write_json(&out.join("records.json"), &r.records(&dataset, &method))?;
            let mut t = Table::new(format!("{method} on {dataset}"), &["task", "accuracy", "samples"]);
            t.meta("checkpoint", r.model_id.clone());
            t.meta("dataset_digest", r.dataset_digest.clone());
            for (task, e) in &r.tasks {
                t.push(vec![task.clone(), format!("{:.4}", e.accuracy), r.samples.to_string()]);
            }
            t.write(&out, "eval")?;
            let accs: Vec<String> = r.tasks.iter().map(|(k, e)| format!("{k}.acc={:.4}", e.accuracy)).collect();
            Ok(format!("command=eval {} out={}", accs.join(" "), out.display()))
        }
        Command::Profile(a) => {
            let (s, p) = parse_shape(&a.input_shape)?;
            let model = match (&a.model, a.variant) {
                (Some(path), _) => load_checkpoint(path, None)?,
                (None, Some(kind)) => {
                    let mut tasks = source_tasks(a.source)?;
                    if kind == ModelKind::Sts {
                        let name = a.task.clone().unwrap_or_else(|| tasks[0].name.clone());
                        tasks.retain(|t| t.name == name);
                        if tasks.is_empty() {
                            return Err(Error::UnknownTask(name));
                        }
                    } else if a.source == DataSource::Aril || a.source == DataSource::Synth {
                        tasks.truncate(2);
                    }
                    build_model(kind, Geometry::new(a.links, s, p), &tasks, seed)?
                }
                (None, None) => return Err(invalid("profile needs --model or --variant")),
            };
            let r = profile(&model, (s, p), a.batch, a.runs)?;
            write_json(&out.join("profile.json"), &r)?;
            emit_complexity(std::slice::from_ref(&r), &out)?;
            Ok(format!(
                "command=profile kind={} params={} multiadds={} latency_ms={:.3} out={}",
                r.model_kind,
                r.parameters,
                r.multiadds,
                r.latency_ms_median,
                out.display()
            ))
        }
        Command::Ablate(a) => {
            let train = load_dataset(&a.train)?;
            let test = load_dataset(&a.test)?;
            let teachers = if a.teachers.is_empty() {
                None
            } else {
                Some(load_teachers(&a.teachers)?)
            };
            let tasks: Vec<String> = train.meta.tasks.iter().map(|t| t.name.clone()).collect();
            let kind = a.variants.first().copied().unwrap_or(ModelKind::Wimuse);
            let mut tcfg = a.train_args.config(seed, &out, kind, train.meta.source, &tasks)?;
            tcfg.checkpoint_dir = None;
            // λ and τ follow each variant's preset unless given explicitly
            if a.train_args.lambda.is_none() && a.train_args.tau.is_none() {
                tcfg.hyper = None;
            }
            let cfg = AblationConfig {
                variants: a.variants,
                seeds: a.seeds,
                train: tcfg,
            };
            let r = run_ablation(&cfg, &train, &test, teachers.as_ref())?;
            write_json(&out.join("ablation.json"), &r)?;
            r.rows_table().write(&out, "ablation_rows")?;
            r.summary_table().write(&out, "ablation_summary")?;
            let records: Vec<ResultRecord> = r
                .rows
                .iter()
                .flat_map(|row| {
                    row.accuracy.iter().map(|(t, acc)| ResultRecord {
                        dataset: source_name(&test),
                        method: row.variant.clone(),
                        task: t.clone(),
                        accuracy: *acc,
                        checkpoint_id: row.model_id.clone(),
                        dataset_digest: r.test_digest.clone(),
                    })
                })
                .collect();
            write_json(&out.join("records.json"), &records)?;
            Ok(format!(
                "command=ablate rows={} skipped={} out={}",
                r.rows.len(),
                r.skipped.len(),
                out.display()
            ))
        }
        Command::Sweep(a) => {
            let ds = load_dataset(&a.data)?;
            let tasks: Vec<String> = ds.meta.tasks.iter().map(|t| t.name.clone()).collect();
            let kind = a.variants.first().copied().unwrap_or(ModelKind::Nmts);
            let mut tcfg = a.train_args.config(seed, &out, kind, ds.meta.source, &tasks)?;
            tcfg.checkpoint_dir = None;
            if a.train_args.lambda.is_none() && a.train_args.tau.is_none() {
                tcfg.hyper = None;
            }
            let cfg = SweepConfig {
                ratios: a.ratios,
                variants: a.variants,
                seeds: a.seeds,
                holdout: a.holdout,
                split_seed: seed,
                teacher: Some(TrainConfig {
                    hyper: None,
                    log_path: None,
                    ..tcfg.clone()
                }),
                train: tcfg,
            };
            let r = run_ratio_sweep(&cfg, &ds)?;
            write_json(&out.join("sweep.json"), &r)?;
            r.curves_table().write(&out, "sweep_curves")?;
            r.trends_table().write(&out, "sweep_trends")?;
            Ok(format!(
                "command=sweep points={} disjoint={} out={}",
                r.points.len(),
                r.disjoint,
                out.display()
            ))
        }
        Command::Report(a) => {
            let mut files = Vec::new();
            for p in &a.results {
                find_records(p, &mut files)?;
            }
            let mut records: Vec<ResultRecord> = Vec::new();
            for f in &files {
                let text = fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                records.extend(serde_json::from_str::<Vec<ResultRecord>>(&text)?);
            }
            let r = emit_report(&records, &out)?;
            Ok(format!(
                "command=report records={} files={} out={}",
                records.len(),
                r.files.len(),
                out.display()
            ))
        }
    }
}

fn error_line(kind: &str, msg: &str) -> String {
    format!("error kind={kind} message={}", serde_json::Value::String(msg.to_string()))
}

/// Full CLI entry: parses, runs, prints one `ok` or `error` line and
/// returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let argv = match expand_config(&argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            return 1;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run(cli) {
        Ok(s) => {
            println!("ok {s}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn config_values_fill_in_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "seed = 4\nout = \"a\"\n[split]\nratio = 0.5\ndata = \"d\"\n").unwrap();
        let argv = args(&format!("wimuse --config {} split --ratio 0.7", cfg.display()));
        let cli = Cli::try_parse_from(expand_config(&argv).unwrap()).unwrap();
        assert_eq!(cli.seed, 4);
        assert_eq!(cli.out, PathBuf::from("a"));
        match cli.command {
            Command::Split(s) => {
                assert_eq!(s.ratio, 0.7);
                assert_eq!(s.data, PathBuf::from("d"));
            }
            _ => panic!(),
        }
        let argv = args(&format!("wimuse --seed 9 --config {} split", cfg.display()));
        let cli = Cli::try_parse_from(expand_config(&argv).unwrap()).unwrap();
        assert_eq!(cli.seed, 9);
    }

    #[test]
    fn lists_and_variants_parse() {
        let cli = Cli::try_parse_from(args(
            "wimuse train-mts --train t --variant kdmts-ra --teachers a.wmck,b.wmck --decay-epochs 3,5",
        ))
        .unwrap();
        match cli.command {
            Command::TrainMts(m) => {
                assert_eq!(m.variant, ModelKind::KdmtsRa);
                assert_eq!(m.teachers.len(), 2);
                assert_eq!(m.train_args.decay_epochs, Some(vec![3, 5]));
            }
            _ => panic!(),
        }
        assert_eq!(parse_shape("52x192").unwrap(), (52, 192));
        assert_eq!(parse_shape("1x52x192").unwrap(), (52, 192));
        assert!(parse_shape("52").is_err());
    }

    #[test]
    fn errors_are_single_lines() {
        let line = error_line("io", "a\nb \"c\"");
        assert_eq!(line.lines().count(), 1);
        assert!(line.starts_with("error kind=io message="));
        assert_eq!(main_with_args(args("wimuse bogus")), 2);
        assert_eq!(main_with_args(args("wimuse split --data /nonexistent/x")), 1);
    }
}
