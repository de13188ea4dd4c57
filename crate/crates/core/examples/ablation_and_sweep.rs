//! Compares variants over seeds, sweeps the training ratio, and writes the
//! CSV and text report tables.

use wimuse::csi_data::{split_dataset, synth_dataset, SynthConfig, GR, IL};
use wimuse::harness::{emit_report, run_ablation, run_ratio_sweep, AblationConfig, ResultRecord, SweepConfig};
use wimuse::model_zoo::ModelKind;
use wimuse::trainer::TrainConfig;

fn main() -> wimuse::Result<()> {
    let ds = synth_dataset(&SynthConfig {
        num_users: 2,
        samples_per_combo: 4,
        ..SynthConfig::default()
    })?
    .select_tasks(&[GR, IL])?;
    let (train, test) = split_dataset(&ds, 0.8, 0)?;
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        decay_epochs: vec![],
        eval_every: 3,
        ..TrainConfig::default()
    };
    let out = std::env::temp_dir().join("wimuse-example-report");

    // distilled variants are skipped here because no teachers are passed
    let ablation = run_ablation(
        &AblationConfig {
            variants: vec![ModelKind::Nmts, ModelKind::Umts, ModelKind::Wimuse],
            seeds: vec![0, 1],
            train: train_cfg.clone(),
        },
        &train,
        &test,
        None,
    )?;
    println!("{}", ablation.summary_table().to_text());
    println!("skipped: {:?}", ablation.skipped);

    let sweep = run_ratio_sweep(
        &SweepConfig {
            ratios: vec![0.2, 0.5, 0.8],
            variants: vec![ModelKind::Nmts],
            seeds: vec![0],
            holdout: 0.2,
            split_seed: 0,
            train: train_cfg,
            teacher: None,
        },
        &ds,
    )?;
    println!("{}", sweep.curves_table().to_text());

    let records: Vec<ResultRecord> = ablation
        .rows
        .iter()
        .flat_map(|r| {
            r.accuracy.iter().map(|(task, a)| ResultRecord {
                dataset: "SYNTH".into(),
                method: r.variant.clone(),
                task: task.clone(),
                accuracy: *a,
                checkpoint_id: r.model_id.clone(),
                dataset_digest: ablation.test_digest.clone(),
            })
        })
        .collect();
    let files = emit_report(&records, &out)?;
    for f in &files.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
