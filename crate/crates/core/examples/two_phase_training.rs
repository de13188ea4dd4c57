//! Trains one single-task teacher per task, distils them into a multi-task
//! model with residual adaptors, then adds a new task to the trained model
//! without touching any existing weight.

use std::collections::BTreeMap;

use wimuse::csi_data::{split_dataset, synth_dataset, SynthConfig, GR, IL, UI};
use wimuse::model_zoo::{extend_with_task, ModelKind};
use wimuse::trainer::{accuracy, train_extension, train_mts, train_sts, TrainConfig};

fn main() -> wimuse::Result<()> {
    let ds = synth_dataset(&SynthConfig {
        samples_per_combo: 4,
        ..SynthConfig::default()
    })?;
    let (train, test) = split_dataset(&ds, 0.8, 0)?;
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        decay_epochs: vec![4],
        eval_every: 6,
        ..TrainConfig::default()
    };

    // phase 1: teachers for gesture and location
    let base = train.select_tasks(&[GR, IL])?;
    let base_test = test.select_tasks(&[GR, IL])?;
    let mut teachers = BTreeMap::new();
    for task in [GR, IL] {
        let o = train_sts(task, &base, None, &cfg)?;
        println!("teacher {task}: {:.3}", accuracy(&o.model, &base_test)?[task]);
        teachers.insert(task.to_string(), o.model);
    }

    // phase 2: distillation into the shared model
    let o = train_mts(ModelKind::Wimuse, &base, Some(&base_test), teachers, &cfg)?;
    for e in &o.report.epochs {
        println!("{}", e.log_line());
    }

    // a later task: user identity
    let ui_teacher = train_sts(UI, &train, None, &cfg)?.model;
    let ext = extend_with_task(&o.model, train.meta.task(UI).unwrap().clone(), ui_teacher, 1)?;
    let frozen = ext.frozen_digest();
    let ext = train_extension(ext, &train, Some(&test), &cfg)?;
    assert_eq!(ext.model.frozen_digest(), frozen);
    println!("after extension: {:?}", accuracy(&ext.model, &test)?);
    Ok(())
}
