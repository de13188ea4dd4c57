//! Evaluates a model on a test split and profiles its cost: parameters,
//! multiply-adds, peak heap use and median latency.

use wimuse::csi_data::{DataSource, TaskSpec};
use wimuse::harness::{evaluate, profile, TrackingAllocator};
use wimuse::model_zoo::{build_model, ModelKind};
use wimuse::net_blocks::Geometry;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() -> wimuse::Result<()> {
    let ds = wimuse::csi_data::synth_dataset(&wimuse::csi_data::SynthConfig {
        samples_per_combo: 1,
        ..Default::default()
    })?;
    let g = Geometry::new(1, 16, 128);
    let model = build_model(ModelKind::Nmts, g, &ds.meta.tasks, 0)?;
    let report = evaluate(&model, &ds)?;
    println!("untrained NMTS on {} samples: mean accuracy {:.3}", report.samples, report.mean_accuracy());

    // cost at the ARIL geometry
    let tasks = wimuse::csi_data::source_tasks(DataSource::Aril)?;
    let aril = Geometry::new(1, 52, 192);
    for kind in [ModelKind::Sts, ModelKind::Nmts, ModelKind::Wimuse] {
        let ts: Vec<TaskSpec> = if kind == ModelKind::Sts {
            tasks[..1].to_vec()
        } else {
            tasks.clone()
        };
        let m = build_model(kind, aril, &ts, 0)?;
        let c = profile(&m, (52, 192), 16, 20)?;
        println!(
            "{:>8}: {} params, {:.2} M multiply-adds, peak {:?} B, {:.2} ms",
            kind.as_str(),
            c.parameters,
            c.multiadds as f64 / 1e6,
            c.peak_memory_bytes,
            c.latency_ms_median
        );
    }
    Ok(())
}
