//! Generates a small multipath-simulated CSI dataset, stores it in the
//! canonical directory format, reloads it and splits it.

use wimuse::csi_data::{dataset_digest, load_dataset, split_dataset, synth_dataset, SynthConfig};

fn main() -> wimuse::Result<()> {
    let cfg = SynthConfig {
        samples_per_combo: 2,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg)?;
    println!("{} samples of shape {:?}", ds.len(), ds.meta.shape());
    for t in &ds.meta.tasks {
        println!("  task {} with {} classes", t.name, t.num_classes);
    }

    let dir = std::env::temp_dir().join("wimuse-example-synth");
    wimuse::csi_data::write_dataset(&ds, &dir)?;
    let back = load_dataset(&dir)?;
    assert_eq!(dataset_digest(&back), dataset_digest(&ds));
    println!("written to {} (digest {})", dir.display(), &dataset_digest(&ds)[..16]);

    let (train, test) = split_dataset(&back, 0.8, 0)?;
    println!("split: {} train / {} test", train.len(), test.len());
    Ok(())
}
