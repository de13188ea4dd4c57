//! Imports a stacked NumPy export (`amplitude.npy` plus one label vector per
//! task) in the ARIL layout. A tiny fake export is written first.

use std::path::Path;

use npyz::WriterBuilder;
use wimuse::csi_data::{import_dataset, DataSource, ImportOptions};

fn write_npy<T: npyz::AutoSerialize + Copy>(path: &Path, shape: &[u64], data: &[T]) -> std::io::Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut w = npyz::WriteOptions::new().default_dtype().shape(shape).writer(f).begin_nd()?;
    w.extend(data.iter().copied())?;
    w.finish()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("wimuse-example-aril");
    std::fs::create_dir_all(&dir)?;
    let n = 48usize;
    let amp: Vec<f32> = (0..n * 52 * 192).map(|i| ((i * 31) % 101) as f32 / 100.0).collect();
    write_npy(&dir.join("amplitude.npy"), &[n as u64, 52, 192], &amp)?;
    let gr: Vec<i64> = (0..n as i64).map(|i| i % 6).collect();
    let il: Vec<i64> = (0..n as i64).map(|i| i % 16).collect();
    write_npy(&dir.join("GR.npy"), &[n as u64], &gr)?;
    write_npy(&dir.join("IL.npy"), &[n as u64], &il)?;

    let ds = import_dataset(&dir, &ImportOptions::new(DataSource::Aril))?;
    println!("imported {} samples, geometry {:?}", ds.len(), ds.meta.shape());
    for t in &ds.meta.tasks {
        println!("  {}: {}", t.name, t.class_names.join(", "));
    }
    Ok(())
}
