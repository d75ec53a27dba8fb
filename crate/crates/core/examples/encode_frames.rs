//! Run the windowed-attention backbone on a batch and inspect its outputs.

use dyco::backbone::{BackboneConfig, Encoder};
use dyco::signal::{batch_tensor, synth_dataset, DatasetSpec};

fn main() -> dyco::Result<()> {
    let frames = synth_dataset(&DatasetSpec { per_cell: 2, ..DatasetSpec::default() }, 1)?;
    let encoder = Encoder::new(BackboneConfig::default(), 1)?;
    println!("backbone with {} parameters", encoder.params.num_scalars());

    let x = batch_tensor(&frames.iter().collect::<Vec<_>>())?;
    let (pooled, z) = encoder.embed(&x)?;
    println!("input {:?} -> pooled {:?}, projection {:?}", x.shape(), pooled.shape(), z.shape());
    for (i, row) in z.rows().take(4).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("frame {i}: |z| = {norm:.12}");
    }
    Ok(())
}
