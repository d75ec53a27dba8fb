//! Synthesize a small labelled dataset, write it as a DYCO file and read it back.
//!
//! cargo run --release --example synth_frames -- [out.dyco]

use dyco::signal::{read_frames, synth_dataset, write_frames, DatasetSpec, FrameFile, Modulation};

fn main() -> dyco::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("synth_frames.dyco").display().to_string());
    let spec = DatasetSpec { per_cell: 4, ..DatasetSpec::default() };
    let frames = synth_dataset(&spec, 7)?;
    println!("{} frames, {} samples each", frames.len(), spec.length);

    for m in Modulation::ALL {
        let f = frames.iter().find(|f| f.label == m.id() && f.snr_db == 18).expect("every cell is populated");
        let power: f64 = f.to_complex().iter().map(|s| s.norm_sqr()).sum::<f64>() / f.len() as f64;
        println!("{:>7}  mean power at 18 dB = {power:.3}", m.name());
    }

    write_frames(&out, &FrameFile::new(spec.length, frames.clone()))?;
    let back = read_frames(&out)?;
    assert_eq!(back.frames, frames);
    println!("round trip through {out} is exact");
    Ok(())
}
