//! A few epochs of dynamic-consistency pre-training on a toy dataset, with and
//! without the adversarial view, printing the loss trajectory.

use dyco::backbone::BackboneConfig;
use dyco::pretrain::{PretrainConfig, Pretrainer};
use dyco::signal::{synth_dataset, DatasetSpec};

fn main() -> dyco::Result<()> {
    let frames = synth_dataset(&DatasetSpec { per_cell: 8, ..DatasetSpec::default() }, 2)?;
    for dynamic in [true, false] {
        let cfg = PretrainConfig { epochs: 3, dynamic_consistency: dynamic, seed: 2, ..PretrainConfig::default() };
        let mut tr = Pretrainer::new(cfg, BackboneConfig::default())?;
        let mut log = Vec::new();
        tr.fit(&frames, 3, |m| {
            log.push(m.clone());
            Ok(())
        })?;
        let first = &log[0];
        let last = log.last().expect("at least one step");
        println!(
            "dynamic_consistency={dynamic}: {} steps, loss {:.4} -> {:.4} (sc {:.4} -> {:.4})",
            log.len(),
            first.l_total,
            last.l_total,
            first.l_sc,
            last.l_sc
        );
    }
    Ok(())
}
