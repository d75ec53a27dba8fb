//! Pre-train, fine-tune the fusion head on an N-shot support set and evaluate
//! on the rest, writing the report and CSVs to a directory.
//!
//! cargo run --release --example fewshot_pipeline -- [out_dir]

use std::fs;

use dyco::backbone::BackboneConfig;
use dyco::fewshot::{confusion_csv, evaluate, make_split, snr_curve_csv, FewShotModel};
use dyco::fusion::FusionConfig;
use dyco::pretrain::{PretrainConfig, Pretrainer};
use dyco::signal::{synth_dataset, DatasetSpec};

fn main() -> dyco::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("fewshot_pipeline"));
    fs::create_dir_all(&out)?;
    let seed = 4;
    let frames = synth_dataset(&DatasetSpec { per_cell: 24, ..DatasetSpec::default() }, seed)?;

    let mut tr = Pretrainer::new(PretrainConfig { seed, ..PretrainConfig::default() }, BackboneConfig::default())?;
    tr.fit(&frames, 4, |_| Ok(()))?;
    println!("pre-trained for {} steps", tr.step());

    let split = make_split(&frames, 5, seed)?;
    let (model, history) = FewShotModel::train(tr.query.clone(), &frames, &split, FusionConfig { seed, ..FusionConfig::default() })?;
    println!("fine-tuned on {} frames, loss {:.3} -> {:.3}", split.support.len(), history[0], history[history.len() - 1]);

    let report = evaluate(&model, &frames, &split)?;
    println!("query accuracy {:.3} on {} frames", report.accuracy, report.total);
    for p in &report.per_snr {
        println!("  {:>3} dB: {:.3}", p.snr_db, p.accuracy);
    }
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("snr_curve.csv"), snr_curve_csv(&report))?;
    fs::write(out.join("confusion.csv"), confusion_csv(&report))?;
    println!("outputs in {}", out.display());
    Ok(())
}
