//! N-shot support/query splits, evaluation reports and their CSV exports.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{prepare_inputs, FusionConfig, FusionModel};
use crate::rng;
use crate::signal::{IqFrame, Modulation};
use crate::tensor::Tensor;

/// Frame indices of the support and query sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    pub n: usize,
    pub seed: u64,
}

fn cells(frames: &[IqFrame]) -> BTreeMap<(u16, i16), Vec<usize>> {
    let mut cells: BTreeMap<(u16, i16), Vec<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        cells.entry((f.label, f.snr_db)).or_default().push(i);
    }
    cells
}

fn class_name(id: u16) -> String {
    Modulation::from_id(id).map(|m| m.name().to_string()).unwrap_or_else(|_| format!("class{id}"))
}

/// Exactly `n` support frames per (class, SNR) cell, sampled without
/// replacement; everything else is query.
pub fn make_split(frames: &[IqFrame], n: usize, seed: u64) -> Result<FewShotSplit> {
    if n == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    let mut support = Vec::new();
    let mut query = Vec::new();
    for ((label, snr), mut idx) in cells(frames) {
        if idx.len() < n + 1 {
            return Err(Error::invalid(format!(
                "cell ({}, {snr} dB) has {} frames; {n}-shot needs at least {}",
                class_name(label),
                idx.len(),
                n + 1
            )));
        }
        let key = ((label as u64) << 16) | (snr as u16 as u64);
        idx.shuffle(&mut rng::named(seed, "split", key));
        support.extend_from_slice(&idx[..n]);
        query.extend_from_slice(&idx[n..]);
    }
    support.sort_unstable();
    query.sort_unstable();
    Ok(FewShotSplit { support, query, n, seed })
}

/// Anything that maps frames to class distributions over `classes()`.
pub trait Classifier {
    /// Dataset labels in column order.
    fn classes(&self) -> &[u16];
    /// `[N, C]` probabilities.
    fn predict_proba(&self, frames: &[IqFrame]) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub snr_db: i16,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_snr: Vec<SnrPoint>,
    /// `confusion[true][pred]` counts in `class_ids` order.
    pub confusion: Vec<Vec<u64>>,
    pub class_ids: Vec<u16>,
    pub class_names: Vec<String>,
    pub total: usize,
    pub n: usize,
    pub seed: u64,
}

/// Column with the highest probability; ties go to the lowest column.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Micro-averaged accuracy, per-SNR accuracy and confusion over the query set.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, frames: &[IqFrame], split: &FewShotSplit) -> Result<EvalReport> {
    let query: Vec<IqFrame> = split.query.iter().map(|&i| frames[i].clone()).collect();
    let classes = model.classes().to_vec();
    let probs = model.predict_proba(&query)?;
    let c = classes.len();
    if probs.shape() != [query.len(), c] {
        return Err(Error::shape("evaluate", format!("probabilities {:?} for {} queries, {c} classes", probs.shape(), query.len())));
    }
    let mut confusion = vec![vec![0u64; c]; c];
    let mut snr: BTreeMap<i16, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (f, row) in query.iter().zip(probs.rows()) {
        let t = classes
            .iter()
            .position(|&k| k == f.label)
            .ok_or_else(|| Error::invalid(format!("query label {} unknown to the model", f.label)))?;
        let p = argmax(row);
        confusion[t][p] += 1;
        let e = snr.entry(f.snr_db).or_default();
        e.1 += 1;
        if p == t {
            correct += 1;
            e.0 += 1;
        }
    }
    let total = query.len();
    Ok(EvalReport {
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        per_snr: snr
            .into_iter()
            .map(|(snr_db, (ok, n))| SnrPoint { snr_db, accuracy: ok as f64 / n as f64, count: n })
            .collect(),
        confusion,
        class_names: classes.iter().map(|&k| class_name(k)).collect(),
        class_ids: classes,
        total,
        n: split.n,
        seed: split.seed,
    })
}

/// `(snr_db, accuracy)` points in ascending SNR order.
pub fn snr_curve(report: &EvalReport) -> Vec<(i16, f64)> {
    report.per_snr.iter().map(|p| (p.snr_db, p.accuracy)).collect()
}

pub fn snr_curve_csv(report: &EvalReport) -> String {
    let mut s = String::from("snr_db,accuracy\n");
    for (snr, acc) in snr_curve(report) {
        s.push_str(&format!("{snr},{acc}\n"));
    }
    s
}

/// Header row of class names, then one row of counts per true class.
pub fn confusion_csv(report: &EvalReport) -> String {
    let mut s = report.class_names.join(",");
    s.push('\n');
    for row in &report.confusion {
        s.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

/// Distinct labels present in a frame set, ascending.
pub fn class_set(frames: &[IqFrame]) -> Vec<u16> {
    let mut v: Vec<u16> = frames.iter().map(|f| f.label).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Frozen encoder plus a fine-tuned fusion head.
#[derive(Clone, Debug)]
pub struct FewShotModel {
    pub encoder: Encoder,
    pub fusion: FusionModel,
}

impl FewShotModel {
    /// Fine-tune a fresh fusion head on the support frames of `split`.
    /// The encoder is only read. Returns the model and its loss history.
    pub fn train(encoder: Encoder, frames: &[IqFrame], split: &FewShotSplit, config: FusionConfig) -> Result<(Self, Vec<f64>)> {
        let classes = class_set(frames);
        let support: Vec<IqFrame> = split.support.iter().map(|&i| frames[i].clone()).collect();
        let labels: Vec<u16> = support.iter().map(|f| f.label).collect();
        let inputs = prepare_inputs(&support, &encoder, &config)?;
        let dim = inputs.contrast.shape()[1];
        let mut fusion = FusionModel::new(config, classes, dim)?;
        let history = fusion.finetune(&inputs, &labels)?;
        Ok((FewShotModel { encoder, fusion }, history))
    }
}

impl Classifier for FewShotModel {
    fn classes(&self) -> &[u16] {
        &self.fusion.classes
    }

    fn predict_proba(&self, frames: &[IqFrame]) -> Result<Tensor> {
        let inputs = prepare_inputs(frames, &self.encoder, &self.fusion.config)?;
        self.fusion.predict_proba(&inputs)
    }
}
