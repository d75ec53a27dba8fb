//! Dynamic-consistency contrastive pre-training.
//!
//! Each step encodes a weak physical augmentation with the momentum (key)
//! encoder, builds a virtual adversarial view of the clean batch, and trains
//! the query encoder on in-batch InfoNCE over the adversarial view plus a
//! consistency term tying the adversarial embedding to a stop-gradient anchor.

mod losses;
mod vaa;

pub use losses::{info_nce, info_nce_batch, key_distribution, kl_to_reference, sc_loss};
pub use vaa::{random_directions, reference_distribution, vaa_perturb, VaaResult};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentPolicy};
use crate::backbone::{BackboneConfig, Encoder};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};
use crate::rng;
use crate::signal::{batch_tensor, IqFrame};
use crate::tensor::{traced, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Adversarial radius ε.
    pub epsilon: f64,
    /// Finite-difference probe ξ.
    pub xi: f64,
    pub lambda_sc: f64,
    pub tau: f64,
    pub momentum: f64,
    pub power_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub clip_norm: f64,
    /// When false the query view is the clean frame and no consistency term is
    /// used (augmentation-only contrastive learning).
    pub dynamic_consistency: bool,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epsilon: 0.3,
            xi: 1e-6,
            lambda_sc: 0.6,
            tau: 0.2,
            momentum: 0.99,
            power_iters: 1,
            epochs: 50,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            clip_norm: 5.0,
            dynamic_consistency: true,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.xi > 0.0
            && self.tau > 0.0
            && (0.0..=1.0).contains(&self.momentum)
            && self.lambda_sc >= 0.0
            && self.power_iters >= 1
            && self.batch_size >= 2;
        if !ok {
            return Err(Error::invalid(
                "pretrain config needs ε > 0, ξ > 0, τ > 0, m ∈ [0, 1], λ_sc ≥ 0, I_iter ≥ 1, batch ≥ 2",
            ));
        }
        self.augment.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub l_nce: f64,
    pub l_sc: f64,
    pub l_total: f64,
    pub grad_norm: f64,
    pub vaa_fallbacks: usize,
}

/// Query encoder, momentum key encoder and optimizer state.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub query: Encoder,
    pub key: ParamStore,
    pub opt: AdamW,
}

impl Pretrainer {
    pub fn new(config: PretrainConfig, backbone: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let query = Encoder::new(backbone, config.seed)?;
        let key = query.params.clone();
        let opt = AdamW::new(config.optimizer, &query.params);
        Ok(Pretrainer { config, query, key, opt })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    fn key_encoder(&self) -> Encoder {
        Encoder { config: self.query.config.clone(), params: self.key.clone() }
    }

    /// One optimizer step on a batch; `batch_id` keys the augmentation and VAA streams.
    pub fn train_step(&mut self, frames: &[&IqFrame], batch_id: u64) -> Result<StepMetrics> {
        let c = self.config.clone();
        let x = batch_tensor(frames)?;
        let weak: Vec<IqFrame> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| apply_policy(f, &c.augment, &mut rng::named(c.seed, "augment", (batch_id << 16) | i as u64)))
            .collect();
        let x_weak = batch_tensor(&weak.iter().collect::<Vec<_>>())?;
        let keys = self.key_encoder().encode(&x_weak)?;

        let (x_query, anchor, fallbacks) = if c.dynamic_consistency {
            let anchor = self.query.encode(&x)?;
            let reference = reference_distribution(&anchor, &keys, c.tau)?;
            let enc = &self.query;
            let encode = traced(|tape, xv| {
                let p = enc.params.bind(tape, false);
                Ok(enc.forward(&p, xv)?.z)
            });
            let mut r = rng::named(c.seed, "vaa", batch_id);
            let v = vaa_perturb(encode, &x, &reference, &keys, c.tau, c.epsilon, c.xi, c.power_iters, &mut r)?;
            (v.x_adv, Some(anchor), v.fallbacks)
        } else {
            (x.clone(), None, 0)
        };

        let tape = Tape::new();
        let p = self.query.params.bind(&tape, true);
        let q = self.query.forward(&p, tape.constant(x_query))?.z;
        let l_nce = info_nce_batch(q, tape.constant(keys), c.tau)?;
        let (total, l_sc) = match anchor {
            Some(a) if c.lambda_sc > 0.0 => {
                let sc = sc_loss(tape.constant(a), q)?;
                (l_nce.add(&sc.mul_scalar(c.lambda_sc))?, sc.item())
            }
            Some(a) => {
                let sc = sc_loss(tape.constant(a), q)?.item();
                (l_nce, sc)
            }
            None => (l_nce, 0.0),
        };
        let l_total = total.item();
        if !l_total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {} (batch {batch_id}); query param norm {:.6e}, key param norm {:.6e}",
                self.opt.step + 1,
                self.query.params.norm(),
                self.key.norm()
            )));
        }
        let grads = tape.backward(total)?;
        let mut g = p.grads(&grads);
        let grad_norm = clip_global_norm(&mut g, c.clip_norm);
        self.opt.update(&mut self.query.params, &g)?;
        self.key.momentum_update(&self.query.params, c.momentum)?;
        Ok(StepMetrics { step: self.opt.step, l_nce: l_nce.item(), l_sc, l_total, grad_norm, vaa_fallbacks: fallbacks })
    }

    /// Run `epochs` passes over `frames` in seeded shuffled order, calling `log`
    /// after every step.
    pub fn fit(&mut self, frames: &[IqFrame], epochs: usize, mut log: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        let bs = self.config.batch_size;
        if frames.len() < 2 {
            return Err(Error::invalid("pre-training needs at least two frames"));
        }
        let steps_per_epoch = frames.len().div_ceil(bs) as u64;
        let first_epoch = self.opt.step / steps_per_epoch.max(1);
        for epoch in first_epoch..first_epoch + epochs as u64 {
            let mut order: Vec<usize> = (0..frames.len()).collect();
            order.shuffle(&mut rng::named(self.config.seed, "shuffle", epoch));
            for chunk in order.chunks(bs).filter(|c| c.len() >= 2) {
                let batch: Vec<&IqFrame> = chunk.iter().map(|&i| &frames[i]).collect();
                let id = self.opt.step;
                let m = self.train_step(&batch, id)?;
                log(&m)?;
            }
        }
        Ok(())
    }

    /// Query weights, key weights and optimizer moments in one DYTN file, plus
    /// the backbone config next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut all = self.query.params.clone();
        for (k, v) in self.key.iter() {
            all.insert(format!("key.{k}"), v.clone());
        }
        all.extend(&self.opt.state());
        all.save(path)?;
        std::fs::write(crate::backbone::manifest_path(path), serde_json::to_string_pretty(&self.query.config)?)?;
        Ok(())
    }

    /// Resume from [`Pretrainer::save`] output; step numbering continues.
    pub fn resume(config: PretrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let query = Encoder::load(path)?;
        let all = ParamStore::load(path)?;
        let mut key = ParamStore::new();
        for (k, _) in query.params.iter() {
            key.insert(k, all.get(&format!("key.{k}"))?.clone());
        }
        let opt = AdamW::restore(config.optimizer, &query.params, &all)?;
        Ok(Pretrainer { config, query, key, opt })
    }
}

/// Append one JSON line per step.
pub fn write_log_line<W: Write>(w: &mut W, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parse a JSONL training log.
pub fn read_log(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Frames as a `[B, 2, L]` tensor.
pub fn frames_tensor(frames: &[IqFrame]) -> Result<Tensor> {
    batch_tensor(&frames.iter().collect::<Vec<_>>())
}
