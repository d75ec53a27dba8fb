//! Hierarchical fusion of physical priors with the contrastive feature, and
//! the confidence-weighted ensemble classifier.
//!
//! Stage 1 encodes the priors twice: a small 2D CNN over the four GAF planes
//! and a bidirectional LSTM over the `[P₄; E_reg]` sequence. A softmax gate
//! mixes the two streams into `h_prior`. Stage 2 treats `h_prior` and the
//! backbone feature as two typed tokens, runs one attention block over them
//! and mean-pools. `K` heads each emit a softmax; the prediction is the
//! normalized sum of their elementwise squares.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_attention, window_attention, Encoder};
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_layer_norm, init_linear, Bound, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::priors;
use crate::rng;
use crate::signal::{batch_tensor, IqFrame};
use crate::tensor::{Tape, Tensor, Var};

/// Which backbone output feeds stage 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastFeature {
    #[default]
    Pooled,
    Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub gaf_size: usize,
    pub prior_dim: usize,
    pub fused_dim: usize,
    pub lstm_hidden: usize,
    pub heads: usize,
    pub ensemble: usize,
    pub head_hidden: usize,
    pub contrast_feature: ContrastFeature,
    /// Replace gating and token attention by plain concatenation.
    pub concat_fusion: bool,
    pub optimizer: AdamWConfig,
    pub steps: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            gaf_size: priors::GAF_SIZE,
            prior_dim: 64,
            fused_dim: 64,
            lstm_hidden: 32,
            heads: 2,
            ensemble: 3,
            head_hidden: 32,
            contrast_feature: ContrastFeature::Pooled,
            concat_fusion: false,
            optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
            steps: 100,
            seed: 0,
        }
    }
}

/// Precomputed per-frame inputs of the fusion head.
#[derive(Clone, Debug)]
pub struct FusionInputs {
    /// `[N, 4, S, S]` GASF/GADF of P₄ and E_reg.
    pub gaf: Tensor,
    /// `[N, L, 2]` sequence of (P₄, E_reg) pairs.
    pub seq: Tensor,
    /// `[N, D_c]` backbone feature.
    pub contrast: Tensor,
}

impl FusionInputs {
    pub fn len(&self) -> usize {
        self.gaf.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of every input.
    pub fn select(&self, idx: &[usize]) -> Result<FusionInputs> {
        Ok(FusionInputs { gaf: rows(&self.gaf, idx)?, seq: rows(&self.seq, idx)?, contrast: rows(&self.contrast, idx)? })
    }
}

fn rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = t.shape()[0];
    let per = t.numel() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= n {
            return Err(Error::invalid(format!("row {i} out of {n}")));
        }
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}

/// Priors for every frame plus the chosen backbone feature.
pub fn prepare_inputs(frames: &[IqFrame], encoder: &Encoder, config: &FusionConfig) -> Result<FusionInputs> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames to prepare"));
    }
    let l = frames[0].len();
    let s = config.gaf_size;
    let mut gaf = Vec::with_capacity(frames.len() * 4 * s * s);
    let mut seq = Vec::with_capacity(frames.len() * 2 * l);
    for f in frames {
        let p = priors::extract(f, Some(s))?;
        for plane in p.gaf.as_ref().expect("requested") {
            gaf.extend_from_slice(plane);
        }
        for (a, b) in p.p4.iter().zip(&p.e_reg) {
            seq.push(*a);
            seq.push(*b);
        }
    }
    let x = batch_tensor(&frames.iter().collect::<Vec<_>>())?;
    let (pooled, z) = encoder.embed(&x)?;
    let contrast = match config.contrast_feature {
        ContrastFeature::Pooled => pooled,
        ContrastFeature::Projection => z,
    };
    Ok(FusionInputs {
        gaf: Tensor::new(&[frames.len(), 4, s, s], gaf)?,
        seq: Tensor::new(&[frames.len(), l, 2], seq)?,
        contrast,
    })
}

/// Intermediate values of one forward pass.
pub struct FusionOutput<'t> {
    /// `[B, 2]` stream weights (absent under concatenation fusion).
    pub gate: Option<Var<'t>>,
    pub h_prior: Var<'t>,
    pub h_fused: Var<'t>,
    /// `[B, C]` ensemble distribution.
    pub probs: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    /// Dataset labels in output-column order.
    pub classes: Vec<u16>,
    pub contrast_dim: usize,
    pub params: ParamStore,
}

impl FusionModel {
    pub fn new(config: FusionConfig, classes: Vec<u16>, contrast_dim: usize) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if config.fused_dim % config.heads != 0 {
            return Err(Error::invalid("attention heads must divide the fused dim"));
        }
        let mut r = rng::named(config.seed, "fusion_init", 0);
        let mut p = ParamStore::new();
        let (dp, df, hh) = (config.prior_dim, config.fused_dim, config.lstm_hidden);
        let s = config.gaf_size;
        init_conv(&mut p, "spatial.conv1", &[8, 4, 3, 3], &mut r);
        init_conv(&mut p, "spatial.conv2", &[16, 8, 3, 3], &mut r);
        let side = s.div_ceil(2).div_ceil(2);
        init_linear(&mut p, "spatial.fc", 16 * side * side, dp, &mut r);
        for dir in ["fwd", "bwd"] {
            init_linear(&mut p, &format!("temporal.{dir}.ih"), 2, 4 * hh, &mut r);
            let bound = 1.0 / (hh as f64).sqrt();
            p.insert(format!("temporal.{dir}.hh.w"), Tensor::uniform(&[hh, 4 * hh], bound, &mut r));
        }
        init_linear(&mut p, "temporal.fc", 2 * hh, dp, &mut r);
        if config.concat_fusion {
            init_linear(&mut p, "prior.fc", 2 * dp, dp, &mut r);
            init_linear(&mut p, "fuse.fc", dp + contrast_dim, df, &mut r);
        } else {
            init_linear(&mut p, "gate.fc1", 2 * dp, dp, &mut r);
            init_linear(&mut p, "gate.fc2", dp, 2, &mut r);
            init_linear(&mut p, "prior.fc", dp, dp, &mut r);
            init_linear(&mut p, "token.prior", dp, df, &mut r);
            init_linear(&mut p, "token.contrast", contrast_dim, df, &mut r);
            p.insert("token.type", Tensor::uniform(&[2, df], 0.02, &mut r));
            init_layer_norm(&mut p, "block.ln1", df);
            init_attention(&mut p, "block.attn", df, config.heads, 2, &mut r);
            init_layer_norm(&mut p, "block.ln2", df);
            init_linear(&mut p, "block.mlp.fc1", df, 2 * df, &mut r);
            init_linear(&mut p, "block.mlp.fc2", 2 * df, df, &mut r);
        }
        for k in 0..config.ensemble {
            init_linear(&mut p, &format!("head.{k}.fc1"), df, config.head_hidden, &mut r);
            init_linear(&mut p, &format!("head.{k}.fc2"), config.head_hidden, classes.len(), &mut r);
        }
        Ok(FusionModel { config, classes, contrast_dim, params: p })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn spatial<'t>(&self, p: &Bound<'t>, gaf: Var<'t>) -> Result<Var<'t>> {
        let b = gaf.shape()[0];
        let h = gaf.conv2d(&p.get("spatial.conv1.w")?, Some(&p.get("spatial.conv1.b")?), 2, 1)?.gelu();
        let h = h.conv2d(&p.get("spatial.conv2.w")?, Some(&p.get("spatial.conv2.b")?), 2, 1)?.gelu();
        let n = h.value().numel() / b;
        p.linear("spatial.fc", h.reshape(&[b, n])?)
    }

    fn lstm_direction<'t>(&self, p: &Bound<'t>, dir: &str, xw: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let s = xw.shape();
        let (b, l) = (s[0], s[1]);
        let hh = self.config.lstm_hidden;
        let whh = p.get(&format!("temporal.{dir}.hh.w"))?;
        let tape = xw.tape();
        let mut h = tape.constant(Tensor::zeros(&[b, hh]));
        let mut c = tape.constant(Tensor::zeros(&[b, hh]));
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let gates = xw.slice(1, t, t + 1)?.reshape(&[b, 4 * hh])?.add(&h.matmul(&whh)?)?;
            let hc = gates.lstm_cell(&c)?;
            h = hc.slice(1, 0, hh)?;
            c = hc.slice(1, hh, 2 * hh)?;
        }
        Ok(h)
    }

    fn temporal<'t>(&self, p: &Bound<'t>, seq: Var<'t>) -> Result<Var<'t>> {
        let fwd = self.lstm_direction(p, "fwd", p.linear("temporal.fwd.ih", seq)?, false)?;
        let bwd = self.lstm_direction(p, "bwd", p.linear("temporal.bwd.ih", seq)?, true)?;
        let tape = seq.tape();
        p.linear("temporal.fc", tape.concat(&[fwd, bwd], 1)?)
    }

    /// Full forward pass; `gaf`, `seq`, `contrast` are constants or leaves on one tape.
    pub fn forward<'t>(&self, p: &Bound<'t>, gaf: Var<'t>, seq: Var<'t>, contrast: Var<'t>) -> Result<FusionOutput<'t>> {
        let b = gaf.shape()[0];
        if contrast.shape() != [b, self.contrast_dim] {
            return Err(Error::shape("fusion", format!("contrast feature {:?}, expected [{b}, {}]", contrast.shape(), self.contrast_dim)));
        }
        let tape = gaf.tape();
        let hs = self.spatial(p, gaf)?;
        let ht = self.temporal(p, seq)?;
        let (gate, h_prior, h_fused) = if self.config.concat_fusion {
            let h_prior = p.linear("prior.fc", tape.concat(&[hs, ht], 1)?)?;
            let h_fused = p.linear("fuse.fc", tape.concat(&[h_prior, contrast], 1)?)?.gelu();
            (None, h_prior, h_fused)
        } else {
            let gate = p.linear("gate.fc1", tape.concat(&[hs, ht], 1)?)?.gelu();
            let gate = p.linear("gate.fc2", gate)?.softmax(1)?;
            let mixed = gate.slice(1, 0, 1)?.mul(&hs)?.add(&gate.slice(1, 1, 2)?.mul(&ht)?)?;
            let h_prior = p.linear("prior.fc", mixed)?;
            let h_fused = self.stage2(p, h_prior, contrast)?;
            (Some(gate), h_prior, h_fused)
        };
        let probs = self.ensemble(p, h_fused)?;
        Ok(FusionOutput { gate, h_prior, h_fused, probs })
    }

    /// Two typed tokens through one pre-norm attention block, then their mean.
    pub fn stage2<'t>(&self, p: &Bound<'t>, h_prior: Var<'t>, contrast: Var<'t>) -> Result<Var<'t>> {
        let b = h_prior.shape()[0];
        let df = self.config.fused_dim;
        let tape = h_prior.tape();
        let tp = p.linear("token.prior", h_prior)?.reshape(&[b, 1, df])?;
        let tc = p.linear("token.contrast", contrast)?.reshape(&[b, 1, df])?;
        let x = tape.concat(&[tp, tc], 1)?.add(&p.get("token.type")?)?;
        let a = p.layer_norm("block.ln1", x, 1e-6)?;
        let x = x.add(&window_attention(p, "block.attn", a, self.config.heads, 2)?)?;
        let m = p.layer_norm("block.ln2", x, 1e-6)?;
        let m = p.linear("block.mlp.fc2", p.linear("block.mlp.fc1", m)?.gelu())?;
        x.add(&m)?.mean(1)
    }

    /// `Normalize(Σ_k softmax(head_k(h))²)`.
    pub fn ensemble<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for k in 0..self.config.ensemble {
            let logits = p.linear(&format!("head.{k}.fc2"), p.linear(&format!("head.{k}.fc1"), h)?.gelu())?;
            let sq = logits.softmax(1)?.square();
            acc = Some(match acc {
                Some(a) => a.add(&sq)?,
                None => sq,
            });
        }
        let s = acc.ok_or_else(|| Error::invalid("ensemble needs at least one head"))?;
        let b = s.shape()[0];
        s.div(&s.sum(1)?.reshape(&[b, 1])?)
    }

    fn bind_inputs<'t>(tape: &'t Tape, x: &FusionInputs) -> (Var<'t>, Var<'t>, Var<'t>) {
        (tape.constant(x.gaf.clone()), tape.constant(x.seq.clone()), tape.constant(x.contrast.clone()))
    }

    /// Column index of each label.
    pub fn targets(&self, labels: &[u16]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| self.classes.iter().position(|c| c == l).ok_or_else(|| Error::invalid(format!("label {l} not in the class set"))))
            .collect()
    }

    /// Mean cross-entropy on `log(ŷ + 1e-12)`.
    pub fn loss<'t>(&self, probs: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
        let c = self.num_classes();
        let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * c + t).collect();
        let n = idx.len();
        Ok(probs.add_scalar(1e-12).log().gather(idx.into(), &[n])?.mean_all().neg())
    }

    /// Full-batch fine-tuning on the support set; returns the loss per step.
    pub fn finetune(&mut self, support: &FusionInputs, labels: &[u16]) -> Result<Vec<f64>> {
        for c in &self.classes {
            if !labels.contains(c) {
                return Err(Error::invalid(format!("class {c} has no support frames")));
            }
        }
        let targets = self.targets(labels)?;
        let mut opt = AdamW::new(self.config.optimizer, &self.params);
        let mut history = Vec::with_capacity(self.config.steps);
        for step in 0..self.config.steps {
            let tape = Tape::new();
            let p = self.params.bind(&tape, true);
            let (g, s, c) = Self::bind_inputs(&tape, support);
            let out = self.forward(&p, g, s, c)?;
            let loss = self.loss(out.probs, &targets)?;
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite fine-tuning loss at step {step}")));
            }
            history.push(v);
            let grads = tape.backward(loss)?;
            opt.update(&mut self.params, &p.grads(&grads))?;
        }
        Ok(history)
    }

    /// `[N, C]` class probabilities, in chunks of 512 frames.
    pub fn predict_proba(&self, x: &FusionInputs) -> Result<Tensor> {
        let n = x.len();
        let mut out = Vec::with_capacity(n * self.num_classes());
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(512) {
            let part = x.select(chunk)?;
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let (g, s, c) = Self::bind_inputs(&tape, &part);
            out.extend_from_slice(self.forward(&p, g, s, c)?.probs.value().data());
        }
        Tensor::new(&[n, self.num_classes()], out)
    }

    /// Weights (DYTN) plus a JSON manifest with config and class list.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        let manifest = FusionManifest { config: self.config.clone(), classes: self.classes.clone(), contrast_dim: self.contrast_dim };
        std::fs::write(crate::backbone::manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: FusionManifest = serde_json::from_str(&std::fs::read_to_string(crate::backbone::manifest_path(path))?)?;
        let mut model = FusionModel::new(m.config, m.classes, m.contrast_dim)?;
        let params = ParamStore::load(path)?;
        params.check_compatible(&model.params)?;
        model.params = params;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct FusionManifest {
    config: FusionConfig,
    classes: Vec<u16>,
    contrast_dim: usize,
}

/// `Normalize(Σ_k p_k²)` on plain probability rows.
pub fn ensemble_combine(heads: &[Vec<f64>]) -> Vec<f64> {
    let c = heads.first().map_or(0, |h| h.len());
    let mut s = vec![0.0; c];
    for h in heads {
        for (a, p) in s.iter_mut().zip(h) {
            *a += p * p;
        }
    }
    let total: f64 = s.iter().sum();
    s.iter().map(|v| v / total).collect()
}
