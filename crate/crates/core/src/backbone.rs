//! Convolutional-stem encoder with fixed-window 1D attention.
//!
//! `[B, 2, L]` I/Q batches go through three stride-2 convolutions (each
//! followed by channel layer norm and GELU) to `T = L/8` tokens, then
//! pre-norm attention blocks whose attention is restricted to disjoint windows
//! of `M` tokens, then a mean over tokens (the pooled feature) and a two-layer
//! projection head whose output is L2-normalized.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_conv, init_layer_norm, init_linear, Bound, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: [usize; 3],
    pub stem_kernels: [usize; 3],
    pub depth: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub proj_hidden: usize,
    pub out_dim: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 2,
            stem_channels: [16, 32, 64],
            stem_kernels: [7, 5, 3],
            depth: 2,
            heads: 4,
            window: 8,
            mlp_ratio: 2,
            proj_hidden: 64,
            out_dim: 32,
            ln_eps: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        self.stem_channels[2]
    }

    pub fn tokens(&self, len: usize) -> Result<usize> {
        if len % 8 != 0 || len == 0 {
            return Err(Error::invalid(format!("frame length {len} is not divisible by 8")));
        }
        let t = len / 8;
        if self.window == 0 || t % self.window != 0 {
            return Err(Error::invalid(format!("window M={} does not divide T={t}", self.window)));
        }
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim() % self.heads != 0 {
            return Err(Error::invalid(format!("{} heads do not divide embed dim {}", self.heads, self.embed_dim())));
        }
        Ok(())
    }
}

/// Flat indices into a `[H, 2M−1]` table giving `B[h][i][j] = table[h][i−j+M−1]`.
pub fn relative_bias_index(heads: usize, window: usize) -> Rc<[usize]> {
    let w = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * window * window);
    for h in 0..heads {
        for i in 0..window {
            for j in 0..window {
                idx.push(h * w + i + window - 1 - j);
            }
        }
    }
    idx.into()
}

/// Parameters of one windowed multi-head attention layer under `prefix`.
pub fn init_attention<R: rand::Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, window: usize, rng: &mut R) {
    init_linear(store, &format!("{prefix}.qkv"), dim, 3 * dim, rng);
    init_linear(store, &format!("{prefix}.proj"), dim, dim, rng);
    store.insert(format!("{prefix}.rel_bias"), Tensor::zeros(&[heads, 2 * window - 1]));
}

/// Multi-head self-attention over disjoint windows of `window` tokens.
///
/// `x` is `[B, T, D]`; `window == T` is ordinary global attention. Tokens in
/// different windows never interact, so the Jacobian is block diagonal.
pub fn window_attention<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>, heads: usize, window: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let [b, t, d] = s[..] else {
        return Err(Error::shape("window_attention", format!("expected [B, T, D], got {s:?}")));
    };
    if window == 0 || t % window != 0 {
        return Err(Error::invalid(format!("window M={window} does not divide T={t}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("{heads} heads do not divide dim {d}")));
    }
    let (nw, dh) = (t / window, d / heads);
    let bw = b * nw * heads;
    let qkv = p
        .linear(&format!("{prefix}.qkv"), x)?
        .reshape(&[b, nw, window, 3, heads, dh])?
        .permute(&[3, 0, 1, 4, 2, 5])?;
    let part = |i: usize| qkv.slice(0, i, i + 1)?.reshape(&[bw, window, dh]);
    let (q, k, v) = (part(0)?, part(1)?, part(2)?);
    let table = p.get(&format!("{prefix}.rel_bias"))?;
    if table.shape() != [heads, 2 * window - 1] {
        return Err(Error::shape("window_attention", format!("bias table {:?} for {heads} heads, M={window}", table.shape())));
    }
    let bias = table.gather(relative_bias_index(heads, window), &[heads, window, window])?;
    let scores = q
        .matmul(&k.transpose_last()?)?
        .mul_scalar(1.0 / (dh as f64).sqrt())
        .reshape(&[b * nw, heads, window, window])?
        .add(&bias)?;
    let attn = scores.softmax(3)?.reshape(&[bw, window, window])?;
    let out = attn
        .matmul(&v)?
        .reshape(&[b, nw, heads, window, dh])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b, t, d])?;
    p.linear(&format!("{prefix}.proj"), out)
}

/// Pooled feature and unit-norm projection of a batch.
pub struct EncoderOutput<'t> {
    pub pooled: Var<'t>,
    pub z: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Encoder {
    /// Fan-in uniform weights, zero biases, zero relative-position tables.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::named(seed, "backbone_init", 0);
        let mut p = ParamStore::new();
        let mut cin = config.in_channels;
        for (i, (&c, &k)) in config.stem_channels.iter().zip(&config.stem_kernels).enumerate() {
            init_conv(&mut p, &format!("stem.{i}.conv"), &[c, cin, k], &mut rng);
            init_layer_norm(&mut p, &format!("stem.{i}.ln"), c);
            cin = c;
        }
        let d = config.embed_dim();
        for i in 0..config.depth {
            init_layer_norm(&mut p, &format!("block.{i}.ln1"), d);
            init_attention(&mut p, &format!("block.{i}.attn"), d, config.heads, config.window, &mut rng);
            init_layer_norm(&mut p, &format!("block.{i}.ln2"), d);
            init_linear(&mut p, &format!("block.{i}.mlp.fc1"), d, d * config.mlp_ratio, &mut rng);
            init_linear(&mut p, &format!("block.{i}.mlp.fc2"), d * config.mlp_ratio, d, &mut rng);
        }
        init_layer_norm(&mut p, "norm", d);
        init_linear(&mut p, "head.fc1", d, config.proj_hidden, &mut rng);
        init_linear(&mut p, "head.fc2", config.proj_hidden, config.out_dim, &mut rng);
        Ok(Encoder { config, params: p })
    }

    /// Stem only: `[B, 2, L]` to `[B, L/8, D]` tokens.
    pub fn stem<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.in_channels {
            return Err(Error::shape("stem", format!("expected [B, {}, L], got {s:?}", self.config.in_channels)));
        }
        self.config.tokens(s[2])?;
        let mut h = x;
        for (i, &k) in self.config.stem_kernels.iter().enumerate() {
            let conv = h.conv1d(&p.get(&format!("stem.{i}.conv.w"))?, Some(&p.get(&format!("stem.{i}.conv.b"))?), 2, k / 2)?;
            let tokens = conv.permute(&[0, 2, 1])?;
            let a = p.layer_norm(&format!("stem.{i}.ln"), tokens, self.config.ln_eps)?.gelu();
            h = if i + 1 == self.config.stem_kernels.len() { a } else { a.permute(&[0, 2, 1])? };
        }
        Ok(h)
    }

    /// Full encoder on a `[B, 2, L]` batch.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<EncoderOutput<'t>> {
        let c = &self.config;
        let mut h = self.stem(p, x)?;
        for i in 0..c.depth {
            let a = p.layer_norm(&format!("block.{i}.ln1"), h, c.ln_eps)?;
            h = h.add(&window_attention(p, &format!("block.{i}.attn"), a, c.heads, c.window)?)?;
            let m = p.layer_norm(&format!("block.{i}.ln2"), h, c.ln_eps)?;
            let m = p.linear(&format!("block.{i}.mlp.fc1"), m)?.gelu();
            h = h.add(&p.linear(&format!("block.{i}.mlp.fc2"), m)?)?;
        }
        let pooled = p.layer_norm("norm", h, c.ln_eps)?.mean(1)?;
        let z = p.linear("head.fc1", pooled)?.gelu();
        let z = p.linear("head.fc2", z)?.l2_normalize()?;
        Ok(EncoderOutput { pooled, z })
    }

    /// Gradient-free `(pooled, z)` for a `[B, 2, L]` batch, in chunks of 256.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("embed", format!("expected [B, 2, L], got {s:?}")));
        }
        let per = s[1] * s[2];
        let mut pooled = Vec::new();
        let mut z = Vec::new();
        for chunk in x.data().chunks(256 * per) {
            let n = chunk.len() / per;
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let xv = tape.constant(Tensor::new(&[n, s[1], s[2]], chunk.to_vec())?);
            let out = self.forward(&p, xv)?;
            pooled.extend_from_slice(out.pooled.value().data());
            z.extend_from_slice(out.z.value().data());
        }
        let b = s[0];
        Ok((
            Tensor::new(&[b, self.config.embed_dim()], pooled)?,
            Tensor::new(&[b, self.config.out_dim], z)?,
        ))
    }

    /// Unit-norm projections only.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.embed(x)?.1)
    }

    /// Weights to `path` (DYTN) and the config to `path` + `.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.params.save(path)?;
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: BackboneConfig = match std::fs::read_to_string(manifest_path(path)) {
            Ok(s) => serde_json::from_str(&s)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BackboneConfig::default(),
            Err(e) => return Err(e.into()),
        };
        let all = ParamStore::load(path)?;
        let reference = Encoder::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (k, _) in reference.params.iter() {
            params.insert(k, all.get(k)?.clone());
        }
        params.check_compatible(&reference.params)?;
        Ok(Encoder { config, params })
    }
}

pub(crate) fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
