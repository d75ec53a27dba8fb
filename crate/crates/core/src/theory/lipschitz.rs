//! Sensitivity checks: windowed vs global attention, the first-order regime of
//! the consistency loss, and the effect of that loss on trained encoders.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{batched_jacobians, dense_jacobian, max_singular_value, spectral_norm};
use super::{Relation, VerifyReport};
use crate::backbone::{init_attention, window_attention, BackboneConfig, Encoder};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::pretrain::{random_directions, PretrainConfig, Pretrainer};
use crate::rng;
use crate::signal::{batch_tensor, synth_dataset, DatasetSpec};
use crate::tensor::{eval, traced, Tape, Tensor, Var};

/// One attention layer with shared weights and a shared token sequence.
///
/// Weights are `U(±1/√D)` with a query bias of norm `query_bias`; tokens are
/// small Gaussians except the first, which is pushed along the direction its
/// key aligns with the query bias so that every query attends to it.
#[derive(Clone, Debug)]
pub struct AttentionSetup {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub params: ParamStore,
    /// `[1, T_max, D]`; shorter sequences use a prefix.
    pub tokens: Tensor,
}

pub fn attention_lipschitz_setup(max_len: usize, seed: u64) -> Result<AttentionSetup> {
    let (dim, heads, window) = (16, 2, 8);
    if max_len == 0 || max_len % window != 0 {
        return Err(Error::invalid(format!("sequence length {max_len} must be a positive multiple of {window}")));
    }
    let mut r = rng::named(seed, "attention_lipschitz", 0);
    let mut params = ParamStore::new();
    init_attention(&mut params, "attn", dim, heads, window, &mut r);
    let bound = 1.0 / (dim as f64).sqrt();
    params.insert("attn.qkv.w", Tensor::uniform(&[dim, 3 * dim], bound, &mut r));
    params.insert("attn.proj.w", Tensor::uniform(&[dim, dim], bound, &mut r));
    let dir = random_directions(&[1, dim], &mut r);
    let mut qkv_b = vec![0.0; 3 * dim];
    for (b, u) in qkv_b.iter_mut().zip(dir.data()) {
        *b = 8.0 * u;
    }
    let wk: Vec<f64> = {
        let w = params.get("attn.qkv.w")?.data();
        (0..dim).map(|i| (0..dim).map(|j| w[i * 3 * dim + dim + j] * qkv_b[j]).sum()).collect()
    };
    params.insert("attn.qkv.b", Tensor::from_vec(qkv_b));
    let mut tokens = Tensor::randn(&[1, max_len, dim], &mut r).scale(0.05);
    let n = wk.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (t, v) in tokens.data_mut()[..dim].iter_mut().zip(&wk) {
        *t += 8.0 * v / n;
    }
    Ok(AttentionSetup { dim, heads, window, params, tokens })
}

impl AttentionSetup {
    /// Parameters for a given attention span, with a zero relative-bias table.
    fn params_for(&self, window: usize) -> ParamStore {
        let mut p = self.params.clone();
        p.insert("attn.rel_bias", Tensor::zeros(&[self.heads, 2 * window - 1]));
        p
    }

    pub fn prefix(&self, len: usize) -> Result<Tensor> {
        Tensor::new(&[1, len, self.dim], self.tokens.data()[..len * self.dim].to_vec())
    }

    /// σ_max of the layer at `len` tokens, windowed (`global = false`) or global.
    pub fn sigma(&self, len: usize, global: bool, seed: u64) -> Result<f64> {
        let window = if global { len } else { self.window };
        let p = self.params_for(window);
        let heads = self.heads;
        let f = traced(|tape, x| window_attention(&p.bind(tape, false), "attn", x, heads, window));
        let est = spectral_norm(f, &self.prefix(len)?, 5000, 1e-10, seed)?;
        if !est.converged {
            return Err(Error::Numerical(format!("power iteration did not converge at T={len}")));
        }
        Ok(est.sigma)
    }
}

fn sigma_sym(j: &DMatrix<f64>) -> f64 {
    let g = j.transpose() * j;
    SymmetricEigen::new(g).eigenvalues.iter().cloned().fold(0.0, f64::max).sqrt()
}

/// Block-diagonal structure, length invariance of windowed attention, and
/// length growth of global attention. Yields four reports.
pub fn window_vs_global_lipschitz(lengths: &[usize], seed: u64) -> Result<Vec<VerifyReport>> {
    let t_max = *lengths.iter().max().ok_or_else(|| Error::invalid("no lengths given"))?;
    let s = attention_lipschitz_setup(t_max, seed)?;
    let p = s.params_for(s.window);
    let (heads, window, d) = (s.heads, s.window, s.dim);
    let f = traced(|tape, x| window_attention(&p.bind(tape, false), "attn", x, heads, window));
    let j = dense_jacobian(f, &s.prefix(t_max)?)?;
    let block = window * d;
    let mut cross: f64 = 0.0;
    for r in 0..j.nrows() {
        for c in 0..j.ncols() {
            if r / block != c / block {
                cross = cross.max(j[(r, c)].abs());
            }
        }
    }
    let full = sigma_sym(&j);
    let per_window = (0..t_max / window)
        .map(|w| max_singular_value(&j.view((w * block, w * block), (block, block)).into_owned()))
        .fold(0.0, f64::max);
    let mut reports = vec![
        VerifyReport::new("window_block_diagonal", cross, 1e-12, 0.0, Relation::AtMost, 1, seed).with("tokens", t_max as f64),
        VerifyReport::new("window_block_sigma", full, per_window, 1e-8, Relation::Within, 1, seed),
    ];
    let mut windowed = Vec::new();
    let mut global = Vec::new();
    for &t in lengths {
        windowed.push(s.sigma(t, false, seed)?);
        global.push(s.sigma(t, true, seed)?);
    }
    let lo = windowed.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = windowed.iter().cloned().fold(0.0, f64::max);
    let mut inv = VerifyReport::new("window_length_invariance", (hi - lo) / lo, 0.05, 0.0, Relation::AtMost, lengths.len(), seed);
    let increasing = global.windows(2).all(|w| w[1] > w[0]);
    let mut growth =
        VerifyReport::new("global_length_growth", if increasing { 1.0 } else { 0.0 }, 1.0, 0.0, Relation::Holds, lengths.len(), seed);
    for (i, &t) in lengths.iter().enumerate() {
        inv = inv.with(&format!("sigma_T{t}"), windowed[i]);
        growth = growth.with(&format!("sigma_T{t}"), global[i]);
    }
    reports.push(inv);
    reports.push(growth);
    Ok(reports)
}

/// Ratios `max_d ‖f(x+εd) − f(x)‖² / (ε²σ_max²)` over random unit directions
/// and the top singular direction, one `(min, max)` pair per `ε`.
pub fn sc_spectral_regularizer<F>(f: F, x: &Tensor, epsilons: &[f64], directions: usize, seed: u64) -> Result<Vec<(f64, f64)>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let est = spectral_norm(&f, x, 5000, 1e-8, seed)?;
    let fx = eval(&f, x)?;
    let mut r = rng::named(seed, "sc_spectral", 0);
    let mut shape = vec![directions];
    shape.extend_from_slice(x.shape());
    let dirs = random_directions(&shape, &mut r);
    let per = x.numel();
    let mut out = Vec::new();
    for &eps in epsilons {
        let ratio = |d: &Tensor| -> Result<f64> {
            let y = eval(&f, &x.axpy(eps, d)?)?;
            Ok(y.axpy(-1.0, &fx)?.norm().powi(2) / (eps * est.sigma).powi(2))
        };
        let mut best = ratio(&est.vector)?.max(ratio(&est.vector.scale(-1.0))?);
        for row in dirs.data().chunks(per) {
            best = best.max(ratio(&Tensor::new(x.shape(), row.to_vec())?)?);
        }
        out.push((eps, best));
    }
    Ok(out)
}

/// Small backbone used by the first-order regime check.
pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: [4, 8, 8],
        depth: 1,
        heads: 2,
        window: 2,
        proj_hidden: 16,
        out_dim: 8,
        ..BackboneConfig::default()
    }
}

pub(super) fn sc_spectral_default(encoders: usize, seed: u64) -> Result<Vec<VerifyReport>> {
    let epsilons = [1e-3, 1e-4];
    let mut ratios = vec![Vec::new(); epsilons.len()];
    for e in 0..encoders as u64 {
        let enc = Encoder::new(small_backbone(), rng::named(seed, "sc_spectral.encoder", e).gen())?;
        let x = Tensor::randn(&[1, 2, 32], &mut rng::named(seed, "sc_spectral.input", e)).scale(std::f64::consts::FRAC_1_SQRT_2);
        let f = traced(|tape, x| Ok(enc.forward(&enc.params.bind(tape, false), x)?.z));
        for (i, (_, r)) in sc_spectral_regularizer(f, &x, &epsilons, 1000, seed ^ e)?.into_iter().enumerate() {
            ratios[i].push(r);
        }
    }
    let mut reports = Vec::new();
    for (eps, rs) in epsilons.iter().zip(&ratios) {
        let lo = rs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rs.iter().cloned().fold(0.0, f64::max);
        reports.push(
            VerifyReport::new(format!("sc_spectral_regularizer.min(eps={eps:e})"), lo, 0.8, 0.0, Relation::AtLeast, encoders, seed)
                .with("epsilon", *eps),
        );
        reports.push(
            VerifyReport::new(format!("sc_spectral_regularizer.max(eps={eps:e})"), hi, 1.05, 0.0, Relation::AtMost, encoders, seed)
                .with("epsilon", *eps),
        );
    }
    Ok(reports)
}

/// Largest singular value of the `z` Jacobian for each frame of a `[B, 2, L]` batch.
pub fn encoder_lipschitz(encoder: &Encoder, x: &Tensor) -> Result<Vec<f64>> {
    let f = traced(|tape, x| Ok(encoder.forward(&encoder.params.bind(tape, false), x)?.z));
    let mut out = Vec::with_capacity(x.shape()[0]);
    let per = x.numel() / x.shape()[0].max(1);
    for chunk in x.data().chunks(64 * per) {
        let mut s = x.shape().to_vec();
        s[0] = chunk.len() / per;
        for j in batched_jacobians(f, &Tensor::new(&s, chunk.to_vec())?)? {
            out.push(max_singular_value(&j));
        }
    }
    Ok(out)
}

/// Twin pre-training runs that differ only in `λ_sc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizationConfig {
    pub runs: usize,
    pub lambda_sc: f64,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub held_out: usize,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            runs: 5,
            lambda_sc: 0.6,
            dataset: DatasetSpec { per_cell: 20, ..DatasetSpec::default() },
            epochs: 10,
            batch_size: 64,
            held_out: 100,
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }
}

/// Count of runs where the regularized twin has the lower mean input-Jacobian σ_max.
pub fn regularization_effect(cfg: &RegularizationConfig) -> Result<VerifyReport> {
    if cfg.runs == 0 || cfg.held_out == 0 {
        return Err(Error::invalid("need at least one run and one held-out frame"));
    }
    let mut wins = 0;
    let mut details = Vec::new();
    for run in 0..cfg.runs as u64 {
        let run_seed = rng::named(cfg.seed, "regularization.run", run).gen::<u64>();
        let train = synth_dataset(&cfg.dataset, run_seed)?;
        let held = synth_dataset(&cfg.dataset, run_seed ^ 0x5eed)?;
        let pick: Vec<_> = (0..cfg.held_out).map(|i| &held[i * held.len() / cfg.held_out]).collect();
        let x = batch_tensor(&pick)?;
        let mut sigma = [0.0; 2];
        for (slot, lambda) in [(0, cfg.lambda_sc), (1, 0.0)] {
            let pc = PretrainConfig { lambda_sc: lambda, epochs: cfg.epochs, batch_size: cfg.batch_size, seed: run_seed, ..Default::default() };
            let mut tr = Pretrainer::new(pc, cfg.backbone.clone())?;
            tr.fit(&train, cfg.epochs, |_| Ok(()))?;
            let s = encoder_lipschitz(&tr.query, &x)?;
            sigma[slot] = s.iter().sum::<f64>() / s.len() as f64;
        }
        if sigma[0] < sigma[1] {
            wins += 1;
        }
        details.push((format!("run{run}.sigma_reg"), sigma[0]));
        details.push((format!("run{run}.sigma_plain"), sigma[1]));
    }
    let need = (cfg.runs * 4).div_ceil(5) as f64;
    let mut r = VerifyReport::new("regularization_effect", wins as f64, need, 0.0, Relation::AtLeast, cfg.runs, cfg.seed);
    r.details = details;
    Ok(r)
}
