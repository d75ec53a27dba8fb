//! Numerical checks of the method's theoretical claims.
//!
//! Every check returns a [`VerifyReport`] that is reproducible from its name,
//! seed and trial count. Monte Carlo trials draw from independent per-trial
//! streams and are reduced in trial order, so results do not depend on the
//! thread count.

mod hessian;
mod lipschitz;
mod spectral;

pub use hessian::{vaa_vs_hessian, TinyNet, TinyNetSpec};
pub use lipschitz::{
    attention_lipschitz_setup, encoder_lipschitz, regularization_effect, sc_spectral_regularizer, small_backbone, window_vs_global_lipschitz,
    AttentionSetup, RegularizationConfig,
};
pub use spectral::{batched_jacobians, dense_jacobian, max_singular_value, spectral_norm, SpectralEstimate};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// How a report's statistic is compared with its bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// `statistic ≤ bound + tolerance`
    AtMost,
    /// `statistic ≥ bound − tolerance`
    AtLeast,
    /// `|statistic − bound| ≤ tolerance`
    Within,
    /// `lo ≤ statistic ≤ hi`; `bound` is the nominal target.
    Band { lo: f64, hi: f64 },
    /// The statistic is 1 when an ordering property holds.
    Holds,
}

impl Relation {
    pub fn holds(self, statistic: f64, bound: f64, tolerance: f64) -> bool {
        match self {
            Relation::AtMost => statistic <= bound + tolerance,
            Relation::AtLeast => statistic >= bound - tolerance,
            Relation::Within => (statistic - bound).abs() <= tolerance,
            Relation::Band { lo, hi } => (lo..=hi).contains(&statistic),
            Relation::Holds => statistic == 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub name: String,
    pub statistic: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub relation: Relation,
    pub trials: usize,
    pub pass: bool,
    pub seed: u64,
    /// Secondary measurements, in a fixed order.
    pub details: Vec<(String, f64)>,
}

impl VerifyReport {
    pub fn new(name: impl Into<String>, statistic: f64, bound: f64, tolerance: f64, relation: Relation, trials: usize, seed: u64) -> Self {
        VerifyReport {
            name: name.into(),
            statistic,
            bound,
            tolerance,
            relation,
            trials,
            pass: statistic.is_finite() && relation.holds(statistic, bound, tolerance),
            seed,
            details: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.details.push((key.to_string(), value));
        self
    }

    pub fn detail(&self, key: &str) -> Option<f64> {
        self.details.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One CSV row matching [`VerifyReport::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{},{}", self.name, self.statistic, self.bound, self.tolerance, self.trials, self.pass, self.seed)
    }

    pub const CSV_HEADER: &'static str = "name,statistic,bound,tolerance,trials,pass,seed";
}

fn gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let mut v = gaussian(d, rng);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-trial values in trial order.
fn monte_carlo<T: Send>(trials: usize, seed: u64, purpose: &str, f: impl Fn(&mut rng::StreamRng) -> T + Sync) -> Vec<T> {
    (0..trials as u64)
        .into_par_iter()
        .map(|t| f(&mut rng::named(seed, purpose, t)))
        .collect()
}

/// Frequency of `|cos(r, v)| ≥ δ` for isotropic `r` against the bound
/// `2·exp(−Dδ²/2)` plus a three-sigma binomial margin.
pub fn mc_orthogonality(d: usize, delta: f64, trials: usize, seed: u64) -> Result<VerifyReport> {
    if d < 2 {
        return Err(Error::invalid(format!("orthogonality check needs D ≥ 2, got {d}")));
    }
    if trials == 0 || !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid("need trials ≥ 1 and δ in [0, 1]"));
    }
    let v = unit(d, &mut rng::named(seed, "mc_orthogonality.v", 0));
    let cos = monte_carlo(trials, seed, "mc_orthogonality", |r| {
        let x = gaussian(d, r);
        dot(&x, &v).abs() / dot(&x, &x).sqrt()
    });
    let hits = cos.iter().filter(|&&c| c >= delta).count();
    let freq = hits as f64 / trials as f64;
    let mean_abs = cos.iter().sum::<f64>() / trials as f64;
    let bound = 2.0 * (-(d as f64) * delta * delta / 2.0).exp();
    let p = bound.min(1.0);
    let margin = 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
    Ok(VerifyReport::new("mc_orthogonality", freq, bound, margin, Relation::AtMost, trials, seed)
        .with("dim", d as f64)
        .with("delta", delta)
        .with("mean_abs_cos", mean_abs)
        .with("mean_abs_cos_expected", (2.0 / (std::f64::consts::PI * d as f64)).sqrt()))
}

/// Mean of `‖r‖` for `r ~ N(0, σ²I_D)` against `σ√D`, 1% relative tolerance.
pub fn norm_concentration(d: usize, sigma: f64, trials: usize, seed: u64) -> Result<VerifyReport> {
    if d == 0 || trials < 2 || !(sigma > 0.0) {
        return Err(Error::invalid("need D ≥ 1, σ > 0 and at least two trials"));
    }
    let target = sigma * (d as f64).sqrt();
    let norms = monte_carlo(trials, seed, "norm_concentration", |r| {
        let x = gaussian(d, r);
        sigma * dot(&x, &x).sqrt()
    });
    let n = trials as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v / target - mean / target).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(VerifyReport::new("norm_concentration", mean, target, 0.01 * target, Relation::Within, trials, seed)
        .with("dim", d as f64)
        .with("sigma", sigma)
        .with("relative_variance", var))
}

/// Largest `|(1 − zᵀz') − ½‖z − z'‖²|` over random unit pairs.
pub fn cosine_euclid_equiv(d: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    if d == 0 || trials == 0 {
        return Err(Error::invalid("need D ≥ 1 and trials ≥ 1"));
    }
    let dev = monte_carlo(trials, seed, "cosine_euclid", |r| {
        let a = unit(d, r);
        let b = unit(d, r);
        let half_sq: f64 = 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        ((1.0 - dot(&a, &b)) - half_sq).abs()
    });
    let max = dev.iter().cloned().fold(0.0, f64::max);
    Ok(VerifyReport::new("cosine_euclid", max, 1e-12, 0.0, Relation::AtMost, trials, seed).with("dim", d as f64))
}

/// Names accepted by [`run_check`].
pub const CHECKS: &[&str] = &[
    "mc_orthogonality",
    "norm_concentration",
    "cosine_euclid",
    "vaa_vs_hessian",
    "spectral_norm",
    "window_vs_global_lipschitz",
    "sc_spectral_regularizer",
    "regularization_effect",
];

/// Run a named check, at its default size unless `trials` is given. Some
/// checks yield several reports.
pub fn run_check(name: &str, seed: u64, trials: Option<usize>) -> Result<Vec<VerifyReport>> {
    let n = |default: usize| trials.unwrap_or(default);
    match name {
        "mc_orthogonality" => Ok(vec![mc_orthogonality(256, 0.2, n(100_000), seed)?]),
        "norm_concentration" => Ok(vec![norm_concentration(256, 1.0, n(10_000), seed)?]),
        "cosine_euclid" | "cosine_euclid_equiv" => Ok(vec![cosine_euclid_equiv(128, n(10_000), seed)?]),
        "vaa_vs_hessian" => Ok(vec![vaa_vs_hessian(&TinyNetSpec::default(), n(100), seed)?]),
        "spectral_norm" => Ok(vec![spectral::spectral_vs_dense(n(10), seed)?]),
        "window_vs_global_lipschitz" => window_vs_global_lipschitz(&[16, 32, 64], seed),
        "sc_spectral_regularizer" => lipschitz::sc_spectral_default(n(10), seed),
        "regularization_effect" => {
            Ok(vec![regularization_effect(&RegularizationConfig { seed, runs: n(5), ..Default::default() })?])
        }
        other => Err(Error::invalid(format!("unknown check {other:?}; valid checks: {}", CHECKS.join(", ")))),
    }
}
