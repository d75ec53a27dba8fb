//! Helpers shared by the integration tests: a finite-difference gradient
//! checker, small reference implementations used as oracles, and golden
//! fixture access.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::PathBuf;

use dyco::fixtures::GoldenFixture;
use dyco::rng;
use dyco::{Result, Tape, Tensor, Var};
use num_complex::Complex64;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// How random inputs of a primitive are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Standard normal.
    Normal,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Standard normal magnitudes pushed at least 0.1 away from zero.
    AwayFromZero,
}

pub type Build = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

pub struct Primitive {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub tolerance: f64,
    pub build: Build,
}

fn p(name: &'static str, inputs: &[(&[usize], Domain)], tolerance: f64, build: Build) -> Primitive {
    Primitive { name, inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(), tolerance, build }
}

/// Tolerance for plain primitives.
pub const TOL: f64 = 1e-5;
/// Tolerance for normalized composites (softmax, layer norm, L2 normalization).
pub const TOL_NORMALIZED: f64 = 1e-3;

/// Every differentiable primitive of the tape, each as a small expression.
pub fn primitives() -> Vec<Primitive> {
    use Domain::*;
    vec![
        p("add", &[(&[3, 4], Normal), (&[3, 4], Normal)], TOL, |_, v| v[0].add(&v[1])),
        p("add_broadcast", &[(&[2, 3, 4], Normal), (&[3, 1], Normal)], TOL, |_, v| v[0].add(&v[1])),
        p("sub", &[(&[3, 4], Normal), (&[4], Normal)], TOL, |_, v| v[0].sub(&v[1])),
        p("mul", &[(&[3, 4], Normal), (&[3, 4], Normal)], TOL, |_, v| v[0].mul(&v[1])),
        p("div", &[(&[3, 4], Normal), (&[3, 4], Positive)], TOL, |_, v| v[0].div(&v[1])),
        p("add_scalar", &[(&[5], Normal)], TOL, |_, v| Ok(v[0].add_scalar(0.7))),
        p("mul_scalar", &[(&[5], Normal)], TOL, |_, v| Ok(v[0].mul_scalar(-1.3))),
        p("neg", &[(&[5], Normal)], TOL, |_, v| Ok(v[0].neg())),
        p("square", &[(&[5], Normal)], TOL, |_, v| Ok(v[0].square())),
        p("relu", &[(&[12], AwayFromZero)], TOL, |_, v| Ok(v[0].relu())),
        p("gelu", &[(&[12], Normal)], TOL, |_, v| Ok(v[0].gelu())),
        p("sigmoid", &[(&[12], Normal)], TOL, |_, v| Ok(v[0].sigmoid())),
        p("tanh", &[(&[12], Normal)], TOL, |_, v| Ok(v[0].tanh())),
        p("exp", &[(&[8], Normal)], TOL, |_, v| Ok(v[0].exp())),
        p("log", &[(&[8], Positive)], TOL, |_, v| Ok(v[0].log())),
        p("sqrt", &[(&[8], Positive)], TOL, |_, v| Ok(v[0].sqrt())),
        p("matmul", &[(&[3, 4], Normal), (&[4, 5], Normal)], TOL, |_, v| v[0].matmul(&v[1])),
        p("matmul_shared", &[(&[2, 3, 4], Normal), (&[4, 2], Normal)], TOL, |_, v| v[0].matmul(&v[1])),
        p("matmul_batched", &[(&[2, 3, 4], Normal), (&[2, 4, 3], Normal)], TOL, |_, v| v[0].matmul(&v[1])),
        p("transpose_last", &[(&[2, 3, 4], Normal)], TOL, |_, v| v[0].transpose_last()),
        p("permute", &[(&[2, 3, 4], Normal)], TOL, |_, v| v[0].permute(&[2, 0, 1])),
        p("reshape", &[(&[2, 6], Normal)], TOL, |_, v| v[0].reshape(&[3, 4])),
        p("slice", &[(&[3, 6], Normal)], TOL, |_, v| v[0].slice(1, 1, 4)),
        p("concat", &[(&[2, 3], Normal), (&[2, 2], Normal)], TOL, |t, v| t.concat(&[v[0], v[1]], 1)),
        p("gather", &[(&[3, 4], Normal)], TOL, |_, v| v[0].gather(vec![0, 5, 5, 11, 2].into(), &[5])),
        p("sum_axis", &[(&[2, 3, 4], Normal)], TOL, |_, v| v[0].sum(1)),
        p("mean_axis", &[(&[2, 3, 4], Normal)], TOL, |_, v| v[0].mean(2)),
        p("sum_all", &[(&[2, 3], Normal)], TOL, |_, v| Ok(v[0].sum_all())),
        p("mean_all", &[(&[2, 3], Normal)], TOL, |_, v| Ok(v[0].mean_all())),
        p("conv1d", &[(&[2, 2, 16], Normal), (&[3, 2, 5], Normal), (&[3], Normal)], TOL, |_, v| {
            v[0].conv1d(&v[1], Some(&v[2]), 2, 2)
        }),
        p("conv2d", &[(&[1, 2, 6, 6], Normal), (&[3, 2, 3, 3], Normal), (&[3], Normal)], TOL, |_, v| {
            v[0].conv2d(&v[1], Some(&v[2]), 2, 1)
        }),
        p("lstm_cell", &[(&[2, 12], Normal), (&[2, 3], Normal)], TOL, |_, v| v[0].lstm_cell(&v[1])),
        p("l2_norm", &[(&[3, 5], Normal)], TOL, |_, v| v[0].l2_norm()),
        p("softmax", &[(&[3, 5], Normal)], TOL_NORMALIZED, |_, v| v[0].softmax(1)),
        p("softmax_axis0", &[(&[4, 3], Normal)], TOL_NORMALIZED, |_, v| v[0].softmax(0)),
        p("log_softmax", &[(&[3, 5], Normal)], TOL_NORMALIZED, |_, v| v[0].log_softmax(1)),
        p("layer_norm", &[(&[3, 6], Normal)], TOL_NORMALIZED, |_, v| v[0].layer_norm(1e-6)),
        p("l2_normalize", &[(&[3, 5], Normal)], TOL_NORMALIZED, |_, v| v[0].l2_normalize()),
        p("cosine_similarity", &[(&[3, 5], Normal), (&[3, 5], Normal)], TOL_NORMALIZED, |_, v| {
            v[0].cosine_similarity(&v[1])
        }),
    ]
}

pub fn draw_input<R: Rng + ?Sized>(shape: &[usize], domain: Domain, r: &mut R) -> Tensor {
    match domain {
        Domain::Normal => Tensor::randn(shape, r),
        Domain::Positive => Tensor::uniform(shape, 0.75, r).map(|v| v + 1.25),
        Domain::AwayFromZero => Tensor::randn(shape, r).map(|v| v.signum() * (v.abs() + 0.1)),
    }
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)` over
/// every input entry of `f(x)·w` for random `x` and `w` drawn from `seed`.
pub fn gradcheck(prim: &Primitive, seed: u64) -> Result<f64> {
    let mut r = rng::named(seed, prim.name, 0);
    let xs: Vec<Tensor> = prim.inputs.iter().map(|(s, d)| draw_input(s, *d, &mut r)).collect();
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        (prim.build)(&tape, &vars)?.shape()
    };
    let w = Tensor::randn(&out_shape, &mut r);
    let objective = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok((prim.build)(&tape, &vars)?.mul(&tape.constant(w.clone()))?.sum_all().item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let root = (prim.build)(&tape, &vars)?.mul(&tape.constant(w.clone()))?.sum_all();
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).clone();
        for j in 0..xs[i].numel() {
            let mut plus = xs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = xs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
            let a = g.data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    Ok(worst)
}

/// Worst relative error of `build` over `seeds` random draws.
pub fn gradcheck_seeds(prim: &Primitive, seeds: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        worst = worst.max(gradcheck(prim, s)?);
    }
    Ok(worst)
}

/// Input gradient of `sum(f(x)·w)` against central differences on every entry of `x`.
pub fn input_gradcheck<F>(f: F, x: &Tensor, w: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let objective = |x: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        Ok(f(&tape, tape.constant(x.clone()))?.mul(&tape.constant(w.clone()))?.sum_all().item())
    };
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&tape, xv)?.mul(&tape.constant(w.clone()))?.sum_all();
    let g = tape.backward(root)?.wrt(xv).clone();
    let mut worst: f64 = 0.0;
    for j in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[j] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[j] -= FD_STEP;
        let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * FD_STEP);
        let a = g.data()[j];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    Ok(worst)
}

/// Direct `O(L²)` DFT.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t % n) as f64 / n as f64))
                .sum()
        })
        .collect()
}

/// Fourth-order cycle spectrum through the direct DFT.
pub fn p4_oracle(x: &[Complex64]) -> Vec<f64> {
    let x4: Vec<Complex64> = x.iter().map(|c| c * c * c * c).collect();
    let mag: Vec<f64> = naive_dft(&x4).iter().map(|c| c.norm()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    mag.iter().map(|m| m / (max + 1e-8)).collect()
}

/// Envelope chain written out step by step.
pub fn e_reg_oracle(x: &[Complex64]) -> Vec<f64> {
    let l = x.len() as f64;
    let r: Vec<f64> = x.iter().map(|c| (c.re * c.re + c.im * c.im).sqrt()).collect();
    let mean = r.iter().sum::<f64>() / l;
    let centered: Vec<f64> = r.iter().map(|v| v - mean).collect();
    let dev = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rcn: Vec<Complex64> = centered.iter().map(|v| Complex64::new(v / (dev + 1e-8), 0.0)).collect();
    let gamma = naive_dft(&rcn).iter().fold(0.0f64, |m, c| m.max(c.norm_sqr())) / l;
    let e: Vec<f64> = r.iter().map(|v| v / (gamma + 1e-8)).collect();
    let m = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    e.iter().map(|v| v / (m + 1e-8)).collect()
}

/// Softmax of `logits / tau`, then InfoNCE for index 0 as positive, by direct sums.
pub fn info_nce_oracle(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let num = (dot(q, pos) / tau).exp();
    let den = num + negs.iter().map(|k| (dot(q, k) / tau).exp()).sum::<f64>();
    -(num / den).ln()
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Set `DYCO_REGEN_FIXTURES=1` to rewrite fixtures instead of comparing.
pub fn regen() -> bool {
    std::env::var("DYCO_REGEN_FIXTURES").map(|v| v == "1").unwrap_or(false)
}

/// Compare `values` with the stored fixture, or store them when regenerating.
pub fn golden(name: &str, oracle: &str, seed: u64, tolerance: f64, values: Vec<f64>) {
    let f = GoldenFixture::new(name, oracle, seed, tolerance, values);
    if let Err(e) = f.check_or_regen(&fixture_dir(), regen()) {
        panic!("{e} (rerun with DYCO_REGEN_FIXTURES=1 after an intended change)");
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
