//! Spectral norm of input Jacobians: power iteration and a dense oracle.

use nalgebra::DMatrix;

use super::{Relation, TinyNet, TinyNetSpec, VerifyReport};
use crate::error::{Error, Result};
use crate::pretrain::random_directions;
use crate::rng;
use crate::tensor::{jvp, traced, vjp, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub sigma: f64,
    /// Approximate top right singular vector, shaped like the input.
    pub vector: Tensor,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on `JᵀJ` with `J` the Jacobian of `f` at `x`.
///
/// Each step applies [`jvp`] then [`vjp`]; the estimate `‖Jv‖` is declared
/// converged once two successive values differ by less than `tol`.
pub fn spectral_norm<F>(f: F, x: &Tensor, max_iters: usize, tol: f64, seed: u64) -> Result<SpectralEstimate>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if max_iters == 0 {
        return Err(Error::invalid("power iteration needs at least one step"));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let mut v = random_directions(&shape, &mut rng::named(seed, "spectral_norm", 0)).reshape(x.shape())?;
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        let u = jvp(&f, x, &v)?;
        let sigma = u.norm();
        let (_, w) = vjp(&f, x, &u)?;
        let n = w.norm();
        if n == 0.0 {
            return Ok(SpectralEstimate { sigma: 0.0, vector: v, iterations: it, converged: true });
        }
        v = w.scale(1.0 / n);
        if (sigma - prev).abs() < tol {
            return Ok(SpectralEstimate { sigma, vector: v, iterations: it, converged: true });
        }
        prev = sigma;
    }
    Ok(SpectralEstimate { sigma: prev, vector: v, iterations: max_iters, converged: false })
}

/// Full Jacobian (`outputs × inputs`, both flattened) by one backward sweep per output.
pub fn dense_jacobian<F>(f: F, x: &Tensor) -> Result<DMatrix<f64>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    let m = y.value().numel();
    let n = x.numel();
    let mut j = DMatrix::zeros(m, n);
    for i in 0..m {
        let root = y.gather(vec![i].into(), &[1])?.sum_all();
        let g = tape.backward(root)?;
        for (c, v) in g.wrt(xv).data().iter().enumerate() {
            j[(i, c)] = *v;
        }
    }
    Ok(j)
}

/// Per-sample Jacobians of a map that treats the leading batch axis independently.
///
/// Output `c` of every sample is differentiated in one sweep over the whole
/// batch, so the cost is one backward pass per output coordinate.
pub fn batched_jacobians<F>(f: F, x: &Tensor) -> Result<Vec<DMatrix<f64>>>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let b = *x.shape().first().ok_or_else(|| Error::shape("batched_jacobians", "rank 0 input"))?;
    let n = x.numel() / b.max(1);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&tape, xv)?;
    if y.shape().first() != Some(&b) {
        return Err(Error::shape("batched_jacobians", format!("output {:?} for batch {b}", y.shape())));
    }
    let m = y.value().numel() / b.max(1);
    let mut out = vec![DMatrix::zeros(m, n); b];
    for c in 0..m {
        let idx: Vec<usize> = (0..b).map(|i| i * m + c).collect();
        let root = y.gather(idx.into(), &[b])?.sum_all();
        let g = tape.backward(root)?;
        for (i, row) in g.wrt(xv).data().chunks(n).enumerate() {
            for (k, v) in row.iter().enumerate() {
                out[i][(c, k)] = *v;
            }
        }
    }
    Ok(out)
}

pub fn max_singular_value(j: &DMatrix<f64>) -> f64 {
    j.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Power-iteration estimates against dense SVD on random small networks.
pub(super) fn spectral_vs_dense(nets: usize, seed: u64) -> Result<VerifyReport> {
    let spec = TinyNetSpec { input_dim: 32, hidden: 24, out_dim: 16, ..TinyNetSpec::default() };
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    for t in 0..nets as u64 {
        let mut r = rng::named(seed, "spectral_vs_dense", t);
        let net = TinyNet::new(&spec, &mut r);
        let x = Tensor::randn(&[1, spec.input_dim], &mut r);
        let f = traced(|tape, x| net.encode(tape, x));
        let est = spectral_norm(f, &x, 2000, 1e-12, seed ^ t)?;
        if !est.converged {
            unconverged += 1;
        }
        let exact = max_singular_value(&dense_jacobian(f, &x)?);
        worst = worst.max((est.sigma - exact).abs() / exact);
    }
    Ok(VerifyReport::new("spectral_norm", worst, 1e-4, 0.0, Relation::AtMost, nets, seed).with("unconverged", unconverged as f64))
}
