//! Alignment of the one-step VAA direction with the KL Hessian's top eigenvector.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Relation, VerifyReport};
use crate::error::{Error, Result};
use crate::nn::{init_linear, ParamStore};
use crate::pretrain::{kl_to_reference, random_directions, reference_distribution, vaa_perturb};
use crate::rng;
use crate::tensor::{traced, Tape, Tensor, Var};

/// Finite-difference step for the Hessian columns.
pub const HESSIAN_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyNetSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub keys: usize,
    pub tau: f64,
}

impl Default for TinyNetSpec {
    fn default() -> Self {
        TinyNetSpec { input_dim: 8, hidden: 16, out_dim: 4, keys: 4, tau: 0.2 }
    }
}

/// `x ↦ normalize(W₂ tanh(W₁x + b₁) + b₂)`.
#[derive(Clone, Debug)]
pub struct TinyNet {
    pub params: ParamStore,
}

impl TinyNet {
    pub fn new<R: Rng + ?Sized>(spec: &TinyNetSpec, rng: &mut R) -> Self {
        let mut p = ParamStore::new();
        init_linear(&mut p, "fc1", spec.input_dim, spec.hidden, rng);
        init_linear(&mut p, "fc2", spec.hidden, spec.out_dim, rng);
        for (name, n) in [("fc1.b", spec.hidden), ("fc2.b", spec.out_dim)] {
            p.insert(name, Tensor::uniform(&[n], 0.5, rng));
        }
        TinyNet { params: p }
    }

    /// `[B, in]` to `[B, out]` unit rows, parameters held constant.
    pub fn encode<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let p = self.params.bind(tape, false);
        let h = p.linear("fc1", x)?.tanh();
        p.linear("fc2", h)?.l2_normalize()
    }
}

fn kl_gradient(net: &TinyNet, x: &Tensor, p: &Tensor, keys: &Tensor, tau: f64) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let z = net.encode(&tape, xv)?;
    let kl = kl_to_reference(tape.constant(p.clone()), z, tape.constant(keys.clone()), tau)?;
    Ok(tape.backward(kl)?.wrt(xv).data().to_vec())
}

/// Symmetrized Hessian of `r ↦ KL(P(·|x) ‖ P(·|x + r))` at `r = 0`,
/// by central differences of the exact gradient.
pub fn kl_hessian(net: &TinyNet, x: &Tensor, keys: &Tensor, tau: f64, step: f64) -> Result<DMatrix<f64>> {
    let tape = Tape::new();
    let z0 = net.encode(&tape, tape.constant(x.clone()))?.tensor();
    let p = reference_distribution(&z0, keys, tau)?;
    let d = x.numel();
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        xp.data_mut()[j] += step;
        let mut xm = x.clone();
        xm.data_mut()[j] -= step;
        let gp = kl_gradient(net, &xp, &p, keys, tau)?;
        let gm = kl_gradient(net, &xm, &p, keys, tau)?;
        for i in 0..d {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Eigenvalues in descending order with matching eigenvectors as columns.
pub fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..e.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(e.eigenvectors.nrows(), order.len(), |r, c| e.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Share of non-degenerate random tiny encoders on which the one-step VAA
/// direction has `|cos| ≥ 0.9` with the dominant Hessian eigenvector.
pub fn vaa_vs_hessian(spec: &TinyNetSpec, trials: usize, seed: u64) -> Result<VerifyReport> {
    if spec.input_dim == 0 || spec.input_dim > 16 || trials == 0 {
        return Err(Error::invalid("tiny encoders need 1..=16 inputs and at least one trial"));
    }
    let mut cosines = Vec::with_capacity(trials);
    let mut degenerate = 0;
    for t in 0..trials as u64 {
        let mut r = rng::named(seed, "vaa_vs_hessian", t);
        let net = TinyNet::new(spec, &mut r);
        let keys = random_directions(&[spec.keys, spec.out_dim], &mut r);
        let x = Tensor::randn(&[1, spec.input_dim], &mut r);
        let (vals, vecs) = sorted_eigen(kl_hessian(&net, &x, &keys, spec.tau, HESSIAN_STEP)?);
        let (l1, l2) = (vals[0], vals.get(1).copied().unwrap_or(0.0));
        if !(l1 > 0.0) || l1 - l2 < 1e-8 * l1 {
            degenerate += 1;
            continue;
        }
        let tape = Tape::new();
        let z0 = net.encode(&tape, tape.constant(x.clone()))?.tensor();
        let p = reference_distribution(&z0, &keys, spec.tau)?;
        let encode = traced(|tape, x| net.encode(tape, x));
        let res = vaa_perturb(encode, &x, &p, &keys, spec.tau, 1.0, 1e-6, 1, &mut r)?;
        let d = res.direction.data();
        let cos: f64 = (0..spec.input_dim).map(|i| d[i] * vecs[(i, 0)]).sum::<f64>().abs();
        cosines.push(cos);
    }
    let used = cosines.len();
    let rate = if used > 0 { cosines.iter().filter(|&&c| c >= 0.9).count() as f64 / used as f64 } else { 0.0 };
    let mean = cosines.iter().sum::<f64>() / used.max(1) as f64;
    let mut sorted = cosines.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted.get(used / 2).copied().unwrap_or(f64::NAN);
    Ok(VerifyReport::new("vaa_vs_hessian", rate, 0.9, 0.0, Relation::AtLeast, trials, seed)
        .with("degenerate", degenerate as f64)
        .with("mean_abs_cos", mean)
        .with("median_abs_cos", median))
}
