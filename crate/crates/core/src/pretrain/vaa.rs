//! Virtual adversarial perturbation of a batch of inputs.

use rand::Rng;

use super::losses::kl_to_reference;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Perturbed batch and the number of samples whose gradient vanished.
#[derive(Clone, Debug)]
pub struct VaaResult {
    pub x_adv: Tensor,
    pub direction: Tensor,
    pub fallbacks: usize,
}

/// Unit-norm random direction per sample of a `[B, ..]` batch.
pub fn random_directions<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut d = Tensor::randn(shape, rng);
    let per = d.numel() / shape[0].max(1);
    for row in d.data_mut().chunks_mut(per.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    d
}

/// Power iteration on the KL Hessian by finite differences of its gradient.
///
/// `encode` maps a `[B, ..]` input leaf to `[B, D]` unit embeddings with
/// parameters held constant. `reference` is `[B, K]` rows of `P(·|x)` and
/// `keys` the `[K, D]` key set. Each sample's perturbation has norm exactly
/// `epsilon`; samples whose gradient is zero or non-finite keep their random
/// start direction and are counted in `fallbacks`.
#[allow(clippy::too_many_arguments)]
pub fn vaa_perturb<F, R>(
    encode: F,
    x: &Tensor,
    reference: &Tensor,
    keys: &Tensor,
    tau: f64,
    epsilon: f64,
    xi: f64,
    iters: usize,
    rng: &mut R,
) -> Result<VaaResult>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
    R: Rng + ?Sized,
{
    if !(epsilon >= 0.0 && xi > 0.0 && iters >= 1) {
        return Err(Error::invalid("VAA needs ε ≥ 0, ξ > 0 and at least one power step"));
    }
    let b = x.shape()[0];
    let per = x.numel() / b.max(1);
    let d0 = random_directions(x.shape(), rng);
    let mut d = d0.clone();
    let mut fallback = vec![false; b];
    for _ in 0..iters {
        let tape = Tape::new();
        let xr = tape.param(x.axpy(xi, &d)?);
        let z = encode(&tape, xr)?;
        let p = tape.constant(reference.clone());
        let k = tape.constant(keys.clone());
        let kl = kl_to_reference(p, z, k, tau)?;
        let grads = tape.backward(kl)?;
        let g = grads.wrt(xr);
        let dd = d.data_mut();
        for (i, row) in g.data().chunks(per).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                fallback[i] = false;
                for (t, v) in dd[i * per..(i + 1) * per].iter_mut().zip(row) {
                    *t = v / n;
                }
            } else {
                fallback[i] = true;
                dd[i * per..(i + 1) * per].copy_from_slice(&d0.data()[i * per..(i + 1) * per]);
            }
        }
    }
    let direction = d;
    Ok(VaaResult {
        x_adv: x.axpy(epsilon, &direction)?,
        direction,
        fallbacks: fallback.iter().filter(|&&f| f).count(),
    })
}

/// `P(·|x)` rows for `[B, D]` embeddings against `[K, D]` keys.
pub fn reference_distribution(z: &Tensor, keys: &Tensor, tau: f64) -> Result<Tensor> {
    let tape = Tape::new();
    let zv = tape.constant(z.clone());
    let kv = tape.constant(keys.clone());
    Ok(zv.matmul(&kv.transpose_last()?)?.mul_scalar(1.0 / tau).softmax(1)?.tensor())
}

