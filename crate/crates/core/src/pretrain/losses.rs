use crate::error::{Error, Result};
use crate::tensor::Var;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `P(i) = softmax_i(q·k_i / τ)` over a key set.
pub fn key_distribution(q: &[f64], keys: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::invalid("key distribution needs at least one key"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(softmax(&keys.iter().map(|k| dot(q, k) / tau).collect::<Vec<_>>()))
}

/// `−log(e^{l₊/τ} / (e^{l₊/τ} + Σ e^{l₋/τ}))` for one query.
pub fn info_nce(q: &[f64], k_pos: &[f64], k_negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut logits = vec![dot(q, k_pos) / tau];
    logits.extend(k_negs.iter().map(|k| dot(q, k) / tau));
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[0]
}

/// Batch InfoNCE: query `i` is positive with key `i` and negative with every
/// other key in the batch. `q`, `keys` are `[B, D]`; keys should carry no gradient.
pub fn info_nce_batch<'t>(q: Var<'t>, keys: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let b = q.shape()[0];
    if keys.shape() != q.shape() {
        return Err(Error::shape("info_nce", format!("queries {:?} vs keys {:?}", q.shape(), keys.shape())));
    }
    let logp = q.matmul(&keys.transpose_last()?)?.mul_scalar(1.0 / tau).log_softmax(1)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    Ok(logp.gather(diag.into(), &[b])?.mean_all().neg())
}

/// `mean_i (1 − cos(sg(anchor_i), z_i))`; only `z` receives gradient.
pub fn sc_loss<'t>(anchor: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
    {
        let a = anchor.value();
        let d = *a.shape().last().unwrap_or(&1);
        if a.data().chunks(d).chain(z.value().data().chunks(d)).any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid("semantic-consistency loss on a zero-norm embedding"));
        }
    }
    Ok(anchor.stop_gradient().cosine_similarity(&z)?.neg().add_scalar(1.0).mean_all())
}

/// `Σ_i KL(P_i ‖ softmax(z_i·Kᵀ/τ))` against fixed reference rows `p` (`[B, K]`).
pub fn kl_to_reference<'t>(p: Var<'t>, z: Var<'t>, keys: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let logq = z.matmul(&keys.transpose_last()?)?.mul_scalar(1.0 / tau).log_softmax(1)?;
    let plogp: f64 = p.value().data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
    Ok(p.mul(&logq)?.sum_all().neg().add_scalar(plogp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nce_symmetric_cases() {
        let q = vec![1.0, 0.0];
        assert!((info_nce(&q, &q, &[q.clone()], 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!((info_nce(&q, &q, &[q.clone(), q.clone(), q.clone()], 0.5) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_keys_rejected() {
        assert!(key_distribution(&[1.0], &[], 0.2).is_err());
    }
}
