//! Named parameter sets, binding onto a tape, and common layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Gradients, Tape, Tensor, Var};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.params.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// Leaves on `tape` for every parameter.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect();
        Bound { vars }
    }

    /// Copy of the entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let params = self.params.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { params }
    }

    /// Merge `other` under its own names, replacing duplicates.
    pub fn extend(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// `self ← m·self + (1−m)·other`, elementwise; names and shapes must match.
    pub fn momentum_update(&mut self, other: &ParamStore, m: f64) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape("momentum_update", "parameter sets differ in size"));
        }
        for (name, t) in self.params.iter_mut() {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::shape("momentum_update", format!("{name}: {:?} vs {:?}", t.shape(), o.shape())));
            }
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, self.iter())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_entries(read_checkpoint(path)?))
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamStore { params: entries.into_iter().collect() }
    }

    /// Check that `self` has exactly the names and shapes of `reference`.
    pub fn check_compatible(&self, reference: &ParamStore) -> Result<()> {
        for (k, v) in &reference.params {
            let t = self.get(k)?;
            if t.shape() != v.shape() {
                return Err(Error::shape("parameters", format!("{k}: {:?} vs expected {:?}", t.shape(), v.shape())));
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::invalid(format!("unexpected parameter {extra:?}")));
        }
        Ok(())
    }
}

/// Parameters bound as leaves on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    /// Gradients of every bound parameter, as a store keyed like the source.
    pub fn grads(&self, g: &Gradients) -> ParamStore {
        let params = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect();
        ParamStore { params }
    }

    /// `x·W + b` with `W` stored as `[in, out]`.
    pub fn linear(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.get(&format!("{prefix}.w"))?)?.add(&self.get(&format!("{prefix}.b"))?)
    }

    /// Layer norm over the last axis with learned gain and shift.
    pub fn layer_norm(&self, prefix: &str, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
        x.layer_norm(eps)?.mul(&self.get(&format!("{prefix}.g"))?)?.add(&self.get(&format!("{prefix}.b"))?)
    }
}

/// Fan-in uniform `U(±1/√fan_in)` weight `[fan_in, fan_out]` and zero bias.
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

/// Convolution weight of `shape = [out, in, k..]` with fan-in `in·Πk`, zero bias.
pub fn init_conv<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, shape: &[usize], rng: &mut R) {
    let fan_in: usize = shape[1..].iter().product();
    store.insert(format!("{prefix}.w"), Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&shape[..1]));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[2], v));
        s
    }

    #[test]
    fn momentum_endpoints() {
        let mut k = store(0.0);
        k.momentum_update(&store(2.0), 1.0).unwrap();
        assert_eq!(k, store(0.0));
        k.momentum_update(&store(2.0), 0.5).unwrap();
        assert_eq!(k, store(1.0));
        k.momentum_update(&store(2.0), 0.0).unwrap();
        assert_eq!(k, store(2.0));
    }

    #[test]
    fn momentum_shape_mismatch() {
        let mut k = store(0.0);
        let mut q = ParamStore::new();
        q.insert("a", Tensor::zeros(&[3]));
        assert!(k.momentum_update(&q, 0.5).is_err());
    }
}
