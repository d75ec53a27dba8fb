use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Softmax { a: NodeId, axis: usize },
    LogSoftmax { a: NodeId, axis: usize },
    LayerNorm { a: NodeId, eps: f64 },
    Sum { a: NodeId, axis: usize },
    Mean { a: NodeId, axis: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Reshape(NodeId),
    Permute { a: NodeId, perm: Vec<usize> },
    Slice { a: NodeId, axis: usize, start: usize, end: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Gather { a: NodeId, index: Rc<[usize]> },
    L2Norm(NodeId),
    CosineSim(NodeId, NodeId),
    /// Keeps the activated gates for the backward pass.
    LstmCell { gates: NodeId, c: NodeId, act: Vec<f64> },
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient tape.
///
/// Nodes are appended in evaluation order, so the node list is always a valid
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`; panics if `var` was not a `requires_grad` leaf.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var).expect("no gradient recorded for this node")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf (parameters, inputs we want gradients for).
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'_> {
        let rg = self.rg(parents);
        self.push(value, op, rg)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let nodes = self.nodes.borrow();
        let first = nodes[parts[0].id].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} for rank {}", axis, first.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {}", first, s, axis)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            let n = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * n * inner..(o + 1) * n * inner];
                let dst = o * total * inner + offset * inner;
                data[dst..dst + n * inner].copy_from_slice(src);
            }
            offset += n;
        }
        drop(nodes);
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(Tensor::from_parts(out_shape, data), Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Reverse sweep from a single-element root.
    ///
    /// Every node is visited at most once, in reverse recording order; fan-out
    /// contributions accumulate additively. Returns gradients for all
    /// `requires_grad` leaves (zero for leaves the root does not depend on).
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::invalid("backward root belongs to a different tape"));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if matches!(node.op, Op::Leaf) {
                    out[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backward_node(&nodes, id, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate().skip(root.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow of the forward value. Do not hold it across new ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid(format!("{op}: operands live on different tapes")))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.record(v, op, &[self.id])
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other, name)?;
        let value = {
            let a = self.value();
            let b = other.value();
            let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
            })?;
            let pa = Bcast::plan(&out_shape, a.shape());
            let pb = Bcast::plan(&out_shape, b.shape());
            let n = numel(&out_shape);
            let (ad, bd) = (a.data(), b.data());
            let mut data = vec![0.0; n];
            zip_indices(&pa, &pb, n, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
            Tensor::from_parts(out_shape, data)
        };
        let op = match name {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            "mul" => Op::Mul(self.id, other.id),
            _ => Op::Div(self.id, other.id),
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::MulScalar(self.id, s), |v| v * s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(self).expect("same-shape product")
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), kernels::gelu)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), kernels::fast_tanh)
    }

    /// One LSTM cell update. `self` holds `[B, 4H]` gate pre-activations in
    /// i, f, g, o order and `c` the `[B, H]` previous cell; the result is
    /// `[B, 2H]` with the new hidden state followed by the new cell.
    pub fn lstm_cell(&self, c: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(c, "lstm_cell")?;
        let (value, act) = {
            let gv = self.value();
            let cv = c.value();
            let (gs, cs) = (gv.shape(), cv.shape());
            if gs.len() != 2 || cs.len() != 2 || gs[0] != cs[0] || gs[1] != 4 * cs[1] {
                return Err(Error::shape("lstm_cell", format!("gates {gs:?} with cell {cs:?}")));
            }
            let (b, h) = (cs[0], cs[1]);
            let mut out = vec![0.0; b * 2 * h];
            let mut act = vec![0.0; b * 4 * h];
            for r in 0..b {
                let g = &gv.data()[r * 4 * h..(r + 1) * 4 * h];
                let a = &mut act[r * 4 * h..(r + 1) * 4 * h];
                for j in 0..h {
                    a[j] = kernels::sigmoid(g[j]);
                    a[h + j] = kernels::sigmoid(g[h + j]);
                    a[2 * h + j] = kernels::fast_tanh(g[2 * h + j]);
                    a[3 * h + j] = kernels::sigmoid(g[3 * h + j]);
                }
                let cp = &cv.data()[r * h..(r + 1) * h];
                let o = &mut out[r * 2 * h..(r + 1) * 2 * h];
                for j in 0..h {
                    let cn = a[h + j] * cp[j] + a[j] * a[2 * h + j];
                    o[j] = a[3 * h + j] * kernels::fast_tanh(cn);
                    o[h + j] = cn;
                }
            }
            (Tensor::from_parts(vec![b, 2 * h], out), act)
        };
        Ok(self.tape.record(value, Op::LstmCell { gates: self.id, c: c.id, act }, &[self.id, c.id]))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.tensor();
        self.tape.push(v, Op::StopGradient, false)
    }

    /// Matrix product.
    ///
    /// `[.., m, k] x [k, n]` shares the right operand across all leading
    /// dimensions; `[B.., m, k] x [B.., k, n]` multiplies batch-wise.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "matmul")?;
        let value = {
            let a = self.value();
            let b = other.value();
            let plan = MatPlan::new(a.shape(), b.shape())?;
            let mut out = vec![0.0; plan.batch * plan.m * plan.n];
            plan.forward(a.data(), b.data(), &mut out);
            Tensor::from_parts(plan.out_shape, out)
        };
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::shape("transpose", format!("rank {r} < 2")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// 1D convolution of `[B, Cin, L]` with `[Cout, Cin, K]` weights, explicit zero padding.
    pub fn conv1d(&self, w: &Var<'t>, b: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w, "conv1d")?;
        let value = {
            let x = self.value();
            let wt = w.value();
            let (batch, g, cout) = conv1d_geom(x.shape(), wt.shape(), stride, pad)?;
            if let Some(b) = b {
                if b.value().shape() != [cout] {
                    return Err(Error::shape("conv1d", format!("bias {:?} for {} outputs", b.shape(), cout)));
                }
            }
            let bias = b.map(|b| b.tensor());
            let ck = g.cin * g.k;
            let mut cols = vec![0.0; ck * g.out_len];
            let mut out = vec![0.0; batch * cout * g.out_len];
            let xs = g.cin * g.len;
            for bi in 0..batch {
                kernels::im2col_1d(&x.data()[bi * xs..(bi + 1) * xs], &g, &mut cols);
                let o = &mut out[bi * cout * g.out_len..(bi + 1) * cout * g.out_len];
                kernels::gemm(cout, ck, g.out_len, wt.data(), ck as isize, 1, &cols, g.out_len as isize, 1, o, 0.0);
                if let Some(bias) = &bias {
                    for (c, row) in o.chunks_mut(g.out_len).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias.data()[c]);
                    }
                }
            }
            Tensor::from_parts(vec![batch, cout, g.out_len], out)
        };
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        Ok(self.tape.record(
            value,
            Op::Conv1d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad },
            &parents,
        ))
    }

    /// 2D convolution of `[B, Cin, H, W]` with `[Cout, Cin, Kh, Kw]` weights.
    pub fn conv2d(&self, w: &Var<'t>, b: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(w, "conv2d")?;
        let value = {
            let x = self.value();
            let wt = w.value();
            let (batch, g, cout) = conv2d_geom(x.shape(), wt.shape(), stride, pad)?;
            if let Some(b) = b {
                if b.value().shape() != [cout] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", b.shape(), cout)));
                }
            }
            let bias = b.map(|b| b.tensor());
            let ck = g.cin * g.kh * g.kw;
            let ohw = g.out_h * g.out_w;
            let mut cols = vec![0.0; ck * ohw];
            let mut out = vec![0.0; batch * cout * ohw];
            let xs = g.cin * g.h * g.w;
            for bi in 0..batch {
                kernels::im2col_2d(&x.data()[bi * xs..(bi + 1) * xs], &g, &mut cols);
                let o = &mut out[bi * cout * ohw..(bi + 1) * cout * ohw];
                kernels::gemm(cout, ck, ohw, wt.data(), ck as isize, 1, &cols, ohw as isize, 1, o, 0.0);
                if let Some(bias) = &bias {
                    for (c, row) in o.chunks_mut(ohw).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias.data()[c]);
                    }
                }
            }
            Tensor::from_parts(vec![batch, cout, g.out_h, g.out_w], out)
        };
        let mut parents = vec![self.id, w.id];
        parents.extend(b.map(|b| b.id));
        Ok(self.tape.record(
            value,
            Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad },
            &parents,
        ))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let v = self.value();
        let s = v.shape();
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {} out of range for {:?}", axis, s)));
        }
        Ok(split_axis(s, axis))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, n, inner) = self.check_axis(axis, "softmax")?;
        let mut v = self.tensor();
        softmax_in_place(v.data_mut(), outer, n, inner, false);
        Ok(self.tape.record(v, Op::Softmax { a: self.id, axis }, &[self.id]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let (outer, n, inner) = self.check_axis(axis, "log_softmax")?;
        let mut v = self.tensor();
        softmax_in_place(v.data_mut(), outer, n, inner, true);
        Ok(self.tape.record(v, Op::LogSoftmax { a: self.id, axis }, &[self.id]))
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let mut v = self.tensor();
        let d = *v.shape().last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        for row in v.data_mut().chunks_mut(d) {
            let (mean, rstd) = row_stats(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
        }
        Ok(self.tape.record(v, Op::LayerNorm { a: self.id, eps }, &[self.id]))
    }

    fn reduce(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let (outer, n, inner) = self.check_axis(axis, if mean { "mean" } else { "sum" })?;
        let value = {
            let v = self.value();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &v.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|x| *x /= n as f64);
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, out)
        };
        let op = if mean { Op::Mean { a: self.id, axis } } else { Op::Sum { a: self.id, axis } };
        Ok(self.tape.record(value, op, &[self.id]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.tape.record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        self.tape.record(Tensor::scalar(s), Op::MeanAll(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.tensor().reshape(shape)?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let s = v.shape();
            let mut seen = vec![false; s.len()];
            if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape("permute", format!("perm {:?} for shape {:?}", perm, s)));
            }
            let src = v.data();
            let mut data = vec![0.0; src.len()];
            permute_visit(s, perm, |o, i| data[o] = src[i]);
            Tensor::from_parts(perm.iter().map(|&p| s[p]).collect(), data)
        };
        Ok(self.tape.record(value, Op::Permute { a: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let (outer, n, inner) = self.check_axis(axis, "slice")?;
        if start >= end || end > n {
            return Err(Error::shape("slice", format!("range {}..{} on extent {}", start, end, n)));
        }
        let value = {
            let v = self.value();
            let w = end - start;
            let mut out = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                out.extend_from_slice(&v.data()[(o * n + start) * inner..(o * n + end) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = w;
            Tensor::from_parts(shape, out)
        };
        Ok(self.tape.record(value, Op::Slice { a: self.id, axis, start, end }, &[self.id]))
    }

    /// `out.flat[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if numel(shape) != index.len() {
                return Err(Error::shape("gather", format!("{} indices for shape {:?}", index.len(), shape)));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
                return Err(Error::shape("gather", format!("index {} out of {}", bad, v.numel())));
            }
            Tensor::from_parts(shape.to_vec(), index.iter().map(|&i| v.data()[i]).collect())
        };
        Ok(self.tape.record(value, Op::Gather { a: self.id, index }, &[self.id]))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let s = v.shape();
            let d = *s.last().ok_or_else(|| Error::shape("l2_norm", "rank 0"))?;
            let data = v.data().chunks(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
            Tensor::from_parts(s[..s.len() - 1].to_vec(), data)
        };
        Ok(self.tape.record(value, Op::L2Norm(self.id), &[self.id]))
    }

    /// Divide each last-axis row by its Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let mut shape = self.shape();
        let norm = self.l2_norm()?;
        if let Some(last) = shape.last_mut() {
            *last = 1;
        }
        self.div(&norm.reshape(&shape)?)
    }

    /// Cosine similarity over the last axis.
    pub fn cosine_similarity(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other, "cosine_similarity")?;
        let value = {
            let a = self.value();
            let b = other.value();
            if a.shape() != b.shape() || a.rank() == 0 {
                return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let d = *a.shape().last().unwrap();
            let data = a
                .data()
                .chunks(d)
                .zip(b.data().chunks(d))
                .map(|(x, y)| {
                    let (dot, nx, ny) = dot_norms(x, y);
                    dot / (nx * ny)
                })
                .collect();
            Tensor::from_parts(a.shape()[..a.rank() - 1].to_vec(), data)
        };
        Ok(self.tape.record(value, Op::CosineSim(self.id, other.id), &[self.id, other.id]))
    }
}

fn dot_norms(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    (dot, nx.sqrt(), ny.sqrt())
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_in_place(data: &mut [f64], outer: usize, n: usize, inner: usize, log: bool) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(data[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                sum += (data[at(j)] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..n {
                let v = data[at(j)] - lse;
                data[at(j)] = if log { v } else { v.exp() };
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand's flat index follows from an output flat index.
enum Bcast {
    Same,
    /// Operand equals the trailing dims of the output: index modulo its size.
    Cyclic(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], inp: &[usize]) -> Bcast {
        if out == inp {
            return Bcast::Same;
        }
        let n = numel(inp);
        let trimmed: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Cyclic(n.max(1));
        }
        let r = out.len();
        let off = r - inp.len();
        let mut strides = vec![0usize; r];
        let mut acc = 1;
        for i in (0..inp.len()).rev() {
            strides[i + off] = if inp[i] == 1 { 0 } else { acc };
            acc *= inp[i];
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; r];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                flat += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                flat -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cyclic(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

/// Call `f(i, ia, ib)` for every output index with the operand indices, using
/// plain nested loops for the common same-shape and trailing-suffix cases.
#[inline(always)]
fn zip_indices(pa: &Bcast, pb: &Bcast, n: usize, mut f: impl FnMut(usize, usize, usize)) {
    match (pa, pb) {
        (Bcast::Same, Bcast::Same) => (0..n).for_each(|i| f(i, i, i)),
        (Bcast::Same, Bcast::Cyclic(m)) => {
            for r in 0..n / m {
                for j in 0..*m {
                    f(r * m + j, r * m + j, j);
                }
            }
        }
        (Bcast::Cyclic(m), Bcast::Same) => {
            for r in 0..n / m {
                for j in 0..*m {
                    f(r * m + j, j, r * m + j);
                }
            }
        }
        _ => (0..n).for_each(|i| f(i, pa.index(i), pb.index(i))),
    }
}

/// Call `f(out_index, in_index)` for every element of a permutation, in output order.
#[inline(always)]
fn permute_visit(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let r = shape.len();
    let total = numel(shape);
    if r == 0 || total == 0 {
        if total == 1 {
            f(0, 0);
        }
        return;
    }
    let mut in_strides = vec![1usize; r];
    for i in (0..r - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[r - 1];
    let is = strides[r - 1];
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    let mut o = 0usize;
    for _ in 0..total / inner {
        for j in 0..inner {
            f(o + j, base + j * is);
        }
        o += inner;
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

struct MatPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

impl MatPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", format!("{:?} x {:?}", a, b));
        if a.is_empty() || b.len() < 2 {
            return Err(err());
        }
        if b.len() == 2 {
            let k = *a.last().unwrap();
            if k != b[0] {
                return Err(err());
            }
            let m = numel(&a[..a.len() - 1]);
            let mut out_shape = a[..a.len() - 1].to_vec();
            out_shape.push(b[1]);
            return Ok(MatPlan { batch: 1, m, k, n: b[1], shared_rhs: true, out_shape });
        }
        let r = b.len();
        if a.len() != r || a[..r - 2] != b[..r - 2] || a[r - 1] != b[r - 2] {
            return Err(err());
        }
        let mut out_shape = a[..r - 1].to_vec();
        out_shape.push(b[r - 1]);
        Ok(MatPlan {
            batch: numel(&a[..r - 2]),
            m: a[r - 2],
            k: a[r - 1],
            n: b[r - 1],
            shared_rhs: false,
            out_shape,
        })
    }

    fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let bb = if self.shared_rhs { b } else { &b[bi * k * n..(bi + 1) * k * n] };
            kernels::gemm(
                m,
                k,
                n,
                &a[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                bb,
                n as isize,
                1,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
    }
}

fn conv1d_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, Conv1dGeom, usize)> {
    let err = |why: &str| Error::shape("conv1d", format!("input {:?}, weight {:?}: {}", x, w, why));
    if x.len() != 3 || w.len() != 3 {
        return Err(err("expected [B,Cin,L] and [Cout,Cin,K]"));
    }
    if x[1] != w[1] {
        return Err(err("channel mismatch"));
    }
    if stride == 0 || x[2] + 2 * pad < w[2] {
        return Err(err("kernel larger than padded input"));
    }
    let out_len = (x[2] + 2 * pad - w[2]) / stride + 1;
    Ok((x[0], Conv1dGeom { cin: x[1], len: x[2], k: w[2], stride, pad, out_len }, w[0]))
}

fn conv2d_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, Conv2dGeom, usize)> {
    let err = |why: &str| Error::shape("conv2d", format!("input {:?}, weight {:?}: {}", x, w, why));
    if x.len() != 4 || w.len() != 4 {
        return Err(err("expected [B,Cin,H,W] and [Cout,Cin,Kh,Kw]"));
    }
    if x[1] != w[1] {
        return Err(err("channel mismatch"));
    }
    if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
        return Err(err("kernel larger than padded input"));
    }
    let g = Conv2dGeom {
        cin: x[1],
        h: x[2],
        w: x[3],
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: (x[2] + 2 * pad - w[2]) / stride + 1,
        out_w: (x[3] + 2 * pad - w[3]) / stride + 1,
    };
    Ok((x[0], g, w[0]))
}

/// Add `f(i)` into the gradient buffer of `pid` (if it needs one).
/// Add a freshly computed gradient, taking ownership when the parent has none yet.
fn accumulate_owned(nodes: &[Node], grads: &mut [Option<Vec<f64>>], pid: NodeId, g: Vec<f64>) {
    if !nodes[pid].requires_grad {
        return;
    }
    match &mut grads[pid] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
        slot => *slot = Some(g),
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], pid: NodeId, f: impl FnOnce(&mut [f64])) {
    if !nodes[pid].requires_grad {
        return;
    }
    let n = nodes[pid].value.numel();
    let buf = grads[pid].get_or_insert_with(|| vec![0.0; n]);
    f(buf);
}

fn backward_binary(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    out_shape: &[usize],
    a: NodeId,
    b: NodeId,
    g: &[f64],
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) {
    let av = &nodes[a].value;
    let bv = &nodes[b].value;
    let pa = Bcast::plan(out_shape, av.shape());
    let pb = Bcast::plan(out_shape, bv.shape());
    let (ad, bd) = (av.data(), bv.data());
    let n = g.len();
    accumulate(nodes, grads, a, |buf| {
        zip_indices(&pa, &pb, n, |i, ia, ib| buf[ia] += g[i] * da(ad[ia], bd[ib]));
    });
    accumulate(nodes, grads, b, |buf| {
        zip_indices(&pa, &pb, n, |i, ia, ib| buf[ib] += g[i] * db(ad[ia], bd[ib]));
    });
}

fn backward_node(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let out_shape = node.value.shape();
    let elementwise = |grads: &mut [Option<Vec<f64>>], a: NodeId, f: &dyn Fn(f64, f64) -> f64| {
        let x = nodes[a].value.data();
        accumulate(nodes, grads, a, |buf| {
            for i in 0..buf.len() {
                buf[i] += g[i] * f(x[i], y[i]);
            }
        });
    };
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) => backward_binary(nodes, grads, out_shape, *a, *b, g, |_, _| 1.0, |_, _| 1.0),
        Op::Sub(a, b) => backward_binary(nodes, grads, out_shape, *a, *b, g, |_, _| 1.0, |_, _| -1.0),
        Op::Mul(a, b) => backward_binary(nodes, grads, out_shape, *a, *b, g, |_, y| y, |x, _| x),
        Op::Div(a, b) => {
            backward_binary(nodes, grads, out_shape, *a, *b, g, |_, y| 1.0 / y, |x, y| -x / (y * y))
        }
        Op::AddScalar(a) => elementwise(grads, *a, &|_, _| 1.0),
        Op::MulScalar(a, s) => {
            let s = *s;
            elementwise(grads, *a, &move |_, _| s)
        }
        Op::Relu(a) => elementwise(grads, *a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Gelu(a) => elementwise(grads, *a, &|x, _| kernels::gelu_grad(x)),
        Op::Sigmoid(a) => elementwise(grads, *a, &|_, y| y * (1.0 - y)),
        Op::Tanh(a) => elementwise(grads, *a, &|_, y| 1.0 - y * y),
        Op::Exp(a) => elementwise(grads, *a, &|_, y| y),
        Op::Log(a) => elementwise(grads, *a, &|x, _| 1.0 / x),
        Op::Sqrt(a) => elementwise(grads, *a, &|_, y| 0.5 / y),
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let plan = MatPlan::new(av.shape(), bv.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            accumulate(nodes, grads, *a, |buf| {
                for bi in 0..plan.batch {
                    let bb = if plan.shared_rhs { bv.data() } else { &bv.data()[bi * k * n..(bi + 1) * k * n] };
                    // ga = g · bᵀ
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        n as isize,
                        1,
                        bb,
                        1,
                        n as isize,
                        &mut buf[bi * m * k..(bi + 1) * m * k],
                        1.0,
                    );
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for bi in 0..plan.batch {
                    let dst = if plan.shared_rhs { &mut buf[..] } else { &mut buf[bi * k * n..(bi + 1) * k * n] };
                    // gb = aᵀ · g
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        1,
                        k as isize,
                        &g[bi * m * n..(bi + 1) * m * n],
                        n as isize,
                        1,
                        dst,
                        1.0,
                    );
                }
            });
        }
        Op::Conv1d { x, w, b, stride, pad } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (batch, geo, cout) = conv1d_geom(xv.shape(), wv.shape(), *stride, *pad).expect("validated");
            let ck = geo.cin * geo.k;
            let ol = geo.out_len;
            let xs = geo.cin * geo.len;
            let mut cols = vec![0.0; ck * ol];
            if nodes[*w].requires_grad {
                accumulate(nodes, grads, *w, |buf| {
                    for bi in 0..batch {
                        kernels::im2col_1d(&xv.data()[bi * xs..(bi + 1) * xs], &geo, &mut cols);
                        kernels::gemm(
                            cout,
                            ol,
                            ck,
                            &g[bi * cout * ol..(bi + 1) * cout * ol],
                            ol as isize,
                            1,
                            &cols,
                            1,
                            ol as isize,
                            buf,
                            1.0,
                        );
                    }
                });
            }
            accumulate(nodes, grads, *x, |buf| {
                for bi in 0..batch {
                    kernels::gemm(
                        ck,
                        cout,
                        ol,
                        wv.data(),
                        1,
                        ck as isize,
                        &g[bi * cout * ol..(bi + 1) * cout * ol],
                        ol as isize,
                        1,
                        &mut cols,
                        0.0,
                    );
                    kernels::col2im_1d(&cols, &geo, &mut buf[bi * xs..(bi + 1) * xs]);
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |buf| {
                    for (r, row) in g.chunks(ol).enumerate() {
                        buf[r % cout] += row.iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            let (batch, geo, cout) = conv2d_geom(xv.shape(), wv.shape(), *stride, *pad).expect("validated");
            let ck = geo.cin * geo.kh * geo.kw;
            let ohw = geo.out_h * geo.out_w;
            let xs = geo.cin * geo.h * geo.w;
            let mut cols = vec![0.0; ck * ohw];
            if nodes[*w].requires_grad {
                accumulate(nodes, grads, *w, |buf| {
                    for bi in 0..batch {
                        kernels::im2col_2d(&xv.data()[bi * xs..(bi + 1) * xs], &geo, &mut cols);
                        kernels::gemm(
                            cout,
                            ohw,
                            ck,
                            &g[bi * cout * ohw..(bi + 1) * cout * ohw],
                            ohw as isize,
                            1,
                            &cols,
                            1,
                            ohw as isize,
                            buf,
                            1.0,
                        );
                    }
                });
            }
            accumulate(nodes, grads, *x, |buf| {
                for bi in 0..batch {
                    kernels::gemm(
                        ck,
                        cout,
                        ohw,
                        wv.data(),
                        1,
                        ck as isize,
                        &g[bi * cout * ohw..(bi + 1) * cout * ohw],
                        ohw as isize,
                        1,
                        &mut cols,
                        0.0,
                    );
                    kernels::col2im_2d(&cols, &geo, &mut buf[bi * xs..(bi + 1) * xs]);
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |buf| {
                    for (r, row) in g.chunks(ohw).enumerate() {
                        buf[r % cout] += row.iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out_shape, *axis);
            accumulate(nodes, grads, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax { a, axis } => {
            let (outer, n, inner) = split_axis(out_shape, *axis);
            accumulate(nodes, grads, *a, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            buf[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { a, eps } => {
            let x = nodes[*a].value.data();
            let d = *out_shape.last().unwrap();
            accumulate(nodes, grads, *a, |buf| {
                for ((xr, yr), (gr, br)) in x.chunks(d).zip(y.chunks(d)).zip(g.chunks(d).zip(buf.chunks_mut(d))) {
                    let (_, rstd) = row_stats(xr, *eps);
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gym = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for j in 0..d {
                        br[j] += rstd * (gr[j] - gm - yr[j] * gym);
                    }
                }
            });
        }
        Op::Sum { a, axis } | Op::Mean { a, axis } => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let scale = if matches!(node.op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
            accumulate(nodes, grads, *a, |buf| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            buf[(o * n + j) * inner + i] += scale * g[o * inner + i];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, |buf| buf.iter_mut().for_each(|v| *v += g[0])),
        Op::MeanAll(a) => accumulate(nodes, grads, *a, |buf| {
            let s = g[0] / buf.len() as f64;
            buf.iter_mut().for_each(|v| *v += s)
        }),
        Op::Reshape(a) => accumulate_owned(nodes, grads, *a, g.to_vec()),
        Op::Permute { a, perm } => {
            accumulate(nodes, grads, *a, |buf| {
                permute_visit(nodes[*a].value.shape(), perm, |o, i| buf[i] += g[o]);
            });
        }
        Op::Slice { a, axis, start, end } => {
            let (outer, n, inner) = split_axis(nodes[*a].value.shape(), *axis);
            let w = end - start;
            accumulate(nodes, grads, *a, |buf| {
                for o in 0..outer {
                    let dst = &mut buf[(o * n + start) * inner..(o * n + end) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * w * inner..(o + 1) * w * inner]) {
                        *d += s;
                    }
                }
            });
        }
        Op::LstmCell { gates, c, act } => {
            let (b, h) = (out_shape[0], out_shape[1] / 2);
            let cv = nodes[*c].value.data();
            let mut dg = vec![0.0; b * 4 * h];
            let mut dc = vec![0.0; b * h];
            for r in 0..b {
                let a = &act[r * 4 * h..(r + 1) * 4 * h];
                let go = &g[r * 2 * h..(r + 1) * 2 * h];
                let cn = &y[r * 2 * h + h..(r + 1) * 2 * h];
                let d = &mut dg[r * 4 * h..(r + 1) * 4 * h];
                for j in 0..h {
                    let (ig, fg, gg, og) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                    let tc = kernels::fast_tanh(cn[j]);
                    let dcn = go[h + j] + go[j] * og * (1.0 - tc * tc);
                    d[j] = dcn * gg * ig * (1.0 - ig);
                    d[h + j] = dcn * cv[r * h + j] * fg * (1.0 - fg);
                    d[2 * h + j] = dcn * ig * (1.0 - gg * gg);
                    d[3 * h + j] = go[j] * tc * og * (1.0 - og);
                    dc[r * h + j] = dcn * fg;
                }
            }
            accumulate_owned(nodes, grads, *gates, dg);
            accumulate_owned(nodes, grads, *c, dc);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.shape()[*axis];
                accumulate(nodes, grads, p, |buf| {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        for (d, s) in buf[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += n;
            }
        }
        Op::Gather { a, index } => accumulate(nodes, grads, *a, |buf| {
            for (i, &src) in index.iter().enumerate() {
                buf[src] += g[i];
            }
        }),
        Op::L2Norm(a) => {
            let x = nodes[*a].value.data();
            let d = nodes[*a].value.shape().last().copied().unwrap_or(1);
            accumulate(nodes, grads, *a, |buf| {
                for (r, (xr, br)) in x.chunks(d).zip(buf.chunks_mut(d)).enumerate() {
                    if y[r] > 0.0 {
                        for j in 0..d {
                            br[j] += g[r] * xr[j] / y[r];
                        }
                    }
                }
            });
        }
        Op::CosineSim(a, b) => {
            let xa = nodes[*a].value.data();
            let xb = nodes[*b].value.data();
            let d = nodes[*a].value.shape().last().copied().unwrap_or(1);
            let pairs: Vec<(f64, f64, f64)> =
                xa.chunks(d).zip(xb.chunks(d)).map(|(p, q)| dot_norms(p, q)).collect();
            accumulate(nodes, grads, *a, |buf| {
                for (r, (&(_, na, nb), br)) in pairs.iter().zip(buf.chunks_mut(d)).enumerate() {
                    let c = y[r];
                    for j in 0..d {
                        br[j] += g[r] * (xb[r * d + j] / (na * nb) - c * xa[r * d + j] / (na * na));
                    }
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for (r, (&(_, na, nb), br)) in pairs.iter().zip(buf.chunks_mut(d)).enumerate() {
                    let c = y[r];
                    for j in 0..d {
                        br[j] += g[r] * (xa[r * d + j] / (na * nb) - c * xb[r * d + j] / (nb * nb));
                    }
                }
            });
        }
    }
}
