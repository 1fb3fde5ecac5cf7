use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{invert_axes, permute, AttentionLayout, Im2col, MatmulLayout};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_8;
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Gelu,
    Relu,
    Exp,
    Log,
    Abs,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary),
    MatMul(usize, usize, MatmulLayout),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T> },
    Attention { q: usize, k: usize, v: usize, layout: AttentionLayout, probs: Vec<T> },
    L2Normalize { x: usize, norms: Vec<T> },
    Concat { inputs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Gather { table: usize, ids: Vec<usize> },
    Im2col(usize, Im2col),
    Clamp(usize, T, T),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, u) => match u {
                Unary::Gelu => "gelu",
                Unary::Relu => "relu",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Abs => "abs",
            },
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Im2col(..) => "im2col",
            Op::Clamp(..) => "clamp",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order, so every node's
/// inputs precede it and a single reverse sweep visits each node once.
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real = f32> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, node.op.kind(), node.value.shape())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 || (b.len() <= a.len() && a.ends_with(b)) {
        Some(a.to_vec())
    } else if na == 1 || (a.len() <= b.len() && b.ends_with(a)) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Visits `(out, a, b)` flat indices of a suffix/scalar broadcast without
/// per-element division in the common cases.
#[inline]
fn zip_bcast(n: usize, la: usize, lb: usize, mut f: impl FnMut(usize, usize, usize)) {
    if la == n && lb == n {
        for i in 0..n {
            f(i, i, i);
        }
    } else if la == n && lb > 0 && n % lb == 0 {
        for o in (0..n).step_by(lb) {
            for j in 0..lb {
                f(o + j, o + j, j);
            }
        }
    } else if lb == n && la > 0 && n % la == 0 {
        for o in (0..n).step_by(la) {
            for j in 0..la {
                f(o + j, j, o + j);
            }
        }
    } else {
        for i in 0..n {
            f(i, i % la, i % lb);
        }
    }
}

/// `tanh` through one `exp`; saturates cleanly at both ends.
#[inline]
pub(crate) fn tanh<T: Real>(u: T) -> T {
    let e = (u + u).exp();
    T::one() - (T::one() + T::one()) / (e + T::one())
}

/// Adds `g` into the gradient of `id`, taking a copy when it is the first
/// contribution.
fn acc_add<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    match &mut grads[id] {
        Some(d) => {
            for (d, &gv) in d.iter_mut().zip(g) {
                *d += gv;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), backward_done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { id: nodes.len() - 1, graph: self }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.id)?.as_ref()?;
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("gradient matches value shape"))
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.backward_done.set(true);
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !nodes[loss.id].requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: &[T]) {
    let val = |i: usize| nodes[i].value.data();
    let rg = |i: usize| nodes[i].requires_grad;
    let len = |i: usize| nodes[i].value.numel();
    let out = nodes[id].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -T::one() } else { T::one() };
            let (la, lb) = (len(a), len(b));
            if rg(a) && la == g.len() {
                acc_add(grads, a, g);
            } else if rg(a) {
                let ga = acc(grads, a, la);
                zip_bcast(g.len(), la, lb, |i, ia, _| ga[ia] += g[i]);
            }
            if rg(b) {
                let gb = acc(grads, b, lb);
                zip_bcast(g.len(), la, lb, |i, _, ib| gb[ib] += sign * g[i]);
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (la, lb) = (va.len(), vb.len());
            if rg(a) {
                let ga = acc(grads, a, la);
                zip_bcast(g.len(), la, lb, |i, ia, ib| ga[ia] += g[i] * vb[ib]);
            }
            if rg(b) {
                let gb = acc(grads, b, lb);
                zip_bcast(g.len(), la, lb, |i, ia, ib| gb[ib] += g[i] * va[ia]);
            }
        }
        &Op::Scale(a, c) => {
            let ga = acc(grads, a, g.len());
            for (d, &gv) in ga.iter_mut().zip(g) {
                *d += c * gv;
            }
        }
        &Op::AddScalar(a) | &Op::Reshape(a) => acc_add(grads, a, g),
        &Op::Unary(a, kind) => {
            let x = val(a);
            let ga = acc(grads, a, g.len());
            let c = T::of(GELU_C);
            let k = T::of(GELU_A);
            let half = T::of(0.5);
            let three = T::of(3.0);
            if matches!(kind, Unary::Gelu) {
                for i in 0..g.len() {
                    let xi = x[i];
                    let t = tanh(c * (xi + k * xi * xi * xi));
                    let d = half * (T::one() + t)
                        + half * xi * (T::one() - t * t) * c * (T::one() + three * k * xi * xi);
                    ga[i] += g[i] * d;
                }
                return;
            }
            for i in 0..g.len() {
                let xi = x[i];
                let d = match kind {
                    Unary::Gelu => {
                        let t = tanh(c * (xi + k * xi * xi * xi));
                        half * (T::one() + t)
                            + half * xi * (T::one() - t * t) * c * (T::one() + three * k * xi * xi)
                    }
                    Unary::Relu => {
                        if xi > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                    Unary::Exp => out[i],
                    Unary::Log => T::one() / xi,
                    Unary::Abs => {
                        if xi > T::zero() {
                            T::one()
                        } else if xi < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    }
                };
                ga[i] += g[i] * d;
            }
        }
        Op::MatMul(a, b, layout) => {
            let (a, b) = (*a, *b);
            let (va, vb) = (val(a), val(b));
            let mut da = rg(a).then(|| grads[a].take().unwrap_or_else(|| vec![T::zero(); va.len()]));
            let mut db = rg(b).then(|| grads[b].take().unwrap_or_else(|| vec![T::zero(); vb.len()]));
            layout.backward(va, vb, g, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                grads[a] = Some(da);
            }
            if let Some(db) = db {
                grads[b] = Some(db);
            }
        }
        Op::Permute(a, axes) => {
            let a = *a;
            let inv = invert_axes(axes);
            let (_, back) = permute(nodes[id].value.shape(), g, &inv).expect("valid inverse permutation");
            let ga = acc(grads, a, back.len());
            for (d, v) in ga.iter_mut().zip(back) {
                *d += v;
            }
        }
        &Op::Sum(a) | &Op::Mean(a) => {
            let n = len(a);
            let gv = if matches!(nodes[id].op, Op::Mean(_)) { g[0] / T::of(n as f64) } else { g[0] };
            let ga = acc(grads, a, n);
            ga.iter_mut().for_each(|d| *d += gv);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let gam = val(gamma);
            let dim = gam.len();
            let rows = xhat.len() / dim;
            if rg(gamma) {
                let gg = acc(grads, gamma, dim);
                for r in 0..rows {
                    for j in 0..dim {
                        gg[j] += g[r * dim + j] * xhat[r * dim + j];
                    }
                }
            }
            if rg(beta) {
                let gb = acc(grads, beta, dim);
                for r in 0..rows {
                    for j in 0..dim {
                        gb[j] += g[r * dim + j];
                    }
                }
            }
            if rg(x) {
                let gx = acc(grads, x, rows * dim);
                let inv_d = T::one() / T::of(dim as f64);
                let mut dxhat = vec![T::zero(); dim];
                for r in 0..rows {
                    let o = r * dim;
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..dim {
                        dxhat[j] = g[o + j] * gam[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[o + j];
                    }
                    mean_d = mean_d * inv_d;
                    mean_dx = mean_dx * inv_d;
                    for j in 0..dim {
                        gx[o + j] += rstd[r] * (dxhat[j] - mean_d - xhat[o + j] * mean_dx);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let logits = *logits;
            let rows = targets.len();
            let v = probs.len() / rows.max(1);
            let count = targets.iter().filter(|t| t.is_some()).count();
            let scale = g[0] / T::of(count as f64);
            let gl = acc(grads, logits, rows * v);
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                for j in 0..v {
                    let onehot = if j == t { T::one() } else { T::zero() };
                    gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                }
            }
        }
        Op::Attention { q, k, v, layout, probs } => {
            let (q, k, v) = (*q, *k, *v);
            let n = len(q);
            let mut dq = rg(q).then(|| grads[q].take().unwrap_or_else(|| vec![T::zero(); n]));
            let mut dk = rg(k).then(|| grads[k].take().unwrap_or_else(|| vec![T::zero(); n]));
            let mut dv = rg(v).then(|| grads[v].take().unwrap_or_else(|| vec![T::zero(); n]));
            layout.backward(
                val(q),
                val(k),
                val(v),
                probs,
                g,
                dq.as_deref_mut(),
                dk.as_deref_mut(),
                dv.as_deref_mut(),
            );
            for (id, d) in [(q, dq), (k, dk), (v, dv)] {
                if let Some(d) = d {
                    grads[id] = Some(d);
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let x = *x;
            let dim = g.len() / norms.len();
            let gx = acc(grads, x, g.len());
            for (r, &nrm) in norms.iter().enumerate() {
                let o = r * dim;
                let y = &out[o..o + dim];
                let gr = &g[o..o + dim];
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..dim {
                    gx[o + j] += (gr[j] - y[j] * dot) / nrm;
                }
            }
        }
        Op::Concat { inputs, outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut offset = 0;
            for (&inp, &chunk) in inputs.iter().zip(chunks) {
                if rg(inp) {
                    let gi = acc(grads, inp, outer * chunk);
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, &s) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Gather { table, ids } => {
            let table = *table;
            let dim = g.len() / ids.len().max(1);
            let gt = acc(grads, table, len(table));
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..dim {
                    gt[i * dim + j] += g[r * dim + j];
                }
            }
        }
        Op::Im2col(a, geom) => {
            let a = *a;
            let ga = acc(grads, a, len(a));
            geom.backward(g, ga);
        }
        &Op::Clamp(a, lo, hi) => {
            let x = val(a);
            let ga = acc(grads, a, g.len());
            for i in 0..g.len() {
                if x[i] >= lo && x[i] <= hi {
                    ga[i] += g[i];
                }
            }
        }
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.value(*self)
    }

    /// Copy of the value.
    pub fn tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn same_graph(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn binary(self, other: Var<'g, T>, name: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        self.same_graph(&other);
        let nodes = self.graph.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(format!("{name} of {:?} and {:?}", a.shape(), b.shape()))
        })?;
        let (la, lb) = (a.numel(), b.numel());
        let n: usize = shape.iter().product();
        let (da, db) = (a.data(), b.data());
        let mut data = vec![T::zero(); n];
        zip_bcast(n, la, lb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((Tensor::new(shape, data)?, rg))
    }

    /// Elementwise sum; `other` may be a scalar or a trailing-suffix shape.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (t, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.graph.push(t, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (t, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.graph.push(t, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (t, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.graph.push(t, Op::Mul(self.id, other.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let t = self.value().map(|v| v * c);
        self.graph.push(t, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let t = self.value().map(|v| v + c);
        self.graph.push(t, Op::AddScalar(self.id), self.requires_grad())
    }

    fn unary(self, kind: Unary) -> Var<'g, T> {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        let v = self.value();
        let t = match kind {
            Unary::Gelu => v.map(|x| half * x * (T::one() + tanh(c * (x + k * x * x * x)))),
            Unary::Relu => v.map(|x| x.max(T::zero())),
            Unary::Exp => v.map(|x| x.exp()),
            Unary::Log => v.map(|x| x.ln()),
            Unary::Abs => v.map(|x| x.abs()),
        };
        drop(v);
        self.graph.push(t, Op::Unary(self.id, kind), self.requires_grad())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, T> {
        self.unary(Unary::Gelu)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Unary::Relu)
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(Unary::Abs)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let t = self.value().map(|v| v.max(lo).min(hi));
        self.graph.push(t, Op::Clamp(self.id, lo, hi), self.requires_grad())
    }

    /// Batched matrix product `[.., M, K] x [.., K, N]` with broadcasting batch dimensions.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (t, layout) = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let layout = MatmulLayout::new(a.shape(), b.shape())?;
            let data = layout.forward(a.data(), b.data());
            (Tensor::new(layout.out_shape.clone(), data)?, layout)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(t, Op::MatMul(self.id, other.id, layout), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let t = self.tensor().reshape(shape.to_vec())?;
        Ok(self.graph.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let t = self.value().permute(axes)?;
        Ok(self.graph.push(t, Op::Permute(self.id, axes.to_vec()), self.requires_grad()))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape(format!("transpose needs rank >= 2, got {:?}", self.shape())));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn sum(self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'g, T> {
        let v = self.value();
        let n = T::of(v.numel().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        drop(v);
        self.graph.push(Tensor::scalar(s / n), Op::Mean(self.id), self.requires_grad())
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let (t, xhat, rstd) = {
            let nodes = self.graph.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gm, bt) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            let dim = *x.shape().last().unwrap_or(&0);
            if dim == 0 || gm.shape() != [dim] || bt.shape() != [dim] {
                return Err(Error::shape(format!(
                    "layer_norm of {:?} with gamma {:?} and beta {:?}",
                    x.shape(),
                    gm.shape(),
                    bt.shape()
                )));
            }
            let rows = x.numel() / dim;
            let eps = T::of(eps);
            let inv_d = T::one() / T::of(dim as f64);
            let mut xhat = vec![T::zero(); x.numel()];
            let mut rstd = vec![T::zero(); rows];
            let mut out = vec![T::zero(); x.numel()];
            let (xd, gd, bd) = (x.data(), gm.data(), bt.data());
            for r in 0..rows {
                let row = &xd[r * dim..(r + 1) * dim];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..dim {
                    let h = (row[j] - mean) * rs;
                    xhat[r * dim + j] = h;
                    out[r * dim + j] = h * gd[j] + bd[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.graph.push(t, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd }, rg))
    }

    /// Mean token-level negative log-likelihood of `[N, V]` logits.
    /// Positions whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(self, targets: &[usize], ignore_index: Option<usize>) -> Result<Var<'g, T>> {
        let (t, probs, tg) = {
            let v = self.value();
            let shape = v.shape();
            if shape.len() != 2 || shape[0] != targets.len() {
                return Err(Error::shape(format!(
                    "cross_entropy of logits {shape:?} with {} targets",
                    targets.len()
                )));
            }
            let vocab = shape[1];
            let tg: Vec<Option<usize>> =
                targets.iter().map(|&t| if Some(t) == ignore_index { None } else { Some(t) }).collect();
            if let Some(bad) = tg.iter().flatten().find(|&&t| t >= vocab) {
                return Err(Error::Invalid(format!("target {bad} outside vocabulary of {vocab}")));
            }
            let count = tg.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return Err(Error::Invalid("every target is ignored; mean loss is undefined".into()));
            }
            let mut probs = vec![T::zero(); v.numel()];
            let mut total = T::zero();
            for (r, t) in tg.iter().enumerate() {
                let row = &v.data()[r * vocab..(r + 1) * vocab];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                    *p = (l - max).exp();
                    sum += *p;
                }
                probs[r * vocab..(r + 1) * vocab].iter_mut().for_each(|p| *p = *p / sum);
                if let Some(t) = *t {
                    total += sum.ln() + max - row[t];
                }
            }
            (Tensor::scalar(total / T::of(count as f64)), probs, tg)
        };
        let rg = self.requires_grad();
        Ok(self.graph.push(t, Op::CrossEntropy { logits: self.id, targets: tg, probs }, rg))
    }

    /// Unit-normalizes each row along the last axis.
    pub fn l2_normalize(self) -> Var<'g, T> {
        self.l2_normalize_eps(1e-24)
    }

    /// `x / sqrt(|x|^2 + eps)` along the last axis.
    pub fn l2_normalize_eps(self, eps: f64) -> Var<'g, T> {
        let eps = T::of(eps);
        let (t, norms) = {
            let v = self.value();
            let dim = *v.shape().last().unwrap_or(&1);
            let rows = v.numel() / dim.max(1);
            let mut out = v.data().to_vec();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut out[r * dim..(r + 1) * dim];
                let n = (row.iter().map(|&x| x * x).sum::<T>() + eps).sqrt();
                row.iter_mut().for_each(|x| *x = *x / n);
                norms.push(n);
            }
            (Tensor::new(v.shape().to_vec(), out).expect("same shape"), norms)
        };
        self.graph.push(t, Op::L2Normalize { x: self.id, norms }, self.requires_grad())
    }

    /// Gathers rows of a `[V, D]` table; output is `[ids.len(), D]`.
    pub fn gather(self, ids: &[usize]) -> Result<Var<'g, T>> {
        let t = {
            let v = self.value();
            let shape = v.shape();
            if shape.len() != 2 {
                return Err(Error::shape(format!("gather needs a [V, D] table, got {shape:?}")));
            }
            let (rows, dim) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &i in ids {
                if i >= rows {
                    return Err(Error::Invalid(format!("index {i} outside table of {rows} rows")));
                }
                data.extend_from_slice(&v.data()[i * dim..(i + 1) * dim]);
            }
            Tensor::new(vec![ids.len(), dim], data)?
        };
        Ok(self.graph.push(t, Op::Gather { table: self.id, ids: ids.to_vec() }, self.requires_grad()))
    }

    /// Extracts zero-padded `kernel x kernel` patches from `[N, H, W, C]`.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel {
            return Err(Error::shape(format!("im2col k={kernel} s={stride} p={pad} of {s:?}")));
        }
        let geom = Im2col { n: s[0], h: s[1], w: s[2], c: s[3], kernel, stride, pad };
        let (ho, wo) = geom.out_hw();
        let data = geom.forward(self.value().data());
        let t = Tensor::new(vec![s[0], ho, wo, kernel * kernel * s[3]], data)?;
        Ok(self.graph.push(t, Op::Im2col(self.id, geom), self.requires_grad()))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g, T: Real>(inputs: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let graph = first.graph;
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| v.shape()).collect();
    let base = &shapes[0];
    if axis >= base.len()
        || shapes.iter().any(|s| {
            s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        })
    {
        return Err(Error::shape(format!("concat along axis {axis} of {shapes:?}")));
    }
    let outer: usize = base[..axis].iter().product();
    let chunks: Vec<usize> = shapes.iter().map(|s| s[axis..].iter().product()).collect();
    let total: usize = chunks.iter().sum();
    let mut data = vec![T::zero(); outer * total];
    {
        let nodes = graph.nodes.borrow();
        let mut offset = 0;
        for (v, &chunk) in inputs.iter().zip(&chunks) {
            let src = nodes[v.id].value.data();
            for o in 0..outer {
                data[o * total + offset..o * total + offset + chunk]
                    .copy_from_slice(&src[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
    }
    let mut shape = base.clone();
    shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let rg = inputs.iter().any(|v| v.requires_grad());
    let ids = inputs.iter().map(|v| v.id).collect();
    Ok(graph.push(Tensor::new(shape, data)?, Op::Concat { inputs: ids, outer, chunks }, rg))
}

/// `softmax(q k^T / sqrt(Dh)) v` over `[B, H, T, Dh]`. `causal` hides later
/// positions; `key_mask` (`[B, T]`, row-major) hides keys marked false.
pub fn attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<Var<'g, T>> {
    let s = q.shape();
    if s.len() != 4 || k.shape() != s || v.shape() != s || s[3] == 0 {
        return Err(Error::shape(format!(
            "attention of q {:?}, k {:?}, v {:?}",
            s,
            k.shape(),
            v.shape()
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != s[0] * s[2] {
            return Err(Error::shape(format!("key mask of {} for batch {} x {} tokens", m.len(), s[0], s[2])));
        }
    }
    let layout = AttentionLayout { b: s[0], h: s[1], t: s[2], dh: s[3], causal, key_mask: key_mask.map(<[bool]>::to_vec) };
    let (out, probs) = {
        let nodes = q.graph.nodes.borrow();
        layout.forward(nodes[q.id].value.data(), nodes[k.id].value.data(), nodes[v.id].value.data())
    };
    let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
    let t = Tensor::new(s, out)?;
    Ok(q.graph.push(t, Op::Attention { q: q.id, k: k.id, v: v.id, layout, probs }, rg))
}
