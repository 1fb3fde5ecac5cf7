//! Trainable tokenizer: unified ViT encoder, reconstruction decoder and the
//! text towers of the understanding branch.

mod encoder;
mod features;
mod recon;
mod text;
mod tokenizer;

pub use encoder::{interpolate_pos_embed, UnifiedTokens};
pub use features::FeatureNet;
pub use recon::{perturb, sample_noise, NoiseConfig, ReconLossWeights, ReconLosses};
pub use text::{contrastive_loss, und_loss, CaptionBatch};
pub use tokenizer::{Batch, ModelConfig, ObjectiveWeights, StepLosses, TextConfig, Tokenizer, ViTConfig};

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{attention, Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Ordered named-parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, '_, T> {
        let vars = self.values.iter().map(|v| graph.param(v.clone())).collect();
        Bound { vars, store: self }
    }
}

/// Parameters of a [`ParamStore`] registered in one graph.
pub struct Bound<'g, 's, T: Real> {
    vars: Vec<Var<'g, T>>,
    store: &'s ParamStore<T>,
}

impl<'g, T: Real> Bound<'g, '_, T> {
    pub fn p(&self, name: &str) -> Var<'g, T> {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.vars[0].graph()
    }

    /// Gradient buffers aligned with the store; unreached parameters get zeros.
    pub fn grads(&self) -> Vec<Vec<T>> {
        let g = self.graph();
        self.vars
            .iter()
            .zip(&self.store.values)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![T::zero(); t.numel()], Tensor::into_data))
            .collect()
    }

    /// Gradient buffers, `None` where the backward pass never reached.
    pub fn reached_grads(&self) -> Vec<Option<Vec<T>>> {
        let g = self.graph();
        self.vars.iter().map(|&v| g.grad(v).map(Tensor::into_data)).collect()
    }
}

pub(crate) struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| T::of(d.sample(self.rng)))
    }

    pub fn linear<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, bias: bool) {
        store.insert(format!("{name}.w"), self.normal(&[inp, out], INIT_STD));
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros([out]));
        }
    }

    pub fn norm<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, dim: usize) {
        store.insert(format!("{name}.g"), Tensor::full([dim], T::one()));
        store.insert(format!("{name}.b"), Tensor::zeros([dim]));
    }

    pub fn block<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, dim: usize, mlp_ratio: usize) {
        self.norm(store, &format!("{name}.ln1"), dim);
        for p in ["q", "k", "v", "o"] {
            self.linear(store, &format!("{name}.{p}"), dim, dim, true);
        }
        self.norm(store, &format!("{name}.ln2"), dim);
        self.linear(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, true);
        self.linear(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, true);
    }

    pub fn embedding<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, rows: usize, dim: usize) {
        store.insert(name, self.normal(&[rows, dim], INIT_STD));
    }
}

/// `x @ w (+ b)` over the last axis of any-rank `x`.
pub(crate) fn linear<'g, T: Real>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let w = b.p(&format!("{name}.w"));
    let mut shape = x.shape();
    let inp = *shape.last().ok_or_else(|| Error::shape("linear of a scalar"))?;
    let out = w.shape()[1];
    let rows = x.value().numel() / inp.max(1);
    let mut y = x.reshape(&[rows, inp])?.matmul(w)?;
    if b.store.get(&format!("{name}.b")).is_some() {
        y = y.add(b.p(&format!("{name}.b")))?;
    }
    *shape.last_mut().expect("non-empty") = out;
    y.reshape(&shape)
}

pub(crate) fn norm<'g, T: Real>(b: &Bound<'g, '_, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
    x.layer_norm(b.p(&format!("{name}.g")), b.p(&format!("{name}.b")), LN_EPS)
}

/// Pre-norm transformer block over `[N, T, D]`.
pub(crate) fn block<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    name: &str,
    x: Var<'g, T>,
    heads: usize,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let h = norm(b, &format!("{name}.ln1"), x)?;
    let split = |p: &str| -> Result<Var<'g, T>> {
        linear(b, &format!("{name}.{p}"), h)?.reshape(&[n, t, heads, dh])?.permute(&[0, 2, 1, 3])
    };
    let (q, k, v) = (split("q")?, split("k")?, split("v")?);
    let a = attention(q, k, v, causal, key_mask)?.permute(&[0, 2, 1, 3])?.reshape(&[n, t, d])?;
    let x = x.add(linear(b, &format!("{name}.o"), a)?)?;
    let h = norm(b, &format!("{name}.ln2"), x)?;
    let h = linear(b, &format!("{name}.fc1"), h)?.gelu();
    x.add(linear(b, &format!("{name}.fc2"), h)?)
}

/// Stack of `depth` blocks named `{name}.blocks.{i}` followed by `{name}.ln`.
pub(crate) fn transformer<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    name: &str,
    mut x: Var<'g, T>,
    depth: usize,
    heads: usize,
    causal: bool,
    key_mask: Option<&[bool]>,
) -> Result<Var<'g, T>> {
    for i in 0..depth {
        x = block(b, &format!("{name}.blocks.{i}"), x, heads, causal, key_mask)?;
    }
    norm(b, &format!("{name}.ln"), x)
}

pub(crate) fn init_transformer<T: Real, R: Rng>(
    init: &mut Init<'_, R>,
    store: &mut ParamStore<T>,
    name: &str,
    depth: usize,
    dim: usize,
    mlp_ratio: usize,
) {
    for i in 0..depth {
        init.block(store, &format!("{name}.blocks.{i}"), dim, mlp_ratio);
    }
    init.norm(store, &format!("{name}.ln"), dim);
}
