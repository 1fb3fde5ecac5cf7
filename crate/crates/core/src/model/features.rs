//! Fixed random-feature convolution stack shared by the perceptual loss and
//! the Fréchet metric. Never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::CHANNELS;
use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Added under the square root when unit-normalizing activations.
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet<T = f32> {
    pub seed: u64,
    /// `[k*k*C_in, C_out]` per stage.
    weights: Vec<Tensor<T>>,
}

impl<T: Real> FeatureNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut cin = CHANNELS;
        for &cout in &STAGE_CHANNELS {
            let fan_in = KERNEL * KERNEL * cin;
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            weights.push(Tensor::from_fn([fan_in, cout], |_| T::of(d.sample(&mut rng))));
            cin = cout;
        }
        Self { seed, weights }
    }

    pub fn feature_dim(&self) -> usize {
        STAGE_CHANNELS[STAGE_CHANNELS.len() - 1]
    }

    /// ReLU activations of each stage for `[N, H, W, 3]` input.
    pub fn stages<'g>(&self, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let g = x.graph();
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let cols = h.im2col(KERNEL, STRIDE, PAD)?;
            h = cols.matmul(g.constant(w.clone()))?.relu();
            out.push(h);
        }
        Ok(out)
    }

    /// Mean over stages of the per-position squared distance between
    /// channel-normalized activations.
    pub fn perceptual<'g>(&self, x: Var<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
        let fx = self.stages(x)?;
        let fy = self.stages(y)?;
        let mut total: Option<Var<'g, T>> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let s = a.shape();
            let positions = s[..s.len() - 1].iter().product::<usize>();
            let d = a.l2_normalize_eps(NORM_EPS).sub(b.l2_normalize_eps(NORM_EPS))?;
            let term = d.mul(d)?.sum().scale(1.0 / positions as f64);
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one stage").scale(1.0 / self.weights.len() as f64))
    }

    /// Globally pooled final-stage activations, `[N, 64]`.
    pub fn pooled(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let last = *self.stages(g.constant(images.clone()))?.last().expect("stages");
        let s = last.shape();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let flat = last.reshape(&[n, hw, c])?;
        let w = g.constant(Tensor::full([1, hw], T::one() / T::of(hw as f64)));
        Ok(w.matmul(flat)?.reshape(&[n, c])?.tensor())
    }
}
