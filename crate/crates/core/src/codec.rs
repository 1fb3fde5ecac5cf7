//! Frozen latent codec: space-to-depth by a factor `f` followed by a fixed
//! orthogonal channel mixing. It has no trainable state and is exactly
//! invertible, so every reconstruction error measured downstream comes from
//! the trained tokenizer.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

pub const CHANNELS: usize = 3;

/// `[N, H, W, 3]` images with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32>(pub Tensor<T>);

/// `[N, H/f, W/f, f*f*3]` codec latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T = f32> {
    pub values: Tensor<T>,
    pub factor: usize,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[3] != CHANNELS {
            return Err(Error::shape(format!("image batch must be [N, H, W, 3], got {s:?}")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Copy clamped to `[-1, 1]`.
    pub fn clamped(&self) -> Self {
        Self(self.0.map(|v| v.max(-T::one()).min(T::one())))
    }

    /// Per-image slice as its own batch of one.
    pub fn image(&self, i: usize) -> Self {
        let s = self.0.shape();
        let n = s[1] * s[2] * s[3];
        let data = self.0.data()[i * n..(i + 1) * n].to_vec();
        Self(Tensor::new(vec![1, s[1], s[2], s[3]], data).expect("slice shape"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    pub factor: usize,
    pub seed: u64,
    /// `(f*f*3) x (f*f*3)` row-major orthogonal matrix.
    mixing: Tensor<f64>,
}

impl CodecParams {
    pub fn new(factor: usize, seed: u64) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("codec factor must be positive".into()));
        }
        let d = factor * factor * CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        // Fix column signs so the factorization is unique.
        for j in 0..d {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let mixing = Tensor::from_fn([d, d], |i| q[(i / d, i % d)]);
        Ok(Self { factor, seed, mixing })
    }

    pub fn latent_channels(&self) -> usize {
        self.factor * self.factor * CHANNELS
    }

    pub fn mixing<T: Real>(&self) -> Tensor<T> {
        self.mixing.cast()
    }

    fn mixing_t<T: Real>(&self) -> Tensor<T> {
        self.mixing.permute(&[1, 0]).expect("square matrix").cast()
    }

    fn check_image_dims(&self, h: usize, w: usize) -> Result<()> {
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} is not divisible by codec factor {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, x: &ImageBatch<T>) -> Result<LatentGrid<T>> {
        let s = x.0.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        self.check_image_dims(h, w)?;
        let f = self.factor;
        let d = self.latent_channels();
        let blocks = x
            .0
            .clone()
            .reshape([n, h / f, f, w / f, f, CHANNELS])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape([n * (h / f) * (w / f), d])?;
        let mixed = matmul(&blocks, &self.mixing())?;
        Ok(LatentGrid { values: mixed.reshape([n, h / f, w / f, d])?, factor: f })
    }

    pub fn decode<T: Real>(&self, z: &LatentGrid<T>) -> Result<ImageBatch<T>> {
        let s = z.values.shape();
        let d = self.latent_channels();
        if s.len() != 4 || s[3] != d {
            return Err(Error::shape(format!("latents {s:?} do not have {d} channels")));
        }
        let (n, h, w, f) = (s[0], s[1], s[2], self.factor);
        let flat = z.values.clone().reshape([n * h * w, d])?;
        let blocks = matmul(&flat, &self.mixing_t())?
            .reshape([n, h, w, f, f, CHANNELS])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape([n, h * f, w * f, CHANNELS])?;
        ImageBatch::new(blocks)
    }

    /// Differentiable decode of `[N, h, w, f*f*3]` latents inside a graph.
    pub fn decode_var<'g, T: Real>(&self, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = z.shape();
        let d = self.latent_channels();
        if s.len() != 4 || s[3] != d {
            return Err(Error::shape(format!("latents {s:?} do not have {d} channels")));
        }
        let (n, h, w, f) = (s[0], s[1], s[2], self.factor);
        let mt = z.graph().constant(self.mixing_t());
        z.matmul(mt)?
            .reshape(&[n, h, w, f, f, CHANNELS])?
            .permute(&[0, 1, 3, 2, 4, 5])?
            .reshape(&[n, h * f, w * f, CHANNELS])
    }
}

fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    crate::tensor::gemm(m, k, n, T::one(), a.data(), false, b.data(), false, T::zero(), &mut out);
    Tensor::new([m, n], out)
}
