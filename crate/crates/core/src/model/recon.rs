use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::{unpatchify, UnifiedTokens};
use super::features::FeatureNet;
use super::{linear, transformer, Bound};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Upper bound of the per-sample noise scale.
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconLossWeights {
    /// Latent L1 weight.
    pub beta: f64,
    /// Perceptual weight.
    pub lambda: f64,
}

/// `sigma_n * eps` with `sigma_n ~ U[0, tau]` per sample and `eps ~ N(0, 1)`
/// per element, for a `[N, ...]` shape.
pub fn sample_noise<T: Real, R: Rng>(shape: &[usize], cfg: NoiseConfig, rng: &mut R) -> Result<Tensor<T>> {
    if !(cfg.tau >= 0.0) {
        return Err(Error::Invalid(format!("noise bound tau must be >= 0, got {}", cfg.tau)));
    }
    let n = shape.first().copied().unwrap_or(1);
    let per = shape.iter().skip(1).product::<usize>();
    let mut data = Vec::with_capacity(n * per);
    for _ in 0..n {
        let sigma = if cfg.tau > 0.0 { rng.random_range(0.0..=cfg.tau) } else { 0.0 };
        for _ in 0..per {
            let e: f64 = StandardNormal.sample(rng);
            data.push(T::of(sigma * e));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Adds sampled noise to the unified tokens. `tau == 0` returns the input
/// untouched.
pub fn perturb<'g, T: Real, R: Rng>(
    z: UnifiedTokens<'g, T>,
    cfg: NoiseConfig,
    rng: &mut R,
) -> Result<UnifiedTokens<'g, T>> {
    if cfg.tau == 0.0 {
        return Ok(z);
    }
    let noise = sample_noise(&z.values.shape(), cfg, rng)?;
    let values = z.values.add(z.values.graph().constant(noise))?;
    Ok(UnifiedTokens { values, grid: z.grid })
}

/// ViT decoder over the token grid followed by a per-token linear head to a
/// 2x2 latent block and depth-to-space.
pub(crate) fn decode<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    z: &UnifiedTokens<'g, T>,
    depth: usize,
    heads: usize,
) -> Result<Var<'g, T>> {
    let pos = b.p("dec.pos");
    if pos.shape()[0] != z.count() {
        return Err(Error::shape(format!(
            "decoder positional table has {} rows for {} tokens",
            pos.shape()[0],
            z.count()
        )));
    }
    let x = linear(b, "dec.in", z.values)?.add(pos)?;
    let h = transformer(b, "dec", x, depth, heads, false, None)?;
    let blocks = linear(b, "dec.head", h)?;
    unpatchify(blocks, z.grid)
}

#[derive(Clone, Copy, Debug)]
pub struct ReconLosses<'g, T: Real> {
    pub pixel_l1: Var<'g, T>,
    pub latent_l1: Var<'g, T>,
    pub perceptual: Var<'g, T>,
    pub total: Var<'g, T>,
}

pub(crate) fn l1<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("l1 of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b)?.abs().mean())
}

/// `l1(x, x_hat) + beta * l1(z, z_hat) + lambda * perceptual(x, x_hat)`.
pub fn recon_loss<'g, T: Real>(
    x: Var<'g, T>,
    x_hat: Var<'g, T>,
    z: Var<'g, T>,
    z_hat: Var<'g, T>,
    w: ReconLossWeights,
    features: &FeatureNet<T>,
) -> Result<ReconLosses<'g, T>> {
    let pixel_l1 = l1(x, x_hat)?;
    let latent_l1 = l1(z, z_hat)?;
    let perceptual = features.perceptual(x, x_hat)?;
    let total = pixel_l1.add(latent_l1.scale(w.beta))?.add(perceptual.scale(w.lambda))?;
    Ok(ReconLosses { pixel_l1, latent_l1, perceptual, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::uniform;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_tau_is_identity() {
        let g = Graph::<f64>::new();
        let z = UnifiedTokens { values: g.constant(uniform(&[2, 4, 3], 1)), grid: (2, 2) };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturb(z, NoiseConfig { tau: 0.0 }, &mut rng).unwrap();
        assert_eq!(p.values.tensor(), z.values.tensor());
    }

    #[test]
    fn same_seed_same_noise() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            sample_noise::<f32, _>(&[3, 4, 5], NoiseConfig { tau: 0.5 }, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn negative_tau_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_noise::<f32, _>(&[1, 2], NoiseConfig { tau: -0.1 }, &mut rng).is_err());
    }

    fn loss(x: &Tensor<f64>, xh: &Tensor<f64>, z: &Tensor<f64>, zh: &Tensor<f64>, w: ReconLossWeights) -> f64 {
        let g = Graph::new();
        let net = FeatureNet::new(0);
        let c = |t: &Tensor<f64>| g.constant(t.clone());
        recon_loss(c(x), c(xh), c(z), c(zh), w, &net).unwrap().total.item()
    }

    #[test]
    fn recon_loss_compositions() {
        let x = uniform(&[1, 8, 8, 3], 3).map(|v| v * 0.5);
        let z = uniform(&[1, 2, 2, 48], 4);
        let none = ReconLossWeights { beta: 0.0, lambda: 0.0 };
        assert_eq!(loss(&x, &x, &z, &z, ReconLossWeights { beta: 0.4, lambda: 0.5 }), 0.0);
        let off = x.map(|v| v + 0.1);
        assert!((loss(&x, &off, &z, &z, none) - 0.1).abs() < 1e-12);
        let xe = x.map(|v| v - 0.2);
        let ze = z.map(|v| v + 0.5);
        let got = loss(&x, &xe, &z, &ze, ReconLossWeights { beta: 0.4, lambda: 0.0 });
        assert!((got - 0.4).abs() < 1e-12, "{got}");
    }
}
