use super::{linear, transformer, Bound};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Latent-space patch side of the unified encoder.
pub const PATCH: usize = 2;

/// ViT output tokens `[N, gh*gw, D_u]` with their grid shape.
#[derive(Clone, Copy, Debug)]
pub struct UnifiedTokens<'g, T: Real> {
    pub values: Var<'g, T>,
    pub grid: (usize, usize),
}

impl<T: Real> UnifiedTokens<'_, T> {
    pub fn count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Patchifies `[N, h, w, C]` into `[N, (h/2)*(w/2), 4*C]`.
pub(crate) fn patchify<'g, T: Real>(z: Var<'g, T>) -> Result<(Var<'g, T>, (usize, usize))> {
    let s = z.shape();
    if s.len() != 4 || s[1] % PATCH != 0 || s[2] % PATCH != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape(format!("latent grid {s:?} is not divisible into 2x2 patches")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / PATCH, w / PATCH);
    let p = z
        .reshape(&[n, gh, PATCH, gw, PATCH, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, gh * gw, PATCH * PATCH * c])?;
    Ok((p, (gh, gw)))
}

/// Inverse of [`patchify`]: `[N, gh*gw, 4*C]` back to `[N, 2gh, 2gw, C]`.
pub(crate) fn unpatchify<'g, T: Real>(x: Var<'g, T>, grid: (usize, usize)) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, c) = (s[0], s[2] / (PATCH * PATCH));
    let (gh, gw) = grid;
    x.reshape(&[n, gh, gw, PATCH, PATCH, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, gh * PATCH, gw * PATCH, c])
}

pub(crate) fn encode<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    latents: Var<'g, T>,
    depth: usize,
    heads: usize,
) -> Result<UnifiedTokens<'g, T>> {
    let (patches, grid) = patchify(latents)?;
    let pos = b.p("enc.pos");
    if pos.shape()[0] != grid.0 * grid.1 {
        return Err(Error::shape(format!(
            "positional table has {} rows but the token grid is {}x{}",
            pos.shape()[0],
            grid.0,
            grid.1
        )));
    }
    let x = linear(b, "enc.patch", patches)?.add(pos)?;
    let values = transformer(b, "enc", x, depth, heads, false, None)?;
    Ok(UnifiedTokens { values, grid })
}

/// Mean over tokens, projection, unit normalization.
pub(crate) fn pool<'g, T: Real>(b: &Bound<'g, '_, T>, z: &UnifiedTokens<'g, T>) -> Result<Var<'g, T>> {
    let s = z.values.shape();
    let (n, t, d) = (s[0], s[1], s[2]);
    if t == 0 {
        return Err(Error::shape("pooling needs at least one token"));
    }
    let g = b.graph();
    let w = g.constant(Tensor::full([1, t], T::one() / T::of(t as f64)));
    let mean = w.matmul(z.values)?.reshape(&[n, d])?;
    Ok(linear(b, "pool", mean)?.l2_normalize())
}

/// Bilinearly resamples a `[old.0*old.1, D]` positional table to `new`,
/// aligning corner samples so they are preserved exactly.
pub fn interpolate_pos_embed<T: Real>(
    table: &Tensor<T>,
    old: (usize, usize),
    new: (usize, usize),
) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 || s[0] != old.0 * old.1 || old.0 == 0 || old.1 == 0 || new.0 == 0 || new.1 == 0 {
        return Err(Error::shape(format!("cannot resample table {s:?} from {old:?} to {new:?}")));
    }
    if old == new {
        return Ok(table.clone());
    }
    let d = s[1];
    let src = |i: usize, n_new: usize, n_old: usize| -> (usize, usize, f64) {
        if n_new == 1 || n_old == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_old - 1) as f64 / (n_new - 1) as f64;
        let lo = (x.floor() as usize).min(n_old - 1);
        let hi = (lo + 1).min(n_old - 1);
        (lo, hi, x - lo as f64)
    };
    let data = table.data();
    let mut out = vec![T::zero(); new.0 * new.1 * d];
    for y in 0..new.0 {
        let (y0, y1, fy) = src(y, new.0, old.0);
        for x in 0..new.1 {
            let (x0, x1, fx) = src(x, new.1, old.1);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let dst = &mut out[(y * new.1 + x) * d..(y * new.1 + x + 1) * d];
            for (ty, tx, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let row = &data[(ty * old.1 + tx) * d..(ty * old.1 + tx + 1) * d];
                let wt = T::of(wt);
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o += wt * v;
                }
            }
        }
    }
    Tensor::new([new.0 * new.1, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::uniform;

    #[test]
    fn same_grid_is_bit_identical() {
        let t = uniform(&[16, 5], 1);
        assert_eq!(interpolate_pos_embed(&t, (4, 4), (4, 4)).unwrap(), t);
    }

    #[test]
    fn corners_survive_upsampling() {
        let t = uniform(&[16, 3], 2);
        let up = interpolate_pos_embed(&t, (4, 4), (8, 8)).unwrap();
        let row = |x: &Tensor<f64>, i: usize| x.data()[i * 3..(i + 1) * 3].to_vec();
        for (old, new) in [(0, 0), (3, 7), (12, 56), (15, 63)] {
            assert_eq!(row(&t, old), row(&up, new));
        }
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::<f64>::full([4, 2], 0.37);
        let up = interpolate_pos_embed(&t, (2, 2), (4, 4)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }
}
