use rayon::prelude::*;

use super::Real;
use crate::error::{Error, Result};
use crate::parallel;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is stored
/// in its untransposed layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    T::gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute<T: Real>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!("invalid permutation {axes:?} for shape {shape:?}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok((out_shape, out));
    }
    // Odometer over the output index; innermost axis is contiguous on output.
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let inner = *out_shape.last().unwrap_or(&1);
    let inner_stride = *src_strides.last().unwrap_or(&1);
    let outer = n / inner.max(1);
    for _ in 0..outer {
        let mut s = src;
        for _ in 0..inner {
            out.push(data[s]);
            s += inner_stride;
        }
        // advance all but the last axis
        let mut ax = rank.saturating_sub(1);
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

/// Inverse of an axis permutation.
pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Batch broadcasting layout for `[.., M, K] x [.., K, N]`.
#[derive(Clone, Debug)]
pub(crate) struct MatmulLayout {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// Per output batch entry: element offsets into `a` and `b`.
    pub offsets: Vec<(usize, usize)>,
}

impl MatmulLayout {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || Error::shape(format!("matmul of {a:?} and {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(err());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(err());
            }
            batch.push(x.max(y));
        }
        let sa = strides(&pa);
        let sb = strides(&pb);
        let count: usize = batch.iter().product();
        let mut offsets = Vec::with_capacity(count);
        let mut idx = vec![0usize; rank];
        for _ in 0..count {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                if pa[d] != 1 {
                    ia += idx[d] * sa[d];
                }
                if pb[d] != 1 {
                    ib += idx[d] * sb[d];
                }
            }
            offsets.push((ia * m * k, ib * k * n));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self { m, k, n, out_shape, offsets })
    }

    pub fn forward<T: Real>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![T::zero(); self.offsets.len() * m * n];
        let run = |(chunk, &(oa, ob)): (&mut [T], &(usize, usize))| {
            gemm(m, k, n, T::one(), &a[oa..], false, &b[ob..], false, T::zero(), chunk);
        };
        if m * n == 0 {
            return out;
        }
        if parallel::enabled() && self.offsets.len() > 1 {
            parallel::install(|| {
                out.par_chunks_mut(m * n).zip(self.offsets.par_iter()).for_each(run)
            });
        } else {
            out.chunks_mut(m * n).zip(self.offsets.iter()).for_each(run);
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        a: &[T],
        b: &[T],
        dc: &[T],
        da: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            for (i, &(oa, ob)) in self.offsets.iter().enumerate() {
                let g = &dc[i * m * n..];
                // dA += dC * B^T
                gemm(m, n, k, T::one(), g, false, &b[ob..], true, T::one(), &mut da[oa..]);
            }
        }
        if let Some(db) = db {
            for (i, &(oa, ob)) in self.offsets.iter().enumerate() {
                let g = &dc[i * m * n..];
                // dB += A^T * dC
                gemm(k, m, n, T::one(), &a[oa..], true, g, false, T::one(), &mut db[ob..]);
            }
        }
    }
}

/// Scaled dot-product attention over `[B, H, T, Dh]` operands.
#[derive(Clone, Debug)]
pub(crate) struct AttentionLayout {
    pub b: usize,
    pub h: usize,
    pub t: usize,
    pub dh: usize,
    pub causal: bool,
    /// `[B, T]`, false marks keys that may not be attended to.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionLayout {
    fn scale<T: Real>(&self) -> T {
        T::one() / T::of(self.dh as f64).sqrt()
    }

    /// Returns `(output, probabilities)`; probabilities are `[B, H, T, T]`.
    pub fn forward<T: Real>(&self, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
        let (t, dh) = (self.t, self.dh);
        let heads = self.b * self.h;
        let mut out = vec![T::zero(); heads * t * dh];
        let mut probs = vec![T::zero(); heads * t * t];
        let scale = self.scale::<T>();
        let run = |(idx, (o, p)): (usize, (&mut [T], &mut [T]))| {
            let base = idx * t * dh;
            let qs = &q[base..base + t * dh];
            let ks = &k[base..base + t * dh];
            let vs = &v[base..base + t * dh];
            gemm(t, dh, t, scale, qs, false, ks, true, T::zero(), p);
            let batch = idx / self.h;
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter_mut().enumerate() {
                    let masked = (self.causal && j > i)
                        || self.key_mask.as_ref().is_some_and(|m| !m[batch * t + j]);
                    if masked {
                        *s = T::neg_infinity();
                    } else if *s > max {
                        max = *s;
                    }
                }
                if max == T::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = T::zero());
                    continue;
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s = *s / sum);
            }
            gemm(t, t, dh, T::one(), p, false, vs, false, T::zero(), o);
        };
        if t * dh == 0 {
            return (out, probs);
        }
        if parallel::enabled() && heads > 1 {
            parallel::install(|| {
                out.par_chunks_mut(t * dh)
                    .zip(probs.par_chunks_mut(t * t))
                    .enumerate()
                    .for_each(run)
            });
        } else {
            out.chunks_mut(t * dh).zip(probs.chunks_mut(t * t)).enumerate().for_each(run);
        }
        (out, probs)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        q: &[T],
        k: &[T],
        v: &[T],
        probs: &[T],
        dout: &[T],
        mut dq: Option<&mut [T]>,
        mut dk: Option<&mut [T]>,
        mut dv: Option<&mut [T]>,
    ) {
        let (t, dh) = (self.t, self.dh);
        let scale = self.scale::<T>();
        let mut dp = vec![T::zero(); t * t];
        for idx in 0..self.b * self.h {
            let base = idx * t * dh;
            let p = &probs[idx * t * t..(idx + 1) * t * t];
            let g = &dout[base..base + t * dh];
            if let Some(dv) = dv.as_deref_mut() {
                gemm(t, t, dh, T::one(), p, true, g, false, T::one(), &mut dv[base..]);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO * V^T, then softmax backward in place.
            gemm(t, dh, t, T::one(), g, false, &v[base..], true, T::zero(), &mut dp);
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                gemm(t, t, dh, scale, &dp, false, &k[base..], false, T::one(), &mut dq[base..]);
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(t, t, dh, scale, &dp, true, &q[base..], false, T::one(), &mut dk[base..]);
            }
        }
    }
}

/// Patch extraction geometry for `[N, H, W, C]` inputs with zero padding;
/// output patches are `[N, Ho, Wo, k*k*C]` ordered `(ky, kx, c)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Im2col {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2col {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    /// Visits `(patch_index, source_index)` pairs for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let kk = self.kernel;
        let row = kk * kk * self.c;
        for n in 0..self.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let pbase = ((n * ho + oy) * wo + ox) * row;
                    for ky in 0..kk {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for kx in 0..kk {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = pbase + (ky * kk + kx) * self.c;
                            for ch in 0..self.c {
                                f(dst + ch, src + ch);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let mut out = vec![T::zero(); self.n * ho * wo * self.kernel * self.kernel * self.c];
        self.for_each_tap(|d, s| out[d] = x[s]);
        out
    }

    pub fn backward<T: Real>(&self, dout: &[T], dx: &mut [T]) {
        self.for_each_tap(|d, s| dx[s] += dout[d]);
    }
}
