//! Reconstruction and retrieval metrics.
//!
//! Images live on [-1, 1], so the data range is 2.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecParams, ImageBatch};
use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::model::{FeatureNet, Tokenizer};
use crate::tensor::{Graph, Tensor};

pub const DATA_RANGE: f64 = 2.0;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerImage {
    pub values: Vec<f64>,
    pub mean: f64,
}

impl PerImage {
    fn new(values: Vec<f64>) -> Self {
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
        Self { values, mean }
    }
}

fn check_pair(x: &ImageBatch<f32>, y: &ImageBatch<f32>) -> Result<()> {
    if x.0.shape() != y.0.shape() {
        return Err(Error::shape(format!("metric inputs {:?} and {:?} differ", x.0.shape(), y.0.shape())));
    }
    Ok(())
}

/// `10 log10(range^2 / mse)` per image, capped at [`PSNR_CAP`].
pub fn psnr(x: &ImageBatch<f32>, y: &ImageBatch<f32>) -> Result<PerImage> {
    check_pair(x, y)?;
    let per = x.0.numel() / x.len().max(1);
    let vals = x
        .0
        .data()
        .chunks(per.max(1))
        .zip(y.0.data().chunks(per.max(1)))
        .map(|(a, b)| {
            let mse = a.iter().zip(b).map(|(&p, &q)| (f64::from(p) - f64::from(q)).powi(2)).sum::<f64>() / per as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect();
    Ok(PerImage::new(vals))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid 11x11 Gaussian windows, per channel, then averaged
/// over channels.
pub fn ssim(x: &ImageBatch<f32>, y: &ImageBatch<f32>) -> Result<PerImage> {
    check_pair(x, y)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let c = x.0.shape()[3];
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ((K1 * DATA_RANGE).powi(2), (K2 * DATA_RANGE).powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let per = h * w * c;
    let mut vals = Vec::with_capacity(x.len());
    for n in 0..x.len() {
        let a = &x.0.data()[n * per..(n + 1) * per];
        let b = &y.0.data()[n * per..(n + 1) * per];
        let mut total = 0.0;
        for ch in 0..c {
            let plane = |src: &[f32], f: &dyn Fn(f64, f64) -> f64, other: &[f32]| -> Vec<f64> {
                (0..h * w).map(|i| f(f64::from(src[i * c + ch]), f64::from(other[i * c + ch]))).collect()
            };
            let maps = [
                plane(a, &|p, _| p, b),
                plane(a, &|_, q| q, b),
                plane(a, &|p, _| p * p, b),
                plane(a, &|_, q| q * q, b),
                plane(a, &|p, q| p * q, b),
            ];
            let filtered: Vec<Vec<f64>> = maps.iter().map(|m| separable_valid(m, h, w, &taps)).collect();
            let mut acc = 0.0;
            for i in 0..oh * ow {
                let (mx, my) = (filtered[0][i], filtered[1][i]);
                let vx = filtered[2][i] - mx * mx;
                let vy = filtered[3][i] - my * my;
                let cxy = filtered[4][i] - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
            total += acc / (oh * ow) as f64;
        }
        vals.push(total / c as f64);
    }
    Ok(PerImage::new(vals))
}

fn separable_valid(m: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| taps[j] * m[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|j| taps[j] * rows[(y + j) * ow + x]).sum();
        }
    }
    out
}

/// Mean and scatter of a feature set, mergeable across shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub dim: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Sum of outer products of deviations from the mean, row-major.
    pub scatter: Vec<f64>,
}

impl FeatureStats {
    pub fn empty(dim: usize) -> Self {
        Self { dim, count: 0, mean: vec![0.0; dim], scatter: vec![0.0; dim * dim] }
    }

    /// Stats of the rows of a `[N, D]` matrix.
    pub fn from_rows(rows: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::shape(format!("{} values do not form rows of width {dim}", rows.len())));
        }
        let n = rows.len() / dim;
        let mut s = Self::empty(dim);
        if n == 0 {
            return Ok(s);
        }
        for r in rows.chunks(dim) {
            for (m, &v) in s.mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        s.mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in rows.chunks(dim) {
            for i in 0..dim {
                let di = r[i] - s.mean[i];
                for j in 0..dim {
                    s.scatter[i * dim + j] += di * (r[j] - s.mean[j]);
                }
            }
        }
        s.count = n;
        Ok(s)
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let d = *t.shape().last().unwrap_or(&0);
        Self::from_rows(&t.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), d)
    }

    /// Pairwise combination of two shards.
    pub fn merge(&self, o: &Self) -> Result<Self> {
        if self.dim != o.dim {
            return Err(Error::shape(format!("cannot merge stats of width {} and {}", self.dim, o.dim)));
        }
        if self.count == 0 {
            return Ok(o.clone());
        }
        if o.count == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.count as f64, o.count as f64);
        let n = na + nb;
        let d = self.dim;
        let delta: Vec<f64> = o.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, dl)| a + dl * nb / n).collect();
        let mut scatter = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                scatter[i * d + j] =
                    self.scatter[i * d + j] + o.scatter[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        Ok(Self { dim: d, count: self.count + o.count, mean, scatter })
    }

    /// Unbiased sample covariance; needs two samples.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(Error::Invalid(format!("covariance needs at least 2 samples, got {}", self.count)));
        }
        let d = self.dim;
        let c = DMatrix::from_row_slice(d, d, &self.scatter) / (self.count as f64 - 1.0);
        Ok((&c + c.transpose()) * 0.5)
    }

    /// Stats with an explicit covariance, as if from `count` samples.
    pub fn from_moments(mean: Vec<f64>, cov: &DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d || count < 2 {
            return Err(Error::shape("moment shapes disagree or count < 2"));
        }
        let scatter = (cov * (count as f64 - 1.0)).transpose().as_slice().to_vec();
        Ok(Self { dim: d, count, mean, scatter })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 sqrt(Sa Sb))`, with the trace of the
/// root taken as that of `sqrt(sqrt(Sa) Sb sqrt(Sa))`, which is symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape(format!("Frechet distance of widths {} and {}", a.dim, b.dim)));
    }
    let (sa, sb) = (a.covariance()?, b.covariance()?);
    let mean2: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let ra = psd_sqrt(&sa);
    let m = &ra * &sb * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean2 + sa.trace() + sb.trace() - 2.0 * tr_root).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

/// Recall@k in both directions by dot product (cosine for unit rows). A
/// candidate outranks the true partner when strictly more similar, or
/// equally similar with a lower index.
pub fn retrieval_recall(img: &Tensor<f32>, txt: &Tensor<f32>, k: usize) -> Result<Recall> {
    if img.shape() != txt.shape() || img.rank() != 2 {
        return Err(Error::shape(format!("retrieval of {:?} against {:?}", img.shape(), txt.shape())));
    }
    if k == 0 {
        return Err(Error::Invalid("recall@k needs k >= 1".into()));
    }
    let (n, d) = (img.shape()[0], img.shape()[1]);
    if n == 0 {
        return Err(Error::Invalid("retrieval over an empty set".into()));
    }
    let sim = |i: usize, j: usize| -> f64 {
        img.data()[i * d..(i + 1) * d].iter().zip(&txt.data()[j * d..(j + 1) * d]).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    };
    let s: Vec<f64> = (0..n * n).map(|p| sim(p / n, p % n)).collect();
    let hits = |score: &dyn Fn(usize, usize) -> f64| -> usize {
        (0..n)
            .filter(|&q| {
                let own = score(q, q);
                let better = (0..n).filter(|&c| c != q && (score(q, c) > own || (score(q, c) == own && c < q))).count();
                better < k
            })
            .count()
    };
    // image query i scores text candidates j by s[i][j]; text query j scores image i by s[i][j]
    let i2t = hits(&|q, c| s[q * n + c]);
    let t2i = hits(&|q, c| s[c * n + q]);
    Ok(Recall { image_to_text: i2t as f64 / n as f64, text_to_image: t2i as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub n: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub frechet: f64,
}

/// Accumulates reconstruction metrics chunk by chunk.
pub struct ReconAccumulator<'a> {
    features: &'a FeatureNet<f32>,
    n: usize,
    psnr: f64,
    ssim: f64,
    perceptual: f64,
    real: FeatureStats,
    fake: FeatureStats,
}

impl<'a> ReconAccumulator<'a> {
    pub fn new(features: &'a FeatureNet<f32>) -> Self {
        let d = features.feature_dim();
        Self { features, n: 0, psnr: 0.0, ssim: 0.0, perceptual: 0.0, real: FeatureStats::empty(d), fake: FeatureStats::empty(d) }
    }

    /// `recon` is clamped to [-1, 1] before scoring.
    pub fn push(&mut self, orig: &ImageBatch<f32>, recon: &ImageBatch<f32>) -> Result<()> {
        let recon = recon.clamped();
        let m = orig.len() as f64;
        self.psnr += psnr(orig, &recon)?.mean * m;
        self.ssim += ssim(orig, &recon)?.mean * m;
        let g = Graph::new();
        let p = self.features.perceptual(g.constant(orig.0.clone()), g.constant(recon.0.clone()))?;
        self.perceptual += f64::from(p.item()) * m;
        self.real = self.real.merge(&FeatureStats::from_tensor(&self.features.pooled(&orig.0)?)?)?;
        self.fake = self.fake.merge(&FeatureStats::from_tensor(&self.features.pooled(&recon.0)?)?)?;
        self.n += orig.len();
        Ok(())
    }

    pub fn finish(self) -> Result<ReconReport> {
        if self.n == 0 {
            return Err(Error::Invalid("reconstruction metrics over an empty dataset".into()));
        }
        let n = self.n as f64;
        Ok(ReconReport {
            n: self.n,
            psnr: self.psnr / n,
            ssim: self.ssim / n,
            perceptual: self.perceptual / n,
            frechet: frechet_distance(&self.real, &self.fake)?,
        })
    }
}

pub const EVAL_CHUNK: usize = 64;

fn eval_with(
    features: &FeatureNet<f32>,
    corpus: &Corpus,
    res: usize,
    recon: impl Fn(&ImageBatch<f32>) -> Result<ImageBatch<f32>>,
) -> Result<ReconReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("evaluation corpus is empty".into()));
    }
    let mut acc = ReconAccumulator::new(features);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    for part in idx.chunks(EVAL_CHUNK) {
        let x = corpus.batch(part, res)?;
        acc.push(&x, &recon(&x)?)?;
    }
    acc.finish()
}

/// Noise-free reconstruction metrics of `model` over `corpus` at `res`.
pub fn eval_reconstruction(model: &Tokenizer<f32>, corpus: &Corpus, res: usize) -> Result<ReconReport> {
    eval_with(&model.features, corpus, res, |x| model.reconstruct(x, EVAL_CHUNK))
}

/// The same metrics for the frozen codec round trip alone.
pub fn eval_codec_roundtrip(codec: &CodecParams, features: &FeatureNet<f32>, corpus: &Corpus, res: usize) -> Result<ReconReport> {
    eval_with(features, corpus, res, |x| codec.decode(&codec.encode(x)?))
}

/// Recall@1 and @5 of `model`'s embeddings over the corpus pairs.
pub fn eval_retrieval(model: &Tokenizer<f32>, vocab: &Vocab, corpus: &Corpus, res: usize) -> Result<(Recall, Recall)> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let images = corpus.batch(&idx, res)?;
    let captions = corpus.caption_batch(&idx, vocab, model.config.text.max_len)?;
    let zi = model.embed_images(&images, EVAL_CHUNK)?;
    let zt = model.embed_text(&captions, EVAL_CHUNK)?;
    Ok((retrieval_recall(&zi, &zt, 1)?, retrieval_recall(&zi, &zt, 5.min(corpus.len()))?))
}

/// Flat `metric,value,n` report with a JSON twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub resolution: usize,
    pub resize: String,
    pub crop: String,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn new(resolution: usize) -> Self {
        Self { resolution, resize: "bilinear".into(), crop: "center".into(), rows: Vec::new() }
    }

    pub fn push(&mut self, metric: &str, value: f64, n: usize) {
        self.rows.push(MetricRow { metric: metric.to_string(), value, n });
    }

    pub fn add_recon(&mut self, r: &ReconReport) {
        self.push("psnr", r.psnr, r.n);
        self.push("ssim", r.ssim, r.n);
        self.push("perceptual", r.perceptual, r.n);
        self.push("surrogate_fid", r.frechet, r.n);
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// CSV with a leading `#` line recording the preprocessing.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# resize={} crop={} resolution={}\nmetric,value,n\n", self.resize, self.crop, self.resolution);
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.metric, r.value, r.n));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
