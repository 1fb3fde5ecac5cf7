//! Image/caption corpora: generated in memory or loaded from a TSV index.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::scene::{gen_sample, sample_seed, GRAMMAR_VERSION};
use super::vocab::{Vocab, EOS};
use crate::codec::{ImageBatch, CHANNELS};
use crate::error::{Error, Result};
use crate::model::CaptionBatch;
use crate::tensor::Tensor;

pub const CAPTIONS_FILE: &str = "captions.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug)]
enum Source {
    Pixels { width: usize, height: usize, rgb: Arc<[u8]> },
    File { path: PathBuf, line: usize },
}

#[derive(Clone, Debug)]
struct Item {
    caption: String,
    source: Source,
}

/// Ordered image/caption pairs. File-backed items decode on access.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    items: Vec<Item>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub grammar_version: u32,
    pub count: usize,
    pub resolution: usize,
    pub vocab_size: usize,
}

impl Corpus {
    /// `n` generated scenes rendered at `res` pixels.
    pub fn synthetic(n: usize, seed: u64, res: usize) -> Self {
        let items = (0..n)
            .map(|i| {
                let (rgb, caption) = gen_sample(sample_seed(seed, i as u64), res);
                Item { caption, source: Source::Pixels { width: res, height: res, rgb: rgb.into() } }
            })
            .collect();
        Self { items }
    }

    pub fn from_pixels(items: impl IntoIterator<Item = (usize, usize, Vec<u8>, String)>) -> Result<Self> {
        let mut out = Vec::new();
        for (width, height, rgb, caption) in items {
            if rgb.len() != width * height * CHANNELS || width == 0 || height == 0 {
                return Err(Error::Invalid(format!("{width}x{height} image with {} bytes", rgb.len())));
            }
            out.push(Item { caption, source: Source::Pixels { width, height, rgb: rgb.into() } });
        }
        Ok(Self { items: out })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn caption(&self, i: usize) -> &str {
        &self.items[i].caption
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|it| it.caption.as_str())
    }

    /// Items `range` as a new corpus.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self { items: self.items[range].to_vec() }
    }

    /// Raw RGB bytes and size of item `i`.
    pub fn rgb(&self, i: usize) -> Result<(usize, usize, Arc<[u8]>)> {
        match &self.items[i].source {
            Source::Pixels { width, height, rgb } => Ok((*width, *height, rgb.clone())),
            Source::File { path, line } => {
                let img = image::open(path).map_err(|e| Error::Corpus {
                    path: path.clone(),
                    line: *line,
                    msg: format!("cannot decode image: {e}"),
                })?;
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Ok((w as usize, h as usize, rgb.into_raw().into()))
            }
        }
    }

    /// Item `i` resized and center-cropped to `res`, values in [-1, 1].
    pub fn image(&self, i: usize, res: usize) -> Result<Vec<f32>> {
        let (w, h, rgb) = self.rgb(i)?;
        Ok(resize_center_crop(&rgb, w, h, res))
    }

    pub fn batch(&self, idx: &[usize], res: usize) -> Result<ImageBatch<f32>> {
        let mut data = Vec::with_capacity(idx.len() * res * res * CHANNELS);
        for &i in idx {
            data.extend(self.image(i, res)?);
        }
        ImageBatch::new(Tensor::new([idx.len(), res, res, CHANNELS], data)?)
    }

    /// Every image at `res` as `[N, res, res, 3]`.
    pub fn materialize(&self, res: usize) -> Result<ImageBatch<f32>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, res)
    }

    /// Tokenized captions `idx`; long captions are cut to `max_len` keeping EOS.
    pub fn caption_batch(&self, idx: &[usize], vocab: &Vocab, max_len: usize) -> Result<CaptionBatch> {
        let seqs: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                let mut ids = vocab.encode(&self.items[i].caption);
                if ids.len() > max_len {
                    ids.truncate(max_len - 1);
                    ids.push(EOS);
                }
                ids
            })
            .collect();
        CaptionBatch::from_sequences(&seqs, vocab.len(), None)
    }

    /// Writes PNGs, the TSV index, the vocabulary and a manifest into `dir`.
    pub fn export(&self, dir: &Path, vocab: &Vocab, manifest: &CorpusManifest) -> Result<()> {
        let images = dir.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut tsv = String::new();
        for i in 0..self.len() {
            let (w, h, rgb) = self.rgb(i)?;
            let rel = format!("{IMAGE_DIR}/{i:06}.png");
            let path = dir.join(&rel);
            image::save_buffer(&path, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
            tsv.push_str(&format!("{rel}\t{}\n", self.items[i].caption));
        }
        let write = |name: &str, body: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write(CAPTIONS_FILE, tsv.as_bytes())?;
        write(VOCAB_FILE, vocab.to_text().as_bytes())?;
        write(MANIFEST_FILE, serde_json::to_string_pretty(manifest)?.as_bytes())
    }
}

impl CorpusManifest {
    pub fn synthetic(seed: u64, count: usize, resolution: usize, vocab: &Vocab) -> Self {
        Self { seed, grammar_version: GRAMMAR_VERSION, count, resolution, vocab_size: vocab.len() }
    }
}

/// Parses `relative_path<TAB>caption` lines. Blank lines are skipped;
/// returned line numbers are 1-based.
pub fn parse_captions_tsv(text: &str) -> std::result::Result<Vec<(usize, String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let Some((path, caption)) = line.split_once('\t') else {
            return Err((i + 1, "expected `path<TAB>caption`".into()));
        };
        if path.is_empty() {
            return Err((i + 1, "empty image path".into()));
        }
        if caption.trim().is_empty() {
            return Err((i + 1, "empty caption".into()));
        }
        out.push((i + 1, path.to_string(), caption.to_string()));
    }
    Ok(out)
}

/// Loads the TSV index `captions_file` with paths relative to `dir`.
/// Images are decoded lazily but must exist.
pub fn load_corpus(dir: &Path, captions_file: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(captions_file).map_err(|e| Error::io(captions_file, e))?;
    let rows = parse_captions_tsv(&text)
        .map_err(|(line, msg)| Error::Corpus { path: captions_file.to_path_buf(), line, msg })?;
    let mut items = Vec::with_capacity(rows.len());
    for (line, rel, caption) in rows {
        let path = dir.join(&rel);
        if !path.is_file() {
            return Err(Error::Corpus { path, line, msg: "image file not found".into() });
        }
        items.push(Item { caption, source: Source::File { path, line } });
    }
    Ok(Corpus { items })
}

/// Bilinear resize of the shorter side to `res` (half-pixel centers), then
/// center crop to `res x res`, mapped to [-1, 1].
pub fn resize_center_crop(rgb: &[u8], w: usize, h: usize, res: usize) -> Vec<f32> {
    let to_unit = |v: f64| (v / 127.5 - 1.0) as f32;
    if w == res && h == res {
        return rgb.iter().map(|&v| to_unit(f64::from(v))).collect();
    }
    let short = w.min(h) as f64;
    let scale = res as f64 / short;
    let nw = ((w as f64 * scale).round() as usize).max(res);
    let nh = ((h as f64 * scale).round() as usize).max(res);
    let (ox, oy) = ((nw - res) / 2, (nh - res) / 2);
    let axis = |o: usize, n_new: usize, n_old: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_old as f64 / n_new as f64 - 0.5).clamp(0.0, (n_old - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_old - 1);
        (lo, hi, s - lo as f64)
    };
    let px = |x: usize, y: usize, c: usize| f64::from(rgb[(y * w + x) * CHANNELS + c]);
    let mut out = Vec::with_capacity(res * res * CHANNELS);
    for y in 0..res {
        let (y0, y1, fy) = axis(y + oy, nh, h);
        for x in 0..res {
            let (x0, x1, fx) = axis(x + ox, nw, w);
            for c in 0..CHANNELS {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out.push(to_unit(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    out
}
