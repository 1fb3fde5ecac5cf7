use super::encoder::UnifiedTokens;
use super::{linear, transformer, Bound};
use crate::data::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{concat, Real, Tensor, Var};

/// Padded token grid `[N, T]`; `pad_mask` is true at padding positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionBatch {
    pub token_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub n: usize,
    pub len: usize,
    pub vocab_size: usize,
}

impl CaptionBatch {
    /// Pads `BOS .. EOS` sequences to `pad_to` (or the longest sequence).
    pub fn from_sequences(seqs: &[Vec<usize>], vocab_size: usize, pad_to: Option<usize>) -> Result<Self> {
        let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let len = pad_to.unwrap_or(longest);
        if len < longest {
            return Err(Error::Invalid(format!("caption of {longest} tokens exceeds length {len}")));
        }
        let mut token_ids = Vec::with_capacity(seqs.len() * len);
        let mut pad_mask = Vec::with_capacity(seqs.len() * len);
        for (i, s) in seqs.iter().enumerate() {
            if s.first() != Some(&BOS) {
                return Err(Error::Invalid(format!("caption {i} does not start with BOS")));
            }
            if s.iter().filter(|&&t| t == EOS).count() != 1 || s.last() != Some(&EOS) {
                return Err(Error::Invalid(format!("caption {i} must end with exactly one EOS")));
            }
            if let Some(bad) = s.iter().find(|&&t| t >= vocab_size || t == PAD) {
                return Err(Error::Invalid(format!("caption {i} has invalid id {bad}")));
            }
            token_ids.extend_from_slice(s);
            pad_mask.extend(std::iter::repeat_n(false, s.len()));
            token_ids.extend(std::iter::repeat_n(PAD, len - s.len()));
            pad_mask.extend(std::iter::repeat_n(true, len - s.len()));
        }
        Ok(Self { token_ids, pad_mask, n: seqs.len(), len, vocab_size })
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.len..(i + 1) * self.len]
    }

    /// Rows `idx` as a new batch, re-padded to their own longest caption.
    pub fn select(&self, idx: &[usize]) -> Self {
        let seqs: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                let r = self.row(i);
                r.iter().copied().take_while(|&t| t != PAD).collect()
            })
            .collect();
        Self::from_sequences(&seqs, self.vocab_size, None).expect("rows were valid")
    }
}

fn positions(t: usize) -> Vec<usize> {
    (0..t).collect()
}

/// Bidirectional text tower with key-padding mask, masked mean pool,
/// projection and unit normalization.
pub(crate) fn encode_text<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    captions: &CaptionBatch,
    depth: usize,
    heads: usize,
) -> Result<Var<'g, T>> {
    let (n, t) = (captions.n, captions.len);
    let pos = b.p("txt.pos");
    if t > pos.shape()[0] {
        return Err(Error::Invalid(format!("caption length {t} exceeds maximum {}", pos.shape()[0])));
    }
    let keep: Vec<bool> = captions.pad_mask.iter().map(|&p| !p).collect();
    let mut pool = vec![T::zero(); n * t];
    for i in 0..n {
        let count = keep[i * t..(i + 1) * t].iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Invalid(format!("caption {i} is entirely padding")));
        }
        let w = T::one() / T::of(count as f64);
        for j in 0..t {
            if keep[i * t + j] {
                pool[i * t + j] = w;
            }
        }
    }
    let width = pos.shape()[1];
    let tok = b.p("txt.tok").gather(&captions.token_ids)?.reshape(&[n, t, width])?;
    let x = tok.add(pos.gather(&positions(t))?)?;
    let h = transformer(b, "txt", x, depth, heads, false, Some(&keep))?;
    let g = b.graph();
    let pooled = g.constant(Tensor::new([n, 1, t], pool)?).matmul(h)?.reshape(&[n, width])?;
    Ok(linear(b, "txt.proj", pooled)?.l2_normalize())
}

/// Teacher-forced next-token cross entropy of a causal decoder that sees
/// the projected visual tokens as a prefix. Prefix and padding positions
/// carry no loss.
pub(crate) fn caption_loss<'g, T: Real>(
    b: &Bound<'g, '_, T>,
    z: &UnifiedTokens<'g, T>,
    captions: &CaptionBatch,
    depth: usize,
    heads: usize,
) -> Result<Var<'g, T>> {
    let (n, t) = (captions.n, captions.len);
    if t < 2 {
        return Err(Error::Invalid("caption length must be at least 2 (BOS and EOS)".into()));
    }
    let pos = b.p("cap.pos");
    let width = pos.shape()[1];
    if t - 1 > pos.shape()[0] {
        return Err(Error::Invalid(format!("caption length {t} exceeds maximum {}", pos.shape()[0] + 1)));
    }
    let prefix_len = z.count();
    let inputs: Vec<usize> = (0..n).flat_map(|i| captions.row(i)[..t - 1].to_vec()).collect();
    let prefix = linear(b, "cap.prefix", z.values)?;
    let tok = b.p("cap.tok").gather(&inputs)?.reshape(&[n, t - 1, width])?;
    let text = tok.add(pos.gather(&positions(t - 1))?)?;
    let seq = concat(&[prefix, text], 1)?;
    let h = transformer(b, "cap", seq, depth, heads, true, None)?;
    let total = prefix_len + t - 1;
    let logits = linear(b, "cap.head", h)?.reshape(&[n * total, captions.vocab_size])?;
    let mut targets = vec![PAD; n * total];
    for i in 0..n {
        let row = captions.row(i);
        for j in 0..t - 1 {
            targets[i * total + prefix_len + j] = row[j + 1];
        }
    }
    logits.cross_entropy(&targets, Some(PAD))
}

/// Symmetric InfoNCE over unit-norm `[N, D]` embeddings; `logit_scale`
/// multiplies cosine similarities (inverse temperature).
pub fn contrastive_loss<'g, T: Real>(
    img: Var<'g, T>,
    txt: Var<'g, T>,
    logit_scale: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (si, st) = (img.shape(), txt.shape());
    if si.len() != 2 || si != st {
        return Err(Error::shape(format!("contrastive loss of {si:?} and {st:?}")));
    }
    let n = si[0];
    if n < 2 {
        return Err(Error::Invalid("contrastive loss needs at least two pairs".into()));
    }
    let sim = img.matmul(txt.transpose()?)?.mul(logit_scale)?;
    let diag: Vec<usize> = (0..n).collect();
    let i2t = sim.cross_entropy(&diag, None)?;
    let t2i = sim.transpose()?.cross_entropy(&diag, None)?;
    Ok(i2t.add(t2i)?.scale(0.5))
}

/// `caption + alpha * contrastive`.
pub fn und_loss<'g, T: Real>(caption: Var<'g, T>, contrastive: Var<'g, T>, alpha: f64) -> Result<Var<'g, T>> {
    caption.add(contrastive.scale(alpha))
}
