use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{self, interpolate_pos_embed, UnifiedTokens, PATCH};
use super::features::FeatureNet;
use super::recon::{self, recon_loss, ReconLossWeights};
use super::text::{self, contrastive_loss, und_loss, CaptionBatch};
use super::{init_transformer, Bound, Init, ParamStore};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::codec::{CodecParams, ImageBatch, LatentGrid};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Initial inverse temperature of the contrastive logits.
pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;
pub const MIN_LOGIT_SCALE: f64 = 1.0 / 100.0;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of the shared contrastive embedding space.
    pub embed_dim_contrastive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub decoder_depth: usize,
    pub text: TextConfig,
    pub vocab_size: usize,
    pub codec_factor: usize,
    pub codec_seed: u64,
    pub feature_seed: u64,
    pub init_seed: u64,
}

impl ViTConfig {
    pub fn desk() -> Self {
        Self { depth: 6, dim: 256, heads: 8, mlp_ratio: 4, embed_dim_contrastive: 256 }
    }

    pub fn base() -> Self {
        Self { depth: 12, dim: 768, heads: 12, mlp_ratio: 4, embed_dim_contrastive: 512 }
    }

    pub fn large() -> Self {
        Self { depth: 24, dim: 1024, heads: 16, mlp_ratio: 4, embed_dim_contrastive: 768 }
    }
}

impl TextConfig {
    pub fn desk() -> Self {
        Self { depth: 4, width: 256, heads: 4, max_len: 32 }
    }
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vit: ViTConfig::desk(),
            decoder_depth: 6,
            text: TextConfig::desk(),
            vocab_size,
            codec_factor: 4,
            codec_seed: 0,
            feature_seed: 1,
            init_seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.vit.heads == 0 || self.vit.dim % self.vit.heads != 0 {
            return bad(format!("vit.dim {} is not divisible by vit.heads {}", self.vit.dim, self.vit.heads));
        }
        if self.text.heads == 0 || self.text.width % self.text.heads != 0 {
            return bad(format!(
                "text.width {} is not divisible by text.heads {}",
                self.text.width, self.text.heads
            ));
        }
        if self.vit.mlp_ratio == 0 || self.vit.embed_dim_contrastive == 0 || self.vit.dim == 0 {
            return bad("vit dimensions must be positive".into());
        }
        if self.text.max_len < 2 {
            return bad("text.max_len must allow BOS and EOS".into());
        }
        if self.vocab_size < 5 {
            return bad(format!("vocabulary of {} tokens is too small", self.vocab_size));
        }
        if self.codec_factor == 0 {
            return bad("codec factor must be positive".into());
        }
        Ok(())
    }

    /// Per-side pixel downsampling from image to token grid.
    pub fn stride(&self) -> usize {
        self.codec_factor * PATCH
    }

    pub fn grid_for(&self, resolution: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if resolution == 0 || resolution % s != 0 {
            return Err(Error::Invalid(format!(
                "resolution {resolution} is not divisible by {s} (codec factor {} x patch {PATCH})",
                self.codec_factor
            )));
        }
        Ok((resolution / s, resolution / s))
    }
}

#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    pub images: ImageBatch<T>,
    pub captions: CaptionBatch,
}

/// Objective weights of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub omega_rec: f64,
    pub omega_und: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// Every loss of one forward pass, still attached to the graph.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses<'g, T: Real> {
    pub pixel_l1: Var<'g, T>,
    pub latent_l1: Var<'g, T>,
    pub perceptual: Var<'g, T>,
    pub caption: Var<'g, T>,
    pub contrastive: Var<'g, T>,
    pub rec: Var<'g, T>,
    pub und: Var<'g, T>,
    pub total: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Tokenizer<T: Real = f32> {
    pub config: ModelConfig,
    pub codec: CodecParams,
    pub features: FeatureNet<T>,
    pub params: ParamStore<T>,
    grid: (usize, usize),
}

impl<T: Real> Tokenizer<T> {
    pub fn new(config: ModelConfig, grid: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let codec = CodecParams::new(config.codec_factor, config.codec_seed)?;
        let features = FeatureNet::new(config.feature_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { rng: &mut rng };
        let mut p = ParamStore::default();
        let (v, t) = (&config.vit, &config.text);
        let dv = codec.latent_channels();
        let tokens = grid.0 * grid.1;

        init.linear(&mut p, "enc.patch", PATCH * PATCH * dv, v.dim, true);
        init.embedding(&mut p, "enc.pos", tokens, v.dim);
        init_transformer(&mut init, &mut p, "enc", v.depth, v.dim, v.mlp_ratio);
        init.linear(&mut p, "pool", v.dim, v.embed_dim_contrastive, false);

        init.linear(&mut p, "dec.in", v.dim, v.dim, true);
        init.embedding(&mut p, "dec.pos", tokens, v.dim);
        init_transformer(&mut init, &mut p, "dec", config.decoder_depth, v.dim, v.mlp_ratio);
        init.linear(&mut p, "dec.head", v.dim, PATCH * PATCH * dv, true);

        init.embedding(&mut p, "txt.tok", config.vocab_size, t.width);
        init.embedding(&mut p, "txt.pos", t.max_len, t.width);
        init_transformer(&mut init, &mut p, "txt", t.depth, t.width, 4);
        init.linear(&mut p, "txt.proj", t.width, v.embed_dim_contrastive, false);

        init.linear(&mut p, "cap.prefix", v.dim, t.width, true);
        init.embedding(&mut p, "cap.tok", config.vocab_size, t.width);
        init.embedding(&mut p, "cap.pos", t.max_len - 1, t.width);
        init_transformer(&mut init, &mut p, "cap", t.depth, t.width, 4);
        init.linear(&mut p, "cap.head", t.width, config.vocab_size, true);

        p.insert("logit_scale", Tensor::scalar(T::of(INIT_LOGIT_SCALE.ln())));
        Ok(Self { config, codec, features, params: p, grid })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>, grid: (usize, usize)) -> Result<Self> {
        let fresh = Self::new(config, grid)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Invalid(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Resamples both ViT positional tables for a new token grid.
    pub fn resize_grid(&mut self, grid: (usize, usize)) -> Result<()> {
        if grid == self.grid {
            return Ok(());
        }
        for name in ["enc.pos", "dec.pos"] {
            let t = self.params.get(name).expect("positional table");
            let resized = interpolate_pos_embed(t, self.grid, grid)?;
            self.params.insert(name, resized);
        }
        self.grid = grid;
        Ok(())
    }

    /// Copy whose positional tables match images of `resolution` pixels.
    pub fn at_resolution(&self, resolution: usize) -> Result<Self> {
        let mut m = self.clone();
        m.resize_grid(self.config.grid_for(resolution)?)?;
        Ok(m)
    }

    /// Whether AdamW weight decay applies to each parameter (matrices only).
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params.values().iter().map(|t| t.rank() >= 2).collect()
    }

    pub fn cast<U: Real>(&self) -> Tokenizer<U> {
        Tokenizer {
            config: self.config.clone(),
            codec: self.codec.clone(),
            features: FeatureNet::new(self.config.feature_seed),
            params: self.params.cast(),
            grid: self.grid,
        }
    }

    pub fn encode_latents(&self, images: &ImageBatch<T>) -> Result<LatentGrid<T>> {
        self.codec.encode(images)
    }

    pub fn unified<'g>(&self, b: &Bound<'g, '_, T>, latents: Var<'g, T>) -> Result<UnifiedTokens<'g, T>> {
        encoder::encode(b, latents, self.config.vit.depth, self.config.vit.heads)
    }

    pub fn decode_tokens<'g>(&self, b: &Bound<'g, '_, T>, z: &UnifiedTokens<'g, T>) -> Result<Var<'g, T>> {
        recon::decode(b, z, self.config.decoder_depth, self.config.vit.heads)
    }

    pub fn pool_visual<'g>(&self, b: &Bound<'g, '_, T>, z: &UnifiedTokens<'g, T>) -> Result<Var<'g, T>> {
        encoder::pool(b, z)
    }

    pub fn encode_text<'g>(&self, b: &Bound<'g, '_, T>, captions: &CaptionBatch) -> Result<Var<'g, T>> {
        text::encode_text(b, captions, self.config.text.depth, self.config.text.heads)
    }

    pub fn caption_loss<'g>(
        &self,
        b: &Bound<'g, '_, T>,
        z: &UnifiedTokens<'g, T>,
        captions: &CaptionBatch,
    ) -> Result<Var<'g, T>> {
        text::caption_loss(b, z, captions, self.config.text.depth, self.config.text.heads)
    }

    pub fn logit_scale<'g>(&self, b: &Bound<'g, '_, T>) -> Var<'g, T> {
        b.p("logit_scale").clamp(MIN_LOGIT_SCALE.ln(), MAX_LOGIT_SCALE.ln()).exp()
    }

    /// Full forward pass computing every component loss. `noise`, when
    /// given, perturbs the tokens feeding the reconstruction decoder only.
    pub fn forward<'g>(
        &self,
        b: &Bound<'g, '_, T>,
        batch: &Batch<T>,
        noise: Option<&Tensor<T>>,
        w: ObjectiveWeights,
    ) -> Result<StepLosses<'g, T>> {
        let g = b.graph();
        let latents = self.encode_latents(&batch.images)?;
        let x = g.constant(batch.images.0.clone());
        let z = g.constant(latents.values);
        let zu = self.unified(b, z)?;
        let noisy = match noise {
            Some(n) => UnifiedTokens { values: zu.values.add(g.constant(n.clone()))?, grid: zu.grid },
            None => zu,
        };
        let z_hat = self.decode_tokens(b, &noisy)?;
        let x_hat = self.codec.decode_var(z_hat)?;
        let rec = recon_loss(x, x_hat, z, z_hat, ReconLossWeights { beta: w.beta, lambda: w.lambda }, &self.features)?;

        let img = self.pool_visual(b, &zu)?;
        let txt = self.encode_text(b, &batch.captions)?;
        let contrastive = contrastive_loss(img, txt, self.logit_scale(b))?;
        let caption = self.caption_loss(b, &zu, &batch.captions)?;
        let und = und_loss(caption, contrastive, w.alpha)?;
        let total = rec.total.scale(w.omega_rec).add(und.scale(w.omega_und))?;
        Ok(StepLosses {
            pixel_l1: rec.pixel_l1,
            latent_l1: rec.latent_l1,
            perceptual: rec.perceptual,
            caption,
            contrastive,
            rec: rec.total,
            und,
            total,
        })
    }

    /// Noise-free reconstruction (unclamped), processed in chunks.
    pub fn reconstruct(&self, images: &ImageBatch<T>, chunk: usize) -> Result<ImageBatch<T>> {
        let mut out = Vec::with_capacity(images.0.numel());
        let s = images.0.shape().to_vec();
        for start in (0..images.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(images.len());
            let part = slice_batch(images, start, end);
            let g = Graph::new();
            let b = self.params.bind(&g);
            let z = g.constant(self.encode_latents(&part)?.values);
            let zu = self.unified(&b, z)?;
            let z_hat = self.decode_tokens(&b, &zu)?;
            out.extend_from_slice(self.codec.decode_var(z_hat)?.value().data());
        }
        ImageBatch::new(Tensor::new(s, out)?)
    }

    /// Unit-norm image embeddings `[N, D_e]`.
    pub fn embed_images(&self, images: &ImageBatch<T>, chunk: usize) -> Result<Tensor<T>> {
        let mut out = Vec::new();
        for start in (0..images.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(images.len());
            let part = slice_batch(images, start, end);
            let g = Graph::new();
            let b = self.params.bind(&g);
            let z = g.constant(self.encode_latents(&part)?.values);
            let zu = self.unified(&b, z)?;
            out.extend_from_slice(self.pool_visual(&b, &zu)?.value().data());
        }
        Tensor::new([images.len(), self.config.vit.embed_dim_contrastive], out)
    }

    /// Unit-norm caption embeddings `[N, D_e]`.
    pub fn embed_text(&self, captions: &CaptionBatch, chunk: usize) -> Result<Tensor<T>> {
        let mut out = Vec::new();
        let idx: Vec<usize> = (0..captions.n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let sub = captions.select(part);
            let g = Graph::new();
            let b = self.params.bind(&g);
            out.extend_from_slice(self.encode_text(&b, &sub)?.value().data());
        }
        Tensor::new([captions.n, self.config.vit.embed_dim_contrastive], out)
    }
}

impl Tokenizer<f32> {
    /// Parameters plus everything needed to rebuild the model: config, grid,
    /// and the caption vocabulary.
    pub fn to_checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        let extra = serde_json::json!({
            "model": self.config,
            "grid": [self.grid.0, self.grid.1],
            "vocab": vocab.tokens(),
        });
        Checkpoint {
            header: CheckpointHeader { codec_seed: self.config.codec_seed, codec_factor: self.config.codec_factor, extra },
            entries: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vocab)> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let extra = &ckpt.header.extra;
        let config: ModelConfig =
            serde_json::from_value(extra.get("model").cloned().ok_or_else(|| bad("missing model config"))?)?;
        let grid: (usize, usize) =
            serde_json::from_value(extra.get("grid").cloned().ok_or_else(|| bad("missing token grid"))?)?;
        let tokens: Vec<String> =
            serde_json::from_value(extra.get("vocab").cloned().ok_or_else(|| bad("missing vocabulary"))?)?;
        let mut text = tokens.join("\n");
        text.push('\n');
        let vocab = Vocab::parse(&text)?;
        if config.codec_seed != ckpt.header.codec_seed || config.codec_factor != ckpt.header.codec_factor {
            return Err(bad("codec header disagrees with the model config"));
        }
        if vocab.len() != config.vocab_size {
            return Err(bad("vocabulary size disagrees with the model config"));
        }
        let mut params = ParamStore::default();
        let fresh = Self::new(config.clone(), grid)?;
        for name in fresh.params.names() {
            let t = ckpt.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            params.insert(name.clone(), t.clone());
        }
        Ok((Self::from_parts(config, params, grid)?, vocab))
    }
}

pub(crate) fn slice_batch<T: Real>(images: &ImageBatch<T>, start: usize, end: usize) -> ImageBatch<T> {
    let s = images.0.shape();
    let per = s[1] * s[2] * s[3];
    let data = images.0.data()[start * per..end * per].to_vec();
    ImageBatch(Tensor::new(vec![end - start, s[1], s[2], s[3]], data).expect("slice"))
}
