#![allow(dead_code)]

use unitok::data::{build_vocab, Corpus, Vocab};
use unitok::model::{Batch, ModelConfig, ObjectiveWeights, TextConfig, Tokenizer, ViTConfig};
use unitok::train::{DataConfig, StageConfig, TrainConfig};

pub const TINY_VIT: ViTConfig = ViTConfig { depth: 1, dim: 16, heads: 2, mlp_ratio: 2, embed_dim_contrastive: 16 };
pub const TINY_TEXT: TextConfig = TextConfig { depth: 1, width: 16, heads: 2, max_len: 32 };

pub fn tiny_model_config(vocab_size: usize) -> ModelConfig {
    ModelConfig { vit: TINY_VIT, decoder_depth: 1, text: TINY_TEXT, ..ModelConfig::desk(vocab_size) }
}

/// Model over 16px images: a 2x2 token grid.
pub fn tiny_model<T: unitok::tensor::Real>(vocab: &Vocab) -> Tokenizer<T> {
    Tokenizer::new(tiny_model_config(vocab.len()), (2, 2)).unwrap()
}

/// A few-second two-stage schedule (16px then 32px).
pub fn tiny_train_config() -> TrainConfig {
    let mut c = TrainConfig::compact();
    c.vit = TINY_VIT;
    c.text = TINY_TEXT;
    c.decoder_depth = 1;
    c.stages = [
        StageConfig { resolution: 16, batch_size: 4, base_lr: 1e-3, total_steps: 8, warmup_steps: 2 },
        StageConfig { resolution: 32, batch_size: 4, base_lr: 5e-5, total_steps: 3, warmup_steps: 1 },
    ];
    c.data = DataConfig { train_size: 24, eval_size: 8, seed: 3, master_resolution: 32 };
    c
}

pub fn weights() -> ObjectiveWeights {
    ObjectiveWeights { omega_rec: 0.5, omega_und: 1.0, alpha: 1.0, beta: 0.4, lambda: 0.5 }
}

pub fn batch<T: unitok::tensor::Real>(corpus: &Corpus, vocab: &Vocab, res: usize, max_len: usize) -> Batch<T> {
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let images = corpus.batch(&idx, res).unwrap();
    Batch {
        images: unitok::codec::ImageBatch(images.0.cast()),
        captions: corpus.caption_batch(&idx, vocab, max_len).unwrap(),
    }
}

pub fn vocab() -> Vocab {
    build_vocab()
}
