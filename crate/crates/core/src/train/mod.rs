//! Two-stage training loop, learning-rate schedule, curve logs and the
//! three-mode loss-interaction ablation.

mod config;
mod curves;

pub use config::{DataConfig, Mode, StageConfig, TrainConfig, MODES};
pub use curves::{read_curves, write_curves, AblationSummary, ComponentSummary, CurveWriter, LossReport, COMPONENTS, CURVE_HEADER};

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::codec::ImageBatch;
use crate::data::scene::sample_seed;
use crate::data::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::model::{sample_noise, Batch, CaptionBatch, NoiseConfig, ObjectiveWeights, Tokenizer};
use crate::tensor::optim::{adamw_step, AdamState, ParamSlot};
use crate::tensor::{Graph, Tensor};

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, s: &StageConfig) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    let p = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.base_lr * 0.5 * (1.0 + (PI * p).cos())
}

/// Indices of batch `step`. Epochs are consecutive seeded permutations, so
/// any batch can be recomputed without replaying earlier ones.
pub fn batch_indices(seed: u64, stage: usize, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = step * batch + j;
        let (epoch, off) = (pos / n, pos % n);
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let key = ((stage as u64) << 40) ^ epoch as u64;
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, key)));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("set above").1[off]);
    }
    out
}

/// A stage's full training set at its resolution.
pub struct StageData {
    pub images: ImageBatch<f32>,
    pub captions: CaptionBatch,
}

impl StageData {
    pub fn new(corpus: &Corpus, vocab: &Vocab, resolution: usize, max_len: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        let idx: Vec<usize> = (0..corpus.len()).collect();
        Ok(Self { images: corpus.materialize(resolution)?, captions: corpus.caption_batch(&idx, vocab, max_len)? })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<f32> {
        let s = self.images.0.shape();
        let per = s[1] * s[2] * s[3];
        let src = self.images.0.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let images = ImageBatch(Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).expect("gathered batch"));
        Batch { images, captions: self.captions.select(idx) }
    }
}

/// Training state: model, optimizer moments and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocab,
    pub model: Tokenizer<f32>,
    adam: AdamState<f32>,
    stage: usize,
    step: usize,
    global_step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let mc = cfg.model(vocab.len());
        let grid = mc.grid_for(cfg.stages[0].resolution)?;
        let model = Tokenizer::new(mc, grid)?;
        let adam = AdamState::new(model.params.values());
        Ok(Self { cfg, vocab, model, adam, stage: 0, step: 0, global_step: 0 })
    }

    /// `(stage, steps done in that stage, steps done overall)`.
    pub fn position(&self) -> (usize, usize, usize) {
        (self.stage, self.step, self.global_step)
    }

    fn enter_stage(&mut self, stage: usize) -> Result<()> {
        if stage == self.stage {
            return Ok(());
        }
        let grid = self.model.config.grid_for(self.cfg.stages[stage].resolution)?;
        self.model.resize_grid(grid)?;
        // each stage runs its own schedule with fresh moments
        self.adam = AdamState::new(self.model.params.values());
        self.stage = stage;
        self.step = 0;
        Ok(())
    }

    pub fn weights(&self, stage: usize) -> ObjectiveWeights {
        ObjectiveWeights {
            omega_rec: self.cfg.omega_rec,
            omega_und: self.cfg.omega_und,
            alpha: self.cfg.alpha,
            beta: self.cfg.beta,
            lambda: self.cfg.stage_lambda(stage),
        }
    }

    /// One optimizer step on the next batch of the current stage.
    pub fn train_step(&mut self, data: &StageData) -> Result<LossReport> {
        let stage = self.stage;
        let sc = self.cfg.stages[stage].clone();
        let lr = lr_at(self.step, &sc);
        let idx = batch_indices(self.cfg.seed, stage, self.step, sc.batch_size, data.len());
        let batch = data.batch(&idx);
        let w = self.weights(stage);
        let noise = if self.cfg.tau > 0.0 {
            let (gh, gw) = self.model.grid();
            let key = ((stage as u64) << 40) ^ (self.step as u64) ^ (1 << 63);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.cfg.seed, key));
            Some(sample_noise::<f32, _>(
                &[idx.len(), gh * gw, self.cfg.vit.dim],
                NoiseConfig { tau: self.cfg.tau },
                &mut rng,
            )?)
        } else {
            None
        };

        let g = Graph::new();
        let (report, grads) = {
            let b = self.model.params.bind(&g);
            let l = self.model.forward(&b, &batch, noise.as_ref(), w)?;
            let report = LossReport::compose(
                self.global_step,
                stage + 1,
                lr,
                [l.pixel_l1, l.latent_l1, l.perceptual, l.caption, l.contrastive].map(|v| f64::from(v.item())),
                w,
            );
            report.check_finite(self.global_step)?;
            let objective = match self.cfg.mode {
                Mode::Joint => l.total,
                Mode::UndOnly => l.und.scale(w.omega_und),
                Mode::RecOnly => l.rec.scale(w.omega_rec),
            };
            g.backward(objective)?;
            (report, b.reached_grads())
        };
        let decay = self.model.decay_mask();
        let mut slots: Vec<ParamSlot<'_, f32>> = self
            .model
            .params
            .iter_mut()
            .zip(&grads)
            .zip(decay)
            .map(|(((name, value), grad), decay)| ParamSlot { name, value, grad: grad.as_deref(), decay })
            .collect();
        adamw_step(&mut slots, &mut self.adam, lr, &self.cfg.optim)?;
        self.step += 1;
        self.global_step += 1;
        Ok(report)
    }

    /// Runs the remainder of `stage` (0-based), reporting every step to
    /// `on_step`. Moving to a later stage resamples positional tables.
    pub fn run_stage(
        &mut self,
        stage: usize,
        corpus: &Corpus,
        on_step: &mut dyn FnMut(&LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        if stage < self.stage || stage >= self.cfg.stages.len() {
            return Err(Error::Invalid(format!("cannot run stage {} from stage {}", stage + 1, self.stage + 1)));
        }
        self.enter_stage(stage)?;
        let sc = self.cfg.stages[stage].clone();
        let mut log = Vec::with_capacity(sc.total_steps - self.step.min(sc.total_steps));
        if self.step >= sc.total_steps {
            return Ok(log);
        }
        let data = StageData::new(corpus, &self.vocab, sc.resolution, self.cfg.text.max_len)?;
        while self.step < sc.total_steps {
            let r = self.train_step(&data)?;
            on_step(&r)?;
            log.push(r);
        }
        Ok(log)
    }

    /// Both stages, with a checkpoint `stage{n}.ckpt` in `ckpt_dir` after each.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        ckpt_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        let mut all = Vec::new();
        for stage in self.stage..self.cfg.stages.len() {
            all.extend(self.run_stage(stage, corpus, on_step)?);
            if let Some(dir) = ckpt_dir {
                self.checkpoint().save(&dir.join(format!("stage{}.ckpt", stage + 1)))?;
            }
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(&self.vocab);
        for (i, name) in self.model.params.names().iter().enumerate() {
            let shape = self.model.params.values()[i].shape().to_vec();
            ck.entries.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), self.adam.m[i].clone()).expect("moment")));
            ck.entries.push((format!("adam.v.{name}"), Tensor::new(shape, self.adam.v[i].clone()).expect("moment")));
        }
        ck.header.extra["train"] = serde_json::json!({
            "config": self.cfg.to_text(),
            "stage": self.stage,
            "step": self.step,
            "global_step": self.global_step,
            "adam_step": self.adam.step,
        });
        ck
    }

    /// Restores a trainer saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (model, vocab) = Tokenizer::from_checkpoint(ck)?;
        let t = ck
            .header
            .extra
            .get("train")
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))?;
        let field = |k: &str| {
            t.get(k).and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
        };
        let text = t.get("config").and_then(|v| v.as_str()).ok_or_else(|| Error::Checkpoint("missing config".into()))?;
        let cfg = TrainConfig::parse(text)?;
        let stage = field("stage")? as usize;
        if stage >= cfg.stages.len() || model.config != cfg.model(vocab.len()) {
            return Err(Error::Checkpoint("training state disagrees with the stored model".into()));
        }
        let mut adam = AdamState::new(model.params.values());
        adam.step = field("adam_step")?;
        for (i, name) in model.params.names().iter().enumerate() {
            for (kind, buf) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = ck
                    .get(&format!("adam.{kind}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for `{name}`")))?;
                if t.numel() != buf.len() {
                    return Err(Error::Checkpoint(format!("optimizer state size mismatch for `{name}`")));
                }
                buf.copy_from_slice(t.data());
            }
        }
        Ok(Self {
            cfg,
            vocab,
            model,
            adam,
            stage,
            step: field("step")? as usize,
            global_step: field("global_step")? as usize,
        })
    }
}

pub struct AblationRun {
    pub mode: Mode,
    pub trainer: Trainer,
    pub log: Vec<LossReport>,
}

/// Three runs of `cfg` that differ only in mode, in [`MODES`] order.
pub fn run_ablation_suite(
    cfg: &TrainConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    on_step: &mut dyn FnMut(Mode, &LossReport) -> Result<()>,
) -> Result<Vec<AblationRun>> {
    let mut out = Vec::new();
    for mode in MODES {
        let mut c = cfg.clone();
        c.mode = mode;
        let mut trainer = Trainer::new(c, vocab.clone())?;
        let log = trainer.run(corpus, None, &mut |r| on_step(mode, r))?;
        out.push(AblationRun { mode, trainer, log });
    }
    Ok(out)
}
