//! Training configuration and its TOML-style `key = value` file format.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TextConfig, ViTConfig};
use crate::tensor::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Joint,
    UndOnly,
    RecOnly,
}

pub const MODES: [Mode; 3] = [Mode::Joint, Mode::UndOnly, Mode::RecOnly];

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::UndOnly => "und_only",
            Mode::RecOnly => "rec_only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MODES
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode `{s}` (expected joint, und_only or rec_only)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub resolution: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub master_resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub text: TextConfig,
    pub decoder_depth: usize,
    pub codec_factor: usize,
    pub codec_seed: u64,
    pub feature_seed: u64,
    pub tau: f64,
    pub beta: f64,
    pub lambda_pretrain: f64,
    pub lambda_finetune: f64,
    pub omega_rec: f64,
    pub omega_und: f64,
    pub alpha: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Low-resolution pretraining then high-resolution finetuning.
    pub stages: [StageConfig; 2],
    pub optim: AdamWConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Reference single-machine preset.
    pub fn desk() -> Self {
        Self {
            vit: ViTConfig::desk(),
            text: TextConfig::desk(),
            decoder_depth: 6,
            codec_factor: 4,
            codec_seed: 0,
            feature_seed: 1,
            tau: 0.2,
            beta: 0.4,
            lambda_pretrain: 0.0,
            lambda_finetune: 0.5,
            omega_rec: 0.5,
            omega_und: 1.0,
            alpha: 1.0,
            seed: 0,
            mode: Mode::Joint,
            stages: [
                StageConfig { resolution: 32, batch_size: 64, base_lr: 3e-4, total_steps: 3000, warmup_steps: 150 },
                StageConfig { resolution: 64, batch_size: 32, base_lr: 1.5e-5, total_steps: 300, warmup_steps: 15 },
            ],
            optim: AdamWConfig::default(),
            data: DataConfig { train_size: 8192, eval_size: 1024, seed: 0, master_resolution: 64 },
        }
    }

    /// Narrow model and a short schedule that trains in minutes on one core.
    pub fn compact() -> Self {
        let mut c = Self::desk();
        c.vit = ViTConfig { depth: 2, dim: 64, heads: 4, mlp_ratio: 4, embed_dim_contrastive: 64 };
        c.text = TextConfig { depth: 2, width: 64, heads: 4, max_len: 32 };
        c.decoder_depth = 2;
        c.stages = [
            StageConfig { resolution: 32, batch_size: 32, base_lr: 1e-3, total_steps: 1000, warmup_steps: 50 },
            StageConfig { resolution: 64, batch_size: 32, base_lr: 5e-5, total_steps: 100, warmup_steps: 5 },
        ];
        c.data = DataConfig { train_size: 4096, eval_size: 256, seed: 0, master_resolution: 64 };
        c
    }

    pub fn stage_lambda(&self, stage: usize) -> f64 {
        if stage == 0 {
            self.lambda_pretrain
        } else {
            self.lambda_finetune
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vit: self.vit.clone(),
            decoder_depth: self.decoder_depth,
            text: self.text.clone(),
            vocab_size,
            codec_factor: self.codec_factor,
            codec_seed: self.codec_seed,
            feature_seed: self.feature_seed,
            init_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        self.model(5).validate()?;
        for (name, v) in [
            ("recon.tau", self.tau),
            ("recon.beta", self.beta),
            ("recon.lambda_pretrain", self.lambda_pretrain),
            ("recon.lambda_finetune", self.lambda_finetune),
            ("train.omega_rec", self.omega_rec),
            ("train.omega_und", self.omega_und),
            ("train.alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        let stride = self.codec_factor * 2;
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.resolution == 0 || s.resolution % stride != 0 {
                return bad(format!("stage{n}.resolution {} is not divisible by {stride}", s.resolution));
            }
            if s.batch_size < 2 {
                return bad(format!("stage{n}.batch_size must be at least 2"));
            }
            if s.warmup_steps >= s.total_steps && !(s.total_steps == 0 && s.warmup_steps == 0) {
                return bad(format!(
                    "stage{n}.warmup_steps {} must be below total_steps {}",
                    s.warmup_steps, s.total_steps
                ));
            }
            if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) {
                return bad(format!("stage{n}.base_lr must be finite and non-negative"));
            }
            if s.batch_size > self.data.train_size {
                return bad(format!("stage{n}.batch_size exceeds data.train_size"));
            }
        }
        if self.stages[1].resolution < self.stages[0].resolution {
            return bad("stage resolutions must be nondecreasing".into());
        }
        if self.data.eval_size < 2 || self.data.master_resolution == 0 {
            return bad("data.eval_size must be at least 2 and data.master_resolution positive".into());
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0)
        {
            return bad("optimizer settings out of range".into());
        }
        Ok(())
    }

    /// Parses a config file, starting from the desk preset. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            line: e.span().map_or(0, |s| line_at(text, s.start)),
            msg: e.message().to_string(),
        })?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        let mut cfg = Self::desk();
        for (key, value) in flat {
            let line = line_of_key(text, &key);
            cfg.set(&key, &value).map_err(|msg| Error::Config { line, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &toml::Value) -> std::result::Result<(), String> {
        let int = || -> std::result::Result<usize, String> {
            match v.as_integer() {
                Some(i) if i >= 0 => Ok(i as usize),
                _ => Err(format!("`{key}` expects a non-negative integer")),
            }
        };
        let seed = || int().map(|i| i as u64);
        let float = || -> std::result::Result<f64, String> {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| format!("`{key}` expects a number"))
        };
        let stage = |s: &mut StageConfig, field: &str| -> std::result::Result<(), String> {
            match field {
                "resolution" => s.resolution = int()?,
                "batch_size" => s.batch_size = int()?,
                "base_lr" => s.base_lr = float()?,
                "total_steps" => s.total_steps = int()?,
                "warmup_steps" => s.warmup_steps = int()?,
                _ => return Err(format!("unknown key `{key}`")),
            }
            Ok(())
        };
        match key {
            "vit.depth" => self.vit.depth = int()?,
            "vit.dim" => self.vit.dim = int()?,
            "vit.heads" => self.vit.heads = int()?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = int()?,
            "vit.embed_dim_contrastive" => self.vit.embed_dim_contrastive = int()?,
            "text.depth" => self.text.depth = int()?,
            "text.width" => self.text.width = int()?,
            "text.heads" => self.text.heads = int()?,
            "text.max_len" => self.text.max_len = int()?,
            "recon.tau" => self.tau = float()?,
            "recon.beta" => self.beta = float()?,
            "recon.lambda_pretrain" => self.lambda_pretrain = float()?,
            "recon.lambda_finetune" => self.lambda_finetune = float()?,
            "recon.decoder_depth" => self.decoder_depth = int()?,
            "recon.feature_seed" => self.feature_seed = seed()?,
            "codec.factor" => self.codec_factor = int()?,
            "codec.seed" => self.codec_seed = seed()?,
            "train.seed" => self.seed = seed()?,
            "train.mode" => {
                let s = v.as_str().ok_or_else(|| format!("`{key}` expects a string"))?;
                self.mode = s.parse().map_err(|e: Error| e.to_string())?;
            }
            "train.omega_rec" => self.omega_rec = float()?,
            "train.omega_und" => self.omega_und = float()?,
            "train.alpha" => self.alpha = float()?,
            "optim.beta1" => self.optim.beta1 = float()?,
            "optim.beta2" => self.optim.beta2 = float()?,
            "optim.eps" => self.optim.eps = float()?,
            "optim.weight_decay" => self.optim.weight_decay = float()?,
            "data.train_size" => self.data.train_size = int()?,
            "data.eval_size" => self.data.eval_size = int()?,
            "data.seed" => self.data.seed = seed()?,
            "data.master_resolution" => self.data.master_resolution = int()?,
            _ => {
                if let Some(f) = key.strip_prefix("stage1.") {
                    return stage(&mut self.stages[0], f);
                }
                if let Some(f) = key.strip_prefix("stage2.") {
                    return stage(&mut self.stages[1], f);
                }
                return Err(format!("unknown key `{key}`"));
            }
        }
        Ok(())
    }

    /// Canonical file form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f = |v: f64| format!("{v:?}");
        let _ = writeln!(s, "[vit]");
        let _ = writeln!(s, "depth = {}", self.vit.depth);
        let _ = writeln!(s, "dim = {}", self.vit.dim);
        let _ = writeln!(s, "heads = {}", self.vit.heads);
        let _ = writeln!(s, "mlp_ratio = {}", self.vit.mlp_ratio);
        let _ = writeln!(s, "embed_dim_contrastive = {}", self.vit.embed_dim_contrastive);
        let _ = writeln!(s, "\n[text]");
        let _ = writeln!(s, "depth = {}", self.text.depth);
        let _ = writeln!(s, "width = {}", self.text.width);
        let _ = writeln!(s, "heads = {}", self.text.heads);
        let _ = writeln!(s, "max_len = {}", self.text.max_len);
        let _ = writeln!(s, "\n[recon]");
        let _ = writeln!(s, "tau = {}", f(self.tau));
        let _ = writeln!(s, "beta = {}", f(self.beta));
        let _ = writeln!(s, "lambda_pretrain = {}", f(self.lambda_pretrain));
        let _ = writeln!(s, "lambda_finetune = {}", f(self.lambda_finetune));
        let _ = writeln!(s, "decoder_depth = {}", self.decoder_depth);
        let _ = writeln!(s, "feature_seed = {}", self.feature_seed);
        let _ = writeln!(s, "\n[codec]");
        let _ = writeln!(s, "factor = {}", self.codec_factor);
        let _ = writeln!(s, "seed = {}", self.codec_seed);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "mode = \"{}\"", self.mode);
        let _ = writeln!(s, "omega_rec = {}", f(self.omega_rec));
        let _ = writeln!(s, "omega_und = {}", f(self.omega_und));
        let _ = writeln!(s, "alpha = {}", f(self.alpha));
        for (i, st) in self.stages.iter().enumerate() {
            let _ = writeln!(s, "\n[stage{}]", i + 1);
            let _ = writeln!(s, "resolution = {}", st.resolution);
            let _ = writeln!(s, "batch_size = {}", st.batch_size);
            let _ = writeln!(s, "base_lr = {}", f(st.base_lr));
            let _ = writeln!(s, "total_steps = {}", st.total_steps);
            let _ = writeln!(s, "warmup_steps = {}", st.warmup_steps);
        }
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "beta1 = {}", f(self.optim.beta1));
        let _ = writeln!(s, "beta2 = {}", f(self.optim.beta2));
        let _ = writeln!(s, "eps = {}", f(self.optim.eps));
        let _ = writeln!(s, "weight_decay = {}", f(self.optim.weight_decay));
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train_size = {}", self.data.train_size);
        let _ = writeln!(s, "eval_size = {}", self.data.eval_size);
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "master_resolution = {}", self.data.master_resolution);
        s
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Best-effort 1-based line of a dotted key, 0 when not found.
fn line_of_key(text: &str, key: &str) -> usize {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let starts = |l: &str, k: &str| {
        l.strip_prefix(k).is_some_and(|rest| rest.trim_start().starts_with('='))
    };
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            starts(l, key) || starts(l, leaf)
        })
        .map_or(0, |i| i + 1)
}
