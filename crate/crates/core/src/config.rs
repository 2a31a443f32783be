//! Run configuration as a flat `key = value` file.
//!
//! A file may start from either preset (`preset = desk | paper`); every other
//! key overrides a single field. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::classifier::FinetuneParams;
use crate::contrastive::{AugmentMethod, ClParams, DEFAULT_TAU};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mlm::{MlmParams, DEFAULT_MASK_RATE, DEFAULT_VARIANTS};
use crate::tokenizer::{DEFAULT_VOCAB_SIZE, FIRST_MERGE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Target size when training the BPE vocabulary.
    pub vocab_size: usize,
    /// `vocab_size` here is the size of the vocabulary actually in use.
    pub encoder: EncoderConfig,
    pub adamw: AdamWConfig,
    pub mlm: MlmParams,
    pub cl: ClParams,
    pub finetune: FinetuneParams,
    pub mlm_max_len: usize,
}

impl RunConfig {
    /// Small model and short schedules that run in minutes on one CPU core.
    pub fn desk() -> Self {
        let adamw = AdamWConfig::default();
        let encoder = EncoderConfig::desk(DEFAULT_VOCAB_SIZE);
        Self {
            preset: Preset::Desk,
            seed: 0,
            vocab_size: DEFAULT_VOCAB_SIZE,
            encoder,
            adamw,
            mlm: MlmParams {
                batch_size: 16,
                lr: 1e-3,
                epochs: 20,
                warmup_steps: 50,
                max_steps: Some(500),
                mask_rate: DEFAULT_MASK_RATE,
                variants: DEFAULT_VARIANTS,
                adamw,
            },
            cl: ClParams {
                batch_size: 32,
                lr: 1e-4,
                epochs: 5,
                warmup_steps: 20,
                max_steps: Some(200),
                tau: DEFAULT_TAU,
                method: AugmentMethod::Swap,
                max_len: encoder.max_len,
                adamw,
            },
            finetune: FinetuneParams {
                batch_size: 16,
                lr: 3e-3,
                epochs: 30,
                warmup_steps: 20,
                max_steps: None,
                max_len: encoder.max_len,
                adamw,
            },
            mlm_max_len: encoder.max_len,
        }
    }

    /// Published hyperparameters: 12×768 encoder; MLM batch 16, lr 5e-5,
    /// 1K warmup, 275K steps; CL batch 32, lr 3e-5, 5 epochs; fine-tuning
    /// batch 64, lr 5e-6, 10 epochs, max length 256.
    pub fn paper() -> Self {
        let adamw = AdamWConfig::default();
        let encoder = EncoderConfig::paper(DEFAULT_VOCAB_SIZE);
        Self {
            preset: Preset::Paper,
            seed: 0,
            vocab_size: DEFAULT_VOCAB_SIZE,
            encoder,
            adamw,
            mlm: MlmParams {
                batch_size: 16,
                lr: 5e-5,
                epochs: 20,
                warmup_steps: 1_000,
                max_steps: Some(275_000),
                mask_rate: DEFAULT_MASK_RATE,
                variants: DEFAULT_VARIANTS,
                adamw,
            },
            cl: ClParams {
                batch_size: 32,
                lr: 3e-5,
                epochs: 5,
                warmup_steps: 1_000,
                max_steps: None,
                tau: DEFAULT_TAU,
                method: AugmentMethod::Swap,
                max_len: 512,
                adamw,
            },
            finetune: FinetuneParams {
                batch_size: 64,
                lr: 5e-6,
                epochs: 10,
                warmup_steps: 1_000,
                max_steps: None,
                max_len: 256,
                adamw,
            },
            mlm_max_len: 512,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses a config file body. `preset` (if present) is applied first,
    /// regardless of where it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(_, k, _)| k == "preset")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::from_preset(preset);
        for (n, k, v) in pairs {
            if k != "preset" {
                cfg.set(&k, &v)
                    .map_err(|e| Error::Config(format!("line {n}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Overrides one field. Does not validate the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<u64>> {
            if v == "none" {
                Ok(None)
            } else {
                p(key, v).map(Some)
            }
        }
        let k = key;
        match key {
            "seed" => self.seed = p(k, value)?,
            "vocab.size" => self.vocab_size = p(k, value)?,
            "encoder.layers" => self.encoder.layers = p(k, value)?,
            "encoder.heads" => self.encoder.heads = p(k, value)?,
            "encoder.d_model" => self.encoder.d_model = p(k, value)?,
            "encoder.d_ff" => self.encoder.d_ff = p(k, value)?,
            "encoder.max_len" => self.encoder.max_len = p(k, value)?,
            "encoder.vocab_size" => self.encoder.vocab_size = p(k, value)?,
            "encoder.dropout" => self.encoder.dropout = p(k, value)?,
            "encoder.attention_dropout" => self.encoder.attention_dropout = p(k, value)?,
            "adamw.beta1" => {
                let v = p(k, value)?;
                self.set_adamw(|a| a.beta1 = v)
            }
            "adamw.beta2" => {
                let v = p(k, value)?;
                self.set_adamw(|a| a.beta2 = v)
            }
            "adamw.epsilon" => {
                let v = p(k, value)?;
                self.set_adamw(|a| a.epsilon = v)
            }
            "adamw.weight_decay" => {
                let v = p(k, value)?;
                self.set_adamw(|a| a.weight_decay = v)
            }
            "mlm.batch_size" => self.mlm.batch_size = p(k, value)?,
            "mlm.lr" => self.mlm.lr = p(k, value)?,
            "mlm.epochs" => self.mlm.epochs = p(k, value)?,
            "mlm.warmup_steps" => self.mlm.warmup_steps = p(k, value)?,
            "mlm.max_steps" => self.mlm.max_steps = opt(k, value)?,
            "mlm.max_len" => self.mlm_max_len = p(k, value)?,
            "mlm.mask_rate" => self.mlm.mask_rate = p(k, value)?,
            "mlm.variants" => self.mlm.variants = p(k, value)?,
            "cl.batch_size" => self.cl.batch_size = p(k, value)?,
            "cl.lr" => self.cl.lr = p(k, value)?,
            "cl.epochs" => self.cl.epochs = p(k, value)?,
            "cl.warmup_steps" => self.cl.warmup_steps = p(k, value)?,
            "cl.max_steps" => self.cl.max_steps = opt(k, value)?,
            "cl.max_len" => self.cl.max_len = p(k, value)?,
            "cl.tau" => self.cl.tau = p(k, value)?,
            "cl.method" => self.cl.method = value.parse()?,
            "finetune.batch_size" => self.finetune.batch_size = p(k, value)?,
            "finetune.lr" => self.finetune.lr = p(k, value)?,
            "finetune.epochs" => self.finetune.epochs = p(k, value)?,
            "finetune.warmup_steps" => self.finetune.warmup_steps = p(k, value)?,
            "finetune.max_steps" => self.finetune.max_steps = opt(k, value)?,
            "finetune.max_len" => self.finetune.max_len = p(k, value)?,
            "preset" => {
                return Err(Error::Config(
                    "preset can only be set in a config file".into(),
                ))
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    fn set_adamw(&mut self, f: impl FnOnce(&mut AdamWConfig)) {
        f(&mut self.adamw);
        self.mlm.adamw = self.adamw;
        self.cl.adamw = self.adamw;
        self.finetune.adamw = self.adamw;
    }

    /// Every key in a fixed order; `parse(to_text())` reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<u64>| v.map_or("none".to_string(), |s| s.to_string());
        let preset = match self.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        };
        vec![
            ("preset", preset.to_string()),
            ("seed", self.seed.to_string()),
            ("vocab.size", self.vocab_size.to_string()),
            ("encoder.layers", self.encoder.layers.to_string()),
            ("encoder.heads", self.encoder.heads.to_string()),
            ("encoder.d_model", self.encoder.d_model.to_string()),
            ("encoder.d_ff", self.encoder.d_ff.to_string()),
            ("encoder.max_len", self.encoder.max_len.to_string()),
            ("encoder.vocab_size", self.encoder.vocab_size.to_string()),
            ("encoder.dropout", self.encoder.dropout.to_string()),
            (
                "encoder.attention_dropout",
                self.encoder.attention_dropout.to_string(),
            ),
            ("adamw.beta1", self.adamw.beta1.to_string()),
            ("adamw.beta2", self.adamw.beta2.to_string()),
            ("adamw.epsilon", self.adamw.epsilon.to_string()),
            ("adamw.weight_decay", self.adamw.weight_decay.to_string()),
            ("mlm.batch_size", self.mlm.batch_size.to_string()),
            ("mlm.lr", self.mlm.lr.to_string()),
            ("mlm.epochs", self.mlm.epochs.to_string()),
            ("mlm.warmup_steps", self.mlm.warmup_steps.to_string()),
            ("mlm.max_steps", opt(self.mlm.max_steps)),
            ("mlm.max_len", self.mlm_max_len.to_string()),
            ("mlm.mask_rate", self.mlm.mask_rate.to_string()),
            ("mlm.variants", self.mlm.variants.to_string()),
            ("cl.batch_size", self.cl.batch_size.to_string()),
            ("cl.lr", self.cl.lr.to_string()),
            ("cl.epochs", self.cl.epochs.to_string()),
            ("cl.warmup_steps", self.cl.warmup_steps.to_string()),
            ("cl.max_steps", opt(self.cl.max_steps)),
            ("cl.max_len", self.cl.max_len.to_string()),
            ("cl.tau", self.cl.tau.to_string()),
            ("cl.method", self.cl.method.to_string()),
            ("finetune.batch_size", self.finetune.batch_size.to_string()),
            ("finetune.lr", self.finetune.lr.to_string()),
            ("finetune.epochs", self.finetune.epochs.to_string()),
            (
                "finetune.warmup_steps",
                self.finetune.warmup_steps.to_string(),
            ),
            ("finetune.max_steps", opt(self.finetune.max_steps)),
            ("finetune.max_len", self.finetune.max_len.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Checks every field against the preconditions of the stage that uses it.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.encoder.validate()?;
        if self.vocab_size <= FIRST_MERGE_ID as usize {
            return fail(format!(
                "vocab.size {} must exceed {FIRST_MERGE_ID}",
                self.vocab_size
            ));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return fail("adamw betas must lie in [0, 1)".into());
        }
        if !(a.epsilon > 0.0) || !(a.weight_decay >= 0.0) {
            return fail("adamw epsilon must be positive and weight decay non-negative".into());
        }
        let stages = [
            (
                "mlm",
                self.mlm.batch_size,
                self.mlm.lr,
                self.mlm.epochs,
                self.mlm_max_len,
            ),
            (
                "cl",
                self.cl.batch_size,
                self.cl.lr,
                self.cl.epochs,
                self.cl.max_len,
            ),
            (
                "finetune",
                self.finetune.batch_size,
                self.finetune.lr,
                self.finetune.epochs,
                self.finetune.max_len,
            ),
        ];
        for (name, batch, lr, epochs, max_len) in stages {
            if batch == 0 {
                return fail(format!("{name}.batch_size must be positive"));
            }
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(format!("{name}.lr {lr} must be finite and non-negative"));
            }
            if epochs == 0 {
                return fail(format!("{name}.epochs must be positive"));
            }
            if max_len < 3 || max_len > self.encoder.max_len {
                return fail(format!(
                    "{name}.max_len {max_len} must lie in 3..={} (encoder.max_len)",
                    self.encoder.max_len
                ));
            }
        }
        if !(self.mlm.mask_rate > 0.0 && self.mlm.mask_rate < 1.0) {
            return fail(format!(
                "mlm.mask_rate {} must lie in (0, 1)",
                self.mlm.mask_rate
            ));
        }
        if self.mlm.variants == 0 {
            return fail("mlm.variants must be at least 1".into());
        }
        if !(self.cl.tau > 0.0 && self.cl.tau.is_finite()) {
            return fail(format!("cl.tau {} must be positive", self.cl.tau));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}
