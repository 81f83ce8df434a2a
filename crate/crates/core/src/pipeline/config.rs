//! Flat `key = value` configuration for training runs and model shapes.
//!
//! Undotted keys name [`TrainConfig`] fields. Dotted keys (`enc.d`,
//! `lm.layers`, ...) set model sizes and are stored in checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::{AlignmentConfig, TextEncoderConfig};
use crate::autograd::Activation;
use crate::data::tokenizer::protein_vocab_size;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::KernelSign;
use crate::lm::LmConfig;
use crate::moe::AuxReduction;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: u8,
    pub peak_lr: f64,
    /// Learning rate of carried-over tensors relative to `peak_lr`.
    pub lr_group_ratio: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    /// Optimizer steps; when non-zero it replaces `epochs`.
    pub steps: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub aux_reduction: AuxReduction,
    pub structure_prob: f64,
    /// Coordinate noise scale for denoising.
    pub alpha: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 0,
            peak_lr: 1e-3,
            lr_group_ratio: 0.1,
            warmup_ratio: 0.06,
            epochs: 1,
            steps: 0,
            batch_size: 8,
            beta: 0.01,
            aux_reduction: AuxReduction::Mean,
            structure_prob: 0.85,
            alpha: 1.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage > 2 {
            return Err(Error::config(format!("unknown stage {}", self.stage)));
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return Err(Error::config("warmup_ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.structure_prob) {
            return Err(Error::config("structure_prob must lie in [0, 1]"));
        }
        if !(self.peak_lr > 0.0) || !(self.lr_group_ratio >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 || (self.epochs == 0 && self.steps == 0) {
            return Err(Error::config("batch_size and the step budget must be positive"));
        }
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("beta, alpha and grad_clip must be non-negative"));
        }
        Ok(())
    }

    /// Sets one field; `false` when `key` is not a field name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stage" => self.stage = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "lr_group_ratio" => self.lr_group_ratio = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "aux_reduction" => {
                self.aux_reduction = AuxReduction::parse(value)
                    .ok_or_else(|| Error::config(format!("bad aux_reduction '{value}'")))?
            }
            "structure_prob" => self.structure_prob = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "stage = {}\npeak_lr = {}\nlr_group_ratio = {}\nwarmup_ratio = {}\nepochs = {}\n\
             steps = {}\nbatch_size = {}\nbeta = {}\naux_reduction = {}\nstructure_prob = {}\n\
             alpha = {}\nweight_decay = {}\ngrad_clip = {}\nseed = {}\n",
            self.stage,
            self.peak_lr,
            self.lr_group_ratio,
            self.warmup_ratio,
            self.epochs,
            self.steps,
            self.batch_size,
            self.beta,
            self.aux_reduction.as_str(),
            self.structure_prob,
            self.alpha,
            self.weight_decay,
            self.grad_clip,
            self.seed
        )
    }
}

/// Sizes of every model component. Vocabulary sizes are filled from data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc: EncoderConfig,
    pub text: TextEncoderConfig,
    pub align: AlignmentConfig,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    /// Desk-scale sizes.
    fn default() -> Self {
        Self {
            enc: EncoderConfig {
                d: 32,
                layers: 2,
                heads: 4,
                kernels: 16,
                max_len: 64,
                ffn_mult: 2,
                ..EncoderConfig::default()
            },
            text: TextEncoderConfig {
                d: 32,
                layers: 1,
                heads: 4,
                vocab: 0,
                max_len: 64,
            },
            align: AlignmentConfig::default(),
            lm: LmConfig {
                d: 64,
                layers: 2,
                heads: 4,
                max_len: 96,
                ffn_mult: 2,
                ..LmConfig::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(mut self, text_vocab: usize) -> Self {
        self.enc.vocab = protein_vocab_size();
        self.text.vocab = text_vocab;
        self.lm.vocab = text_vocab;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.enc.validate()?;
        self.text.validate()?;
        self.align.validate()?;
        self.lm.validate()
    }

    /// Sets one dotted key; `false` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "enc.d" => self.enc.d = num(key, value)?,
            "enc.layers" => self.enc.layers = num(key, value)?,
            "enc.heads" => self.enc.heads = num(key, value)?,
            "enc.vocab" => self.enc.vocab = num(key, value)?,
            "enc.kernels" => self.enc.kernels = num(key, value)?,
            "enc.max_len" => self.enc.max_len = num(key, value)?,
            "enc.ffn_mult" => self.enc.ffn_mult = num(key, value)?,
            "enc.omega" => self.enc.omega = num(key, value)?,
            "enc.activation" => {
                self.enc.activation = Activation::parse(value)
                    .ok_or_else(|| Error::config(format!("bad activation '{value}'")))?
            }
            "enc.sign" => {
                self.enc.sign = KernelSign::parse(value)
                    .ok_or_else(|| Error::config(format!("bad kernel sign '{value}'")))?
            }
            "txt.d" => self.text.d = num(key, value)?,
            "txt.layers" => self.text.layers = num(key, value)?,
            "txt.heads" => self.text.heads = num(key, value)?,
            "txt.vocab" => self.text.vocab = num(key, value)?,
            "txt.max_len" => self.text.max_len = num(key, value)?,
            "align.tau" => self.align.tau = num(key, value)?,
            "align.embed_dim" => self.align.embed_dim = num(key, value)?,
            "align.normalize" => self.align.normalize = num(key, value)?,
            "lm.d" => self.lm.d = num(key, value)?,
            "lm.layers" => self.lm.layers = num(key, value)?,
            "lm.heads" => self.lm.heads = num(key, value)?,
            "lm.vocab" => self.lm.vocab = num(key, value)?,
            "lm.max_len" => self.lm.max_len = num(key, value)?,
            "lm.ffn_mult" => self.lm.ffn_mult = num(key, value)?,
            "moe.topk" => self.lm.topk = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Keys of the protein encoder, text encoder and alignment heads.
    pub fn encoder_map(&self) -> BTreeMap<String, String> {
        let e = &self.enc;
        let t = &self.text;
        let a = &self.align;
        [
            ("enc.d", e.d.to_string()),
            ("enc.layers", e.layers.to_string()),
            ("enc.heads", e.heads.to_string()),
            ("enc.vocab", e.vocab.to_string()),
            ("enc.kernels", e.kernels.to_string()),
            ("enc.max_len", e.max_len.to_string()),
            ("enc.ffn_mult", e.ffn_mult.to_string()),
            ("enc.omega", e.omega.to_string()),
            ("enc.activation", e.activation.as_str().to_string()),
            ("enc.sign", e.sign.as_str().to_string()),
            ("txt.d", t.d.to_string()),
            ("txt.layers", t.layers.to_string()),
            ("txt.heads", t.heads.to_string()),
            ("txt.vocab", t.vocab.to_string()),
            ("txt.max_len", t.max_len.to_string()),
            ("align.tau", a.tau.to_string()),
            ("align.embed_dim", a.embed_dim.to_string()),
            ("align.normalize", a.normalize.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn lm_map(&self) -> BTreeMap<String, String> {
        let l = &self.lm;
        [
            ("lm.d", l.d.to_string()),
            ("lm.layers", l.layers.to_string()),
            ("lm.heads", l.heads.to_string()),
            ("lm.vocab", l.vocab.to_string()),
            ("lm.max_len", l.max_len.to_string()),
            ("lm.ffn_mult", l.ffn_mult.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overlays every recognized key of `map`; other keys are ignored.
    pub fn overlay(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            self.set(k, v)?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Unknown keys are
/// configuration errors.
pub fn parse_config(text: &str) -> Result<(TrainConfig, ModelConfig)> {
    let mut train = TrainConfig::default();
    let mut model = ModelConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected key = value, got '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        if !train.set(k, v)? && !model.set(k, v)? {
            return Err(Error::config(format!("unknown key '{k}' on line {}", i + 1)));
        }
    }
    train.validate()?;
    Ok((train, model))
}

pub fn load_config(path: &Path) -> Result<(TrainConfig, ModelConfig)> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fields_and_model_keys() {
        let text = "# run\nstage = 1\npeak_lr = 0.002\nsteps=40 # budget\nenc.d = 16\nmoe.topk = 2\n";
        let (t, m) = parse_config(text).unwrap();
        assert_eq!(t.stage, 1);
        assert_eq!(t.peak_lr, 0.002);
        assert_eq!(t.steps, 40);
        assert_eq!(t.lr_group_ratio, 0.1);
        assert_eq!(t.warmup_ratio, 0.06);
        assert_eq!(t.structure_prob, 0.85);
        assert_eq!(m.enc.d, 16);
        assert_eq!(m.lm.topk, 2);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(parse_config("speed = 3"), Err(Error::Config(_))));
        assert!(matches!(parse_config("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(parse_config("warmup_ratio = 1.0"), Err(Error::Config(_))));
        assert!(matches!(parse_config("structure_prob = 1.5"), Err(Error::Config(_))));
        assert!(matches!(parse_config("no equals sign"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn text_round_trip() {
        let t = TrainConfig {
            stage: 2,
            beta: 0.0,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(parse_config(&t.to_text()).unwrap().0, t);
    }

    #[test]
    fn model_maps_overlay() {
        let m = ModelConfig {
            enc: EncoderConfig {
                d: 24,
                ..ModelConfig::default().enc
            },
            ..ModelConfig::default()
        }
        .with_vocab(50);
        let mut back = ModelConfig::default();
        back.overlay(&m.encoder_map()).unwrap();
        back.overlay(&m.lm_map()).unwrap();
        assert_eq!(back, m);
    }
}
