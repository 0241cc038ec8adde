//! Run configuration: flat `key = value` lines under `[section]` headers.
//!
//! Every key has a desk-scale default; a config file only lists overrides. Unknown
//! sections or keys are errors with line numbers, as are out-of-range values. Booleans
//! are `true`/`false`, lists comma-separated. `to_text` emits the full canonical
//! snapshot, and `parse` of that snapshot reproduces the config exactly.

use std::path::{Path, PathBuf};

use crate::datagen::{GenSpec, GenTask};
use crate::numerics::{OptimizerConfig, Schedule};
use crate::{Error, Modality, Result};

/// Data source shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBlock {
    pub manifest: Option<PathBuf>,
    pub modalities: Vec<Modality>,
    pub mains_hz: f64,
}

/// Generator parameters for `gen-data`.
#[derive(Clone, Debug, PartialEq)]
pub struct GenBlock {
    /// Channels per modality, aligned with `data.modalities`; empty means per-modality
    /// defaults (EEG 4, EOG 2, ECG 1, EMG 2).
    pub channels: Vec<usize>,
    pub seconds: usize,
    /// Class count; 0 switches to regression.
    pub classes: usize,
    /// Regression width; used only when `classes` is 0.
    pub regression: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub subjects: usize,
    pub noise: f64,
}

/// Model dimensions shared across stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlock {
    pub eeg_dim: usize,
    pub other_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Harmonized token count n.
    pub tokens: usize,
    /// Harmonized token width d.
    pub width: usize,
    /// Prototype count; 0 means automatic (class count, or 16 for regression).
    pub prototypes: usize,
}

/// One stage's optimizer block.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOptim {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl StageOptim {
    pub fn steps_per_epoch(&self, samples: usize) -> u64 {
        (samples as u64).div_ceil(self.batch_size as u64).max(1)
    }

    pub fn optimizer_config(&self, samples: usize) -> OptimizerConfig {
        let per_epoch = self.steps_per_epoch(samples);
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            schedule: Schedule {
                peak_lr: self.peak_lr,
                min_lr: self.min_lr,
                warmup_steps: per_epoch * self.warmup_epochs as u64,
                total_steps: per_epoch * self.epochs as u64,
            },
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    fn validate(&self, stage: &str) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("[{stage}] {msg}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("min_lr {} must lie in [0, peak_lr]", self.min_lr));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be nonnegative".into());
        }
        Ok(())
    }
}

/// Tokenizer stage: optimizer plus loss weights and codebook dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerBlock {
    pub optim: StageOptim,
    pub alpha_cross: f64,
    pub alpha_disentangle: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
    pub revive_after: usize,
}

/// Pretrain stage: optimizer plus per-modality mask ratios.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBlock {
    pub optim: StageOptim,
    pub mask_ratio_eeg: f64,
    pub mask_ratio_eog: f64,
    pub mask_ratio_ecg: f64,
    pub mask_ratio_emg: f64,
    /// Initialize encoders from the tokenizer checkpoint.
    pub warm_start_encoders: bool,
}

impl PretrainBlock {
    pub fn mask_ratio(&self, m: Modality) -> f64 {
        match m {
            Modality::Eeg => self.mask_ratio_eeg,
            Modality::Eog => self.mask_ratio_eog,
            Modality::Ecg => self.mask_ratio_ecg,
            Modality::Emg => self.mask_ratio_emg,
        }
    }
}

/// Fine-tune stage: optimizer plus loss mixing and architecture toggles.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneBlock {
    pub optim: StageOptim,
    pub gamma_main: f64,
    pub gamma_align: f64,
    pub gamma_spec: f64,
    pub freeze_encoders: bool,
    pub moe_fuser: bool,
}

/// Ablation toggles; each removes one loss term or mechanism.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Flags {
    pub no_cross_modal: bool,
    pub no_disentangle: bool,
    pub no_shared_codebook: bool,
    pub no_prototype_align: bool,
    pub no_spec_loss: bool,
}

/// Everything a run needs, from data to stage hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataBlock,
    pub gen: GenBlock,
    pub model: ModelBlock,
    pub tokenizer: TokenizerBlock,
    pub pretrain: PretrainBlock,
    pub finetune: FinetuneBlock,
    pub flags: Flags,
}

fn default_channels(m: Modality) -> usize {
    match m {
        Modality::Eeg => 4,
        Modality::Eog => 2,
        Modality::Ecg => 1,
        Modality::Emg => 2,
    }
}

impl RunConfig {
    /// Desk-scale defaults for the synthetic three-modality task.
    pub fn desk() -> RunConfig {
        RunConfig {
            seed: 7,
            out: None,
            data: DataBlock {
                manifest: None,
                modalities: vec![Modality::Eeg, Modality::Eog, Modality::Ecg],
                mains_hz: 50.0,
            },
            gen: GenBlock {
                channels: Vec::new(),
                seconds: 4,
                classes: 3,
                regression: 1,
                train: 600,
                valid: 150,
                test: 150,
                subjects: 20,
                noise: 1.0,
            },
            model: ModelBlock {
                eeg_dim: 64,
                other_dim: 32,
                layers: 2,
                heads: 4,
                codebook_size: 128,
                code_dim: 16,
                decoder_layers: 3,
                decoder_heads: 4,
                tokens: 16,
                width: 32,
                prototypes: 0,
            },
            tokenizer: TokenizerBlock {
                optim: StageOptim {
                    epochs: 5,
                    batch_size: 8,
                    peak_lr: 1e-4,
                    min_lr: 1e-5,
                    warmup_epochs: 1,
                    weight_decay: 1e-4,
                    beta1: 0.9,
                    beta2: 0.99,
                    grad_clip: 3.0,
                },
                alpha_cross: 1.0,
                alpha_disentangle: 0.1,
                ema_decay: 0.99,
                ema_eps: 1e-5,
                revive_after: 2,
            },
            pretrain: PretrainBlock {
                optim: StageOptim {
                    epochs: 10,
                    batch_size: 8,
                    peak_lr: 5e-4,
                    min_lr: 1e-5,
                    warmup_epochs: 2,
                    weight_decay: 0.05,
                    beta1: 0.9,
                    beta2: 0.98,
                    grad_clip: 3.0,
                },
                mask_ratio_eeg: 0.5,
                mask_ratio_eog: 0.7,
                mask_ratio_ecg: 0.7,
                mask_ratio_emg: 0.5,
                warm_start_encoders: true,
            },
            finetune: FinetuneBlock {
                optim: StageOptim {
                    epochs: 20,
                    batch_size: 8,
                    peak_lr: 1e-3,
                    min_lr: 1e-4,
                    warmup_epochs: 2,
                    weight_decay: 0.05,
                    beta1: 0.9,
                    beta2: 0.999,
                    grad_clip: 3.0,
                },
                gamma_main: 1.0,
                gamma_align: 1.0,
                gamma_spec: 0.5,
                freeze_encoders: false,
                moe_fuser: false,
            },
            flags: Flags::default(),
        }
    }

    /// Channels per modality with defaults filled in.
    pub fn channels(&self) -> Result<Vec<usize>> {
        if self.gen.channels.is_empty() {
            return Ok(self.data.modalities.iter().map(|&m| default_channels(m)).collect());
        }
        if self.gen.channels.len() != self.data.modalities.len() {
            return Err(Error::Config(format!(
                "[gen] {} channel counts for {} modalities",
                self.gen.channels.len(),
                self.data.modalities.len()
            )));
        }
        Ok(self.gen.channels.clone())
    }

    /// The generator spec this config describes.
    pub fn gen_spec(&self) -> Result<GenSpec> {
        let task = if self.gen.classes > 0 {
            GenTask::Classes(self.gen.classes)
        } else {
            GenTask::Regression(self.gen.regression)
        };
        let spec = GenSpec {
            modalities: self.data.modalities.clone(),
            channels: self.channels()?,
            seconds: self.gen.seconds,
            task,
            train: self.gen.train,
            valid: self.gen.valid,
            test: self.gen.test,
            subjects: self.gen.subjects,
            noise: self.gen.noise,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.modalities.is_empty() {
            return Err(Error::Config("[data] modality set is empty".into()));
        }
        if !self.data.modalities.contains(&Modality::Eeg) {
            return Err(Error::Config(
                "[data] modality set must include eeg (the alignment anchor)".into(),
            ));
        }
        if !(self.data.mains_hz > 0.0 && self.data.mains_hz < 100.0) {
            return Err(Error::Config(format!(
                "[data] mains_hz {} outside (0, 100)",
                self.data.mains_hz
            )));
        }
        let m = &self.model;
        if m.eeg_dim == 0 || m.eeg_dim % 2 != 0 || m.other_dim == 0 || m.other_dim % 2 != 0 {
            return Err(Error::Config(
                "[model] token widths must be positive and even (private/shared halves)".into(),
            ));
        }
        if m.heads == 0 || m.eeg_dim % m.heads != 0 || m.other_dim % m.heads != 0 {
            return Err(Error::Config(format!(
                "[model] heads {} must divide token widths {} and {}",
                m.heads, m.eeg_dim, m.other_dim
            )));
        }
        if m.layers == 0 || m.decoder_layers == 0 {
            return Err(Error::Config("[model] layer counts must be positive".into()));
        }
        if m.codebook_size < 2 || m.codebook_size > 8192 {
            return Err(Error::Config(format!(
                "[model] codebook_size {} outside 2..=8192",
                m.codebook_size
            )));
        }
        if m.code_dim == 0 || m.code_dim > 64 {
            return Err(Error::Config(format!("[model] code_dim {} outside 1..=64", m.code_dim)));
        }
        if m.decoder_heads == 0 {
            return Err(Error::Config("[model] decoder_heads must be positive".into()));
        }
        if m.tokens == 0 || m.width == 0 {
            return Err(Error::Config("[model] harmonized tokens and width must be positive".into()));
        }
        self.tokenizer.optim.validate("tokenizer")?;
        let t = &self.tokenizer;
        if !(t.alpha_cross >= 0.0 && t.alpha_disentangle >= 0.0) {
            return Err(Error::Config("[tokenizer] loss weights must be nonnegative".into()));
        }
        if !(0.0 < t.ema_decay && t.ema_decay < 1.0) || !(t.ema_eps > 0.0) {
            return Err(Error::Config(format!(
                "[tokenizer] ema_decay {} must lie in (0, 1) and ema_eps {} above 0",
                t.ema_decay, t.ema_eps
            )));
        }
        self.pretrain.optim.validate("pretrain")?;
        for m in &self.data.modalities {
            let r = self.pretrain.mask_ratio(*m);
            if !(0.0 < r && r < 1.0) {
                return Err(Error::Config(format!(
                    "[pretrain] mask ratio {r} for {m} outside (0, 1)"
                )));
            }
        }
        self.finetune.optim.validate("finetune")?;
        let f = &self.finetune;
        if !(f.gamma_main >= 0.0 && f.gamma_align >= 0.0 && f.gamma_spec >= 0.0) {
            return Err(Error::Config("[finetune] loss weights must be nonnegative".into()));
        }
        if self.gen.classes == 0 && self.gen.regression == 0 {
            return Err(Error::Config("[gen] either classes or regression must be positive".into()));
        }
        self.channels()?;
        Ok(())
    }

    /// Canonical full snapshot; `parse` of this text reproduces the config.
    pub fn to_text(&self) -> String {
        let mods: Vec<&str> = self.data.modalities.iter().map(|m| m.name()).collect();
        let channels = self
            .channels()
            .unwrap_or_default()
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        if let Some(out) = &self.out {
            s.push_str(&format!("out = {}\n", out.display()));
        }
        s.push_str("\n[data]\n");
        if let Some(p) = &self.data.manifest {
            s.push_str(&format!("manifest = {}\n", p.display()));
        }
        s.push_str(&format!("modalities = {}\n", mods.join(",")));
        s.push_str(&format!("mains_hz = {}\n", self.data.mains_hz));
        s.push_str("\n[gen]\n");
        s.push_str(&format!("channels = {channels}\n"));
        s.push_str(&format!("seconds = {}\n", self.gen.seconds));
        s.push_str(&format!("classes = {}\n", self.gen.classes));
        s.push_str(&format!("regression = {}\n", self.gen.regression));
        s.push_str(&format!("train = {}\n", self.gen.train));
        s.push_str(&format!("valid = {}\n", self.gen.valid));
        s.push_str(&format!("test = {}\n", self.gen.test));
        s.push_str(&format!("subjects = {}\n", self.gen.subjects));
        s.push_str(&format!("noise = {}\n", self.gen.noise));
        s.push_str("\n[model]\n");
        let m = &self.model;
        s.push_str(&format!("eeg_dim = {}\n", m.eeg_dim));
        s.push_str(&format!("other_dim = {}\n", m.other_dim));
        s.push_str(&format!("layers = {}\n", m.layers));
        s.push_str(&format!("heads = {}\n", m.heads));
        s.push_str(&format!("codebook_size = {}\n", m.codebook_size));
        s.push_str(&format!("code_dim = {}\n", m.code_dim));
        s.push_str(&format!("decoder_layers = {}\n", m.decoder_layers));
        s.push_str(&format!("decoder_heads = {}\n", m.decoder_heads));
        s.push_str(&format!("tokens = {}\n", m.tokens));
        s.push_str(&format!("width = {}\n", m.width));
        s.push_str(&format!("prototypes = {}\n", m.prototypes));
        let optim = |s: &mut String, o: &StageOptim| {
            s.push_str(&format!("epochs = {}\n", o.epochs));
            s.push_str(&format!("batch_size = {}\n", o.batch_size));
            s.push_str(&format!("peak_lr = {}\n", o.peak_lr));
            s.push_str(&format!("min_lr = {}\n", o.min_lr));
            s.push_str(&format!("warmup_epochs = {}\n", o.warmup_epochs));
            s.push_str(&format!("weight_decay = {}\n", o.weight_decay));
            s.push_str(&format!("beta1 = {}\n", o.beta1));
            s.push_str(&format!("beta2 = {}\n", o.beta2));
            s.push_str(&format!("grad_clip = {}\n", o.grad_clip));
        };
        s.push_str("\n[tokenizer]\n");
        optim(&mut s, &self.tokenizer.optim);
        s.push_str(&format!("alpha_cross = {}\n", self.tokenizer.alpha_cross));
        s.push_str(&format!("alpha_disentangle = {}\n", self.tokenizer.alpha_disentangle));
        s.push_str(&format!("ema_decay = {}\n", self.tokenizer.ema_decay));
        s.push_str(&format!("ema_eps = {}\n", self.tokenizer.ema_eps));
        s.push_str(&format!("revive_after = {}\n", self.tokenizer.revive_after));
        s.push_str("\n[pretrain]\n");
        optim(&mut s, &self.pretrain.optim);
        s.push_str(&format!("mask_ratio_eeg = {}\n", self.pretrain.mask_ratio_eeg));
        s.push_str(&format!("mask_ratio_eog = {}\n", self.pretrain.mask_ratio_eog));
        s.push_str(&format!("mask_ratio_ecg = {}\n", self.pretrain.mask_ratio_ecg));
        s.push_str(&format!("mask_ratio_emg = {}\n", self.pretrain.mask_ratio_emg));
        s.push_str(&format!("warm_start_encoders = {}\n", self.pretrain.warm_start_encoders));
        s.push_str("\n[finetune]\n");
        optim(&mut s, &self.finetune.optim);
        s.push_str(&format!("gamma_main = {}\n", self.finetune.gamma_main));
        s.push_str(&format!("gamma_align = {}\n", self.finetune.gamma_align));
        s.push_str(&format!("gamma_spec = {}\n", self.finetune.gamma_spec));
        s.push_str(&format!("freeze_encoders = {}\n", self.finetune.freeze_encoders));
        s.push_str(&format!("moe_fuser = {}\n", self.finetune.moe_fuser));
        s.push_str("\n[flags]\n");
        let f = &self.flags;
        s.push_str(&format!("no_cross_modal = {}\n", f.no_cross_modal));
        s.push_str(&format!("no_disentangle = {}\n", f.no_disentangle));
        s.push_str(&format!("no_shared_codebook = {}\n", f.no_shared_codebook));
        s.push_str(&format!("no_prototype_align = {}\n", f.no_prototype_align));
        s.push_str(&format!("no_spec_loss = {}\n", f.no_spec_loss));
        s
    }

    /// Parses config text as overrides on the desk defaults; validates the result.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::desk();
        let mut section = String::new();
        for (li, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let at = |msg: String| Error::Config(format!("line {}: {msg}", li + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(at(format!("malformed section header '{line}'")));
                };
                section = name.trim().to_string();
                const SECTIONS: [&str; 8] =
                    ["run", "data", "gen", "model", "tokenizer", "pretrain", "finetune", "flags"];
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(at(format!(
                        "unknown section [{section}]; known: {}",
                        SECTIONS.join(", ")
                    )));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected 'key = value', got '{line}'")));
            };
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(at(format!("key '{key}' appears before any [section]")));
            }
            cfg.apply(&section, key, value)
                .map_err(|e| at(format!("[{section}] {key}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::datagen::io_err(path, e))?;
        RunConfig::parse(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse '{value}'")))
        }
        fn boolean(value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("expected true or false, got '{value}'"))),
            }
        }
        fn apply_optim(o: &mut StageOptim, key: &str, value: &str) -> Result<bool> {
            match key {
                "epochs" => o.epochs = num(value)?,
                "batch_size" => o.batch_size = num(value)?,
                "peak_lr" => o.peak_lr = num(value)?,
                "min_lr" => o.min_lr = num(value)?,
                "warmup_epochs" => o.warmup_epochs = num(value)?,
                "weight_decay" => o.weight_decay = num(value)?,
                "beta1" => o.beta1 = num(value)?,
                "beta2" => o.beta2 = num(value)?,
                "grad_clip" => o.grad_clip = num(value)?,
                _ => return Ok(false),
            }
            Ok(true)
        }
        let unknown = || Error::Config("unknown key".into());
        match section {
            "run" => match key {
                "seed" => self.seed = num(value)?,
                "out" => self.out = Some(PathBuf::from(value)),
                _ => return Err(unknown()),
            },
            "data" => match key {
                "manifest" => self.data.manifest = Some(PathBuf::from(value)),
                "modalities" => self.data.modalities = Modality::parse_set(value)?,
                "mains_hz" => self.data.mains_hz = num(value)?,
                _ => return Err(unknown()),
            },
            "gen" => match key {
                "channels" => {
                    let parsed: Result<Vec<usize>> = value
                        .split(',')
                        .filter(|p| !p.trim().is_empty())
                        .map(|p| num(p.trim()))
                        .collect();
                    self.gen.channels = parsed?;
                }
                "seconds" => self.gen.seconds = num(value)?,
                "classes" => self.gen.classes = num(value)?,
                "regression" => self.gen.regression = num(value)?,
                "train" => self.gen.train = num(value)?,
                "valid" => self.gen.valid = num(value)?,
                "test" => self.gen.test = num(value)?,
                "subjects" => self.gen.subjects = num(value)?,
                "noise" => self.gen.noise = num(value)?,
                _ => return Err(unknown()),
            },
            "model" => match key {
                "eeg_dim" => self.model.eeg_dim = num(value)?,
                "other_dim" => self.model.other_dim = num(value)?,
                "layers" => self.model.layers = num(value)?,
                "heads" => self.model.heads = num(value)?,
                "codebook_size" => self.model.codebook_size = num(value)?,
                "code_dim" => self.model.code_dim = num(value)?,
                "decoder_layers" => self.model.decoder_layers = num(value)?,
                "decoder_heads" => self.model.decoder_heads = num(value)?,
                "tokens" => self.model.tokens = num(value)?,
                "width" => self.model.width = num(value)?,
                "prototypes" => self.model.prototypes = num(value)?,
                _ => return Err(unknown()),
            },
            "tokenizer" => {
                if !apply_optim(&mut self.tokenizer.optim, key, value)? {
                    match key {
                        "alpha_cross" => self.tokenizer.alpha_cross = num(value)?,
                        "alpha_disentangle" => self.tokenizer.alpha_disentangle = num(value)?,
                        "ema_decay" => self.tokenizer.ema_decay = num(value)?,
                        "ema_eps" => self.tokenizer.ema_eps = num(value)?,
                        "revive_after" => self.tokenizer.revive_after = num(value)?,
                        _ => return Err(unknown()),
                    }
                }
            }
            "pretrain" => {
                if !apply_optim(&mut self.pretrain.optim, key, value)? {
                    match key {
                        "mask_ratio_eeg" => self.pretrain.mask_ratio_eeg = num(value)?,
                        "mask_ratio_eog" => self.pretrain.mask_ratio_eog = num(value)?,
                        "mask_ratio_ecg" => self.pretrain.mask_ratio_ecg = num(value)?,
                        "mask_ratio_emg" => self.pretrain.mask_ratio_emg = num(value)?,
                        "warm_start_encoders" => {
                            self.pretrain.warm_start_encoders = boolean(value)?
                        }
                        _ => return Err(unknown()),
                    }
                }
            }
            "finetune" => {
                if !apply_optim(&mut self.finetune.optim, key, value)? {
                    match key {
                        "gamma_main" => self.finetune.gamma_main = num(value)?,
                        "gamma_align" => self.finetune.gamma_align = num(value)?,
                        "gamma_spec" => self.finetune.gamma_spec = num(value)?,
                        "freeze_encoders" => self.finetune.freeze_encoders = boolean(value)?,
                        "moe_fuser" => self.finetune.moe_fuser = boolean(value)?,
                        _ => return Err(unknown()),
                    }
                }
            }
            "flags" => match key {
                "no_cross_modal" => self.flags.no_cross_modal = boolean(value)?,
                "no_disentangle" => self.flags.no_disentangle = boolean(value)?,
                "no_shared_codebook" => self.flags.no_shared_codebook = boolean(value)?,
                "no_prototype_align" => self.flags.no_prototype_align = boolean(value)?,
                "no_spec_loss" => self.flags.no_spec_loss = boolean(value)?,
                _ => return Err(unknown()),
            },
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_validate() {
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::desk();
        cfg.seed = 99;
        cfg.data.manifest = Some(PathBuf::from("data/manifest.tsv"));
        cfg.data.modalities = vec![Modality::Eeg, Modality::Ecg, Modality::Emg];
        cfg.gen.channels = vec![2, 1, 3];
        cfg.model.codebook_size = 64;
        cfg.tokenizer.optim.epochs = 3;
        cfg.pretrain.mask_ratio_ecg = 0.6;
        cfg.finetune.moe_fuser = true;
        cfg.flags.no_disentangle = true;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_override_keeps_other_defaults() {
        let cfg = RunConfig::parse("[tokenizer]\nepochs = 2\n").unwrap();
        assert_eq!(cfg.tokenizer.optim.epochs, 2);
        assert_eq!(cfg.tokenizer.optim.batch_size, RunConfig::desk().tokenizer.optim.batch_size);
        assert_eq!(cfg.pretrain.optim.epochs, RunConfig::desk().pretrain.optim.epochs);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected_with_line_numbers() {
        let err = RunConfig::parse("[model]\nwat = 3\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("wat"), "{err}");
        let err = RunConfig::parse("[nope]\nx = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("nope"), "{err}");
        let err = RunConfig::parse("seed = 3\n").unwrap_err().to_string();
        assert!(err.contains("before any"), "{err}");
        let err = RunConfig::parse("[run]\nnot a pair\n").unwrap_err().to_string();
        assert!(err.contains("key = value"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# top comment\n\n[run]\n# inner\nseed = 11\n").unwrap();
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn range_checks_reject_bad_values() {
        let err = RunConfig::parse("[tokenizer]\npeak_lr = 0\n").unwrap_err().to_string();
        assert!(err.contains("peak_lr"), "{err}");
        let err = RunConfig::parse("[model]\neeg_dim = 63\n").unwrap_err().to_string();
        assert!(err.contains("even"), "{err}");
        let err = RunConfig::parse("[data]\nmodalities = ecg\n").unwrap_err().to_string();
        assert!(err.contains("eeg"), "{err}");
        let err =
            RunConfig::parse("[pretrain]\nmask_ratio_eeg = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("mask ratio"), "{err}");
        let err = RunConfig::parse("[tokenizer]\nepochs = 2\nwarmup_epochs = 5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("warmup"), "{err}");
    }

    #[test]
    fn schedule_covers_epochs_times_steps() {
        let cfg = RunConfig::desk();
        let oc = cfg.pretrain.optim.optimizer_config(100);
        // 100 samples, batch 8 -> 13 steps/epoch; 10 epochs, 2 warmup.
        assert_eq!(oc.schedule.total_steps, 130);
        assert_eq!(oc.schedule.warmup_steps, 26);
        assert_eq!(cfg.pretrain.optim.clip(), Some(3.0));
        let none = StageOptim { grad_clip: 0.0, ..cfg.pretrain.optim.clone() };
        assert_eq!(none.clip(), None);
    }

    #[test]
    fn gen_spec_fills_default_channels() {
        let cfg = RunConfig::desk();
        let spec = cfg.gen_spec().unwrap();
        assert_eq!(spec.channels, vec![4, 2, 1]);
        assert_eq!(spec.task, GenTask::Classes(3));
        assert_eq!(spec.seed, cfg.seed);
    }
}
