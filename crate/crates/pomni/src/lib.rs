//! Multimodal physiological-signal representation learning.
//!
//! `pomni` trains compact token representations of EEG / EOG / ECG / EMG recordings in three
//! stages, each runnable on a laptop CPU over synthetic data:
//!
//! 1. **Tokenizer** ([`tokenizer`]): per-modality encoders split each token into a private and a
//!    shared half; both halves are vector-quantized (per-modality private codebooks plus one
//!    codebook shared across modalities, EMA-updated). Temporal alignment pools same-channel
//!    tokens so every modality's shared codes tick at the EEG patch rate, and a cross-modal
//!    reconstruction path decodes non-EEG patches from EEG shared codes.
//! 2. **Masked pretraining** ([`pretrain`]): fresh encoders learn to predict the frozen
//!    tokenizer's private and shared code indices at masked patch positions.
//! 3. **Resilient fine-tuning** ([`finetune`]): pretrained encoders feed a homogeneous mapper
//!    (fixed-shape resampling of each modality's token grid), a fusing trunk, and prototype-
//!    aligned heads, trained so any subset of modalities predicts at inference.
//!
//! Everything runs on [`numerics`], a reverse-mode tape with finite-difference-checked operators,
//! deterministic splittable RNG, and a 32/64-bit precision toggle; [`sigproc`] holds the classic
//! DSP front end (Butterworth band-pass, notch, polyphase resampling, patchification).
//!
//! The `pomni` binary wires the stages to a five-command CLI (`gen-data`, `train-tokenizer`,
//! `pretrain`, `finetune`, `evaluate`). Each major capability also has a runnable example:
//!
//! ```text
//! cargo run --release --example gradient_check
//! cargo run --release --example signal_preprocessing
//! cargo run --release --example synthetic_dataset
//! cargo run --release --example codebook_quantization
//! cargo run --release --example tokenizer_training
//! cargo run --release --example masked_pretraining
//! cargo run --release --example resilient_finetuning
//! cargo run --release --example missing_modality_inference
//! cargo run --release --example metrics_report
//! cargo run --release --example full_pipeline
//! ```

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod finetune;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pretrain;
pub mod sigproc;
pub mod tokenizer;

use std::fmt;

/// Crate-wide error type. `exit_code` maps each failure class to the CLI contract:
/// 2 invalid config/spec/arguments or malformed data, 3 missing upstream checkpoint,
/// 4 non-finite value during training, 1 internal invariant breach.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl fmt::Display) -> Self {
        Error::Shape { op, msg: msg.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } => 1,
            Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::Usage(_)
            | Error::Format(_)
            | Error::Io(_) => 2,
            Error::MissingCheckpoint(_) => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// The four supported signal modalities, in canonical order.
///
/// The order is load-bearing: parameter naming, checkpoint layout, shuffles and every
/// per-modality loop iterate in this order so runs are reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Eeg,
    Eog,
    Ecg,
    Emg,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Eeg, Modality::Eog, Modality::Ecg, Modality::Emg];

    /// Stable on-disk code used by the recording format.
    pub fn code(self) -> u8 {
        match self {
            Modality::Eeg => 0,
            Modality::Eog => 1,
            Modality::Ecg => 2,
            Modality::Emg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Modality> {
        Modality::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Eeg => "eeg",
            Modality::Eog => "eog",
            Modality::Ecg => "ecg",
            Modality::Emg => "emg",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eeg" => Ok(Modality::Eeg),
            "eog" => Ok(Modality::Eog),
            "ecg" => Ok(Modality::Ecg),
            "emg" => Ok(Modality::Emg),
            other => Err(Error::InvalidParameter(format!("unknown modality {other:?}"))),
        }
    }

    /// Parses a comma-separated modality list, deduplicates, returns canonical order.
    pub fn parse_set(s: &str) -> Result<Vec<Modality>> {
        let mut present = [false; 4];
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            present[Modality::parse(part)?.code() as usize] = true;
        }
        let set: Vec<Modality> =
            Modality::ALL.iter().copied().filter(|m| present[m.code() as usize]).collect();
        if set.is_empty() {
            return Err(Error::InvalidParameter("empty modality set".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
