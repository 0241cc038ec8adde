//! Signal preprocessing: band-pass + notch filtering, resampling, amplitude scaling,
//! patchification, and reconstruction targets.
//!
//! The per-modality pipeline is: band-pass at the source rate, notch at the source rate,
//! resample to the modality's target rate, divide by 100 (recordings are in microvolts),
//! trim to a whole number of seconds shared across modalities, then cut each channel into
//! non-overlapping patches.

pub mod filter;
pub mod resample;

pub use filter::{butter_bandpass, filtfilt, notch_sections, Biquad};
pub use resample::resample;

use crate::{Error, Modality, Result};

pub const NOTCH_Q: f64 = 30.0;
/// Recordings are in microvolts; dividing by 100 puts typical amplitudes near unit scale.
pub const MICROVOLT_SCALE: f64 = 100.0;

/// Filtering, resampling and patching parameters for one modality.
#[derive(Clone, Debug)]
pub struct ModalitySpec {
    pub modality: Modality,
    /// Band-pass edges in Hz, applied at the source rate.
    pub band: (f64, f64),
    /// Mains notch frequencies in Hz, applied at the source rate.
    pub notches: Vec<f64>,
    /// Rate everything is resampled to before patching.
    pub target_rate: u32,
    /// Patch length in samples at the target rate.
    pub patch_len: usize,
}

impl ModalitySpec {
    /// Standard desk preprocessing: EEG/EOG 0.1-75 Hz at 200 Hz with 200/100-sample
    /// patches, ECG 0.5-60 Hz at 500 Hz, EMG 5-200 Hz at 500 Hz with mains harmonics
    /// notched (EMG power extends well past the mains fundamental).
    pub fn standard(modality: Modality, mains_hz: f64) -> ModalitySpec {
        match modality {
            Modality::Eeg => ModalitySpec {
                modality,
                band: (0.1, 75.0),
                notches: vec![mains_hz],
                target_rate: 200,
                patch_len: 200,
            },
            Modality::Eog => ModalitySpec {
                modality,
                band: (0.1, 75.0),
                notches: vec![mains_hz],
                target_rate: 200,
                patch_len: 100,
            },
            Modality::Ecg => ModalitySpec {
                modality,
                band: (0.5, 60.0),
                notches: vec![mains_hz],
                target_rate: 500,
                patch_len: 100,
            },
            Modality::Emg => ModalitySpec {
                modality,
                band: (5.0, 200.0),
                notches: vec![mains_hz, 2.0 * mains_hz, 3.0 * mains_hz],
                target_rate: 500,
                patch_len: 100,
            },
        }
    }

    pub fn validate(&self, source_rate: u32) -> Result<()> {
        let nyquist = source_rate as f64 / 2.0;
        if !(self.band.0 > 0.0 && self.band.0 < self.band.1 && self.band.1 < nyquist) {
            return Err(Error::InvalidParameter(format!(
                "{}: band {:?} invalid for source rate {source_rate}",
                self.modality, self.band
            )));
        }
        for &f in &self.notches {
            if f <= 0.0 || f >= nyquist {
                return Err(Error::InvalidParameter(format!(
                    "{}: notch {f} Hz outside (0, {nyquist})",
                    self.modality
                )));
            }
        }
        if self.target_rate == 0 || self.patch_len == 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: target rate and patch length must be nonzero",
                self.modality
            )));
        }
        Ok(())
    }

    /// Patches per second at the target rate; must divide evenly (whole patches per second
    /// keep modalities alignable on one-second windows).
    pub fn patches_per_second(&self) -> Result<usize> {
        if self.patch_len == 0 || self.target_rate as usize % self.patch_len != 0 {
            return Err(Error::InvalidParameter(format!(
                "{}: patch length {} does not divide target rate {}",
                self.modality, self.patch_len, self.target_rate
            )));
        }
        Ok(self.target_rate as usize / self.patch_len)
    }
}

/// One modality's tokens: every channel cut into consecutive patches, with index tables
/// mapping each token to its channel and its time slot within the channel.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub modality: Modality,
    pub channels: usize,
    pub patch_len: usize,
    pub patches_per_channel: usize,
    /// [tokens, patch_len] row-major; token order is channel-major (all of channel 0's
    /// patches in time order, then channel 1, ...).
    pub patches: Vec<f64>,
    /// Channel of each token.
    pub channel_idx: Vec<usize>,
    /// Time slot (patch position within its channel) of each token.
    pub time_idx: Vec<usize>,
}

impl PatchGrid {
    pub fn tokens(&self) -> usize {
        self.channel_idx.len()
    }

    pub fn patch(&self, token: usize) -> &[f64] {
        &self.patches[token * self.patch_len..(token + 1) * self.patch_len]
    }
}

/// Divides every sample by the microvolt scale.
pub fn scale_normalize(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v / MICROVOLT_SCALE).collect()
}

/// Cuts equal-length channels into non-overlapping patches. Channel lengths must be a
/// multiple of the patch length (trim beforehand) and yield at least one patch.
pub fn patchify(channels: &[Vec<f64>], modality: Modality, patch_len: usize) -> Result<PatchGrid> {
    if channels.is_empty() {
        return Err(Error::InvalidParameter(format!("{modality}: no channels to patchify")));
    }
    let time = channels[0].len();
    if channels.iter().any(|c| c.len() != time) {
        return Err(Error::InvalidParameter(format!("{modality}: ragged channel lengths")));
    }
    if patch_len == 0 || time < patch_len {
        return Err(Error::InvalidParameter(format!(
            "{modality}: {time} samples cannot form a {patch_len}-sample patch"
        )));
    }
    if time % patch_len != 0 {
        return Err(Error::InvalidParameter(format!(
            "{modality}: {time} samples not a multiple of patch length {patch_len}"
        )));
    }
    let per_channel = time / patch_len;
    let mut patches = Vec::with_capacity(channels.len() * time);
    let mut channel_idx = Vec::with_capacity(channels.len() * per_channel);
    let mut time_idx = Vec::with_capacity(channels.len() * per_channel);
    for (c, ch) in channels.iter().enumerate() {
        for p in 0..per_channel {
            patches.extend_from_slice(&ch[p * patch_len..(p + 1) * patch_len]);
            channel_idx.push(c);
            time_idx.push(p);
        }
    }
    Ok(PatchGrid {
        modality,
        channels: channels.len(),
        patch_len,
        patches_per_channel: per_channel,
        patches,
        channel_idx,
        time_idx,
    })
}

/// Reconstruction-target family: spectral magnitudes or z-scored raw samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Spectral,
    Raw,
}

/// EEG and EMG reconstruct amplitude spectra; EOG and ECG reconstruct raw patches.
pub fn target_kind(modality: Modality) -> TargetKind {
    match modality {
        Modality::Eeg | Modality::Emg => TargetKind::Spectral,
        Modality::Eog | Modality::Ecg => TargetKind::Raw,
    }
}

/// Width of the reconstruction target for one patch.
pub fn target_width(modality: Modality, patch_len: usize) -> usize {
    match target_kind(modality) {
        TargetKind::Spectral => patch_len / 2 + 1,
        TargetKind::Raw => patch_len,
    }
}

/// Reconstruction target for one patch of the given modality.
pub fn recon_target(modality: Modality, patch: &[f64]) -> Vec<f64> {
    match target_kind(modality) {
        TargetKind::Spectral => fourier_amplitude_target(patch),
        TargetKind::Raw => zscore_target(patch),
    }
}

/// Geometry of one modality's preprocessed patch grids across a dataset.
#[derive(Clone, Debug)]
pub struct ModalityLayout {
    pub spec: ModalitySpec,
    pub channels: usize,
    pub patches_per_channel: usize,
}

impl ModalityLayout {
    pub fn tokens(&self) -> usize {
        self.channels * self.patches_per_channel
    }

    /// Whole seconds covered by each channel.
    pub fn seconds(&self) -> Result<usize> {
        Ok(self.patches_per_channel / self.spec.patches_per_second()?)
    }
}

/// Raw DFT magnitudes of one patch, bins 0..=P/2.
pub fn dft_magnitudes(patch: &[f64]) -> Vec<f64> {
    let n = patch.len();
    let half = n / 2;
    let mut out = Vec::with_capacity(half + 1);
    for k in 0..=half {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in patch.iter().enumerate() {
            let phase = std::f64::consts::TAU * k as f64 * i as f64 / n as f64;
            re += x * phase.cos();
            im -= x * phase.sin();
        }
        out.push((re * re + im * im).sqrt());
    }
    out
}

/// Spectral reconstruction target: DFT magnitudes z-scored over the P/2+1 bins.
pub fn fourier_amplitude_target(patch: &[f64]) -> Vec<f64> {
    zscore_target(&dft_magnitudes(patch))
}

/// Per-patch z-scoring: (x − mean)/(std + 1e-5), population std.
pub fn zscore_target(patch: &[f64]) -> Vec<f64> {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-5;
    patch.iter().map(|x| (x - mean) / denom).collect()
}

/// Full per-channel preprocessing to the target rate: band-pass, notch, resample, scale.
pub fn preprocess_channel(x: &[f64], source_rate: u32, spec: &ModalitySpec) -> Result<Vec<f64>> {
    spec.validate(source_rate)?;
    if x.is_empty() {
        return Err(Error::InvalidParameter(format!("{}: empty channel", spec.modality)));
    }
    let rate = source_rate as f64;
    let banded = filtfilt(&butter_bandpass(spec.band.0, spec.band.1, rate)?, x)?;
    let notched = filtfilt(&notch_sections(&spec.notches, rate, NOTCH_Q)?, &banded)?;
    let resampled = resample(&notched, source_rate, spec.target_rate)?;
    Ok(scale_normalize(&resampled))
}

/// Trims every channel to exactly `seconds` of signal at `rate`.
pub fn trim_to_seconds(channels: &mut Vec<Vec<f64>>, rate: u32, seconds: usize) -> Result<()> {
    let want = seconds * rate as usize;
    for ch in channels.iter_mut() {
        if ch.len() < want {
            return Err(Error::InvalidParameter(format!(
                "cannot trim {} samples to {want}",
                ch.len()
            )));
        }
        ch.truncate(want);
    }
    Ok(())
}
