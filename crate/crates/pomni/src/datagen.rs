//! Synthetic multimodal recordings with a known class-conditional shared latent, plus
//! the PSRD on-disk format.
//!
//! Every modality of one recording carries the same band-limited oscillation (the
//! shared latent, frequency set by the class or regression value, amplitude modulated
//! per one-second window), its own private oscillation, and white noise, all scaled to
//! microvolt ranges. Splits are disjoint by synthetic subject.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::numerics::Rng;
use crate::{Error, Modality, Result};

/// Annotates an io error with the path that produced it.
pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Microvolt amplitudes of the three signal components.
const SHARED_AMP: f64 = 20.0;
const PRIVATE_AMP: f64 = 10.0;
const NOISE_AMP: f64 = 10.0;

/// Class c oscillates at `6 + 5c` Hz.
pub const CLASS_BASE_HZ: f64 = 6.0;
pub const CLASS_STEP_HZ: f64 = 5.0;
/// Regression value v maps to `6 + 10v` Hz.
pub const REGRESSION_SPAN_HZ: f64 = 10.0;
/// Private components live in this band, away from every class frequency.
pub const PRIVATE_BAND_HZ: (f64, f64) = (20.0, 30.0);

/// Source sampling rate before preprocessing.
pub fn source_rate(m: Modality) -> u32 {
    match m {
        Modality::Eeg | Modality::Eog => 250,
        Modality::Ecg | Modality::Emg => 1000,
    }
}

/// The supervised target attached to a recording.
#[derive(Clone, Debug, PartialEq)]
pub enum RecordingLabel {
    None,
    Class(u32),
    Values(Vec<f32>),
}

/// Dataset split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag '{other}'"))),
        }
    }
}

/// One modality's raw signal: channel-major samples at the source rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTrack {
    pub modality: Modality,
    pub rate: u32,
    pub channels: Vec<Vec<f64>>,
}

/// One multimodal recording as stored in a PSRD file.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub tracks: Vec<ModalityTrack>,
    pub label: RecordingLabel,
}

/// The downstream task the generator builds labels for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenTask {
    Classes(usize),
    Regression(usize),
}

/// Generator parameters.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub modalities: Vec<Modality>,
    /// Channels per modality, aligned with `modalities`.
    pub channels: Vec<usize>,
    pub seconds: usize,
    pub task: GenTask,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Synthetic subject pool; subjects are partitioned across splits.
    pub subjects: usize,
    /// White-noise multiplier; 1.0 is the standard level, 0.0 is noiseless.
    pub noise: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn desk(seed: u64) -> GenSpec {
        GenSpec {
            modalities: vec![Modality::Eeg, Modality::Ecg, Modality::Emg],
            channels: vec![4, 1, 2],
            seconds: 4,
            task: GenTask::Classes(3),
            train: 600,
            valid: 150,
            test: 150,
            subjects: 20,
            noise: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::InvalidParameter("generator needs at least one modality".into()));
        }
        if self.channels.len() != self.modalities.len() {
            return Err(Error::InvalidParameter(format!(
                "{} channel counts for {} modalities",
                self.channels.len(),
                self.modalities.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.seconds == 0 {
            return Err(Error::InvalidParameter("channels and duration must be positive".into()));
        }
        match self.task {
            GenTask::Classes(k) if !(2..=9).contains(&k) => {
                return Err(Error::InvalidParameter(format!(
                    "class count {k} outside 2..=9 (frequencies must stay inside every passband)"
                )))
            }
            GenTask::Regression(d) if !(1..=3).contains(&d) => {
                return Err(Error::InvalidParameter(format!(
                    "regression dimension {d} outside 1..=3 (each dimension drives a distinct signal property)"
                )))
            }
            _ => {}
        }
        if self.subjects < 3 {
            return Err(Error::InvalidParameter("need at least 3 subjects for disjoint splits".into()));
        }
        if self.train == 0 || self.valid == 0 || self.test == 0 {
            return Err(Error::InvalidParameter("every split needs at least one recording".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidParameter("noise level must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-recording latent parameters, drawn once and shared by all modalities.
struct Latent {
    /// Shared oscillation frequency in Hz.
    freq: f64,
    phase: f64,
    /// Amplitude gain at each one-second boundary, linearly interpolated between.
    envelope: Vec<f64>,
    /// Base gain multiplier (regression dimension 2 modulates it).
    gain: f64,
}

impl Latent {
    fn draw(label: &RecordingLabel, seconds: usize, rng: &mut Rng) -> Latent {
        let (freq, gain) = match label {
            RecordingLabel::Class(c) => (CLASS_BASE_HZ + CLASS_STEP_HZ * *c as f64, 1.0),
            RecordingLabel::Values(v) => {
                let freq = CLASS_BASE_HZ + REGRESSION_SPAN_HZ * v[0] as f64;
                let gain = if v.len() > 1 { 0.5 + v[1] as f64 } else { 1.0 };
                (freq, gain)
            }
            RecordingLabel::None => (CLASS_BASE_HZ, 1.0),
        };
        Latent {
            freq,
            phase: rng.uniform() * std::f64::consts::TAU,
            envelope: (0..=seconds).map(|_| 0.5 + rng.uniform()).collect(),
            gain,
        }
    }

    /// The shared component evaluated at `rate`, identical across modalities up to
    /// sampling density.
    fn sample(&self, rate: u32, seconds: usize) -> Vec<f64> {
        let n = rate as usize * seconds;
        (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                let w = (t.floor() as usize).min(self.envelope.len() - 2);
                let frac = t - w as f64;
                let env = self.envelope[w] * (1.0 - frac) + self.envelope[w + 1] * frac;
                self.gain * env * (std::f64::consts::TAU * self.freq * t + self.phase).sin()
            })
            .collect()
    }
}

/// One generated recording plus its provenance.
#[derive(Clone, Debug)]
pub struct GeneratedRecording {
    pub recording: Recording,
    pub subject: u32,
    pub split: Split,
}

/// Rounds every sample through f32 so PSRD round-trips are bit-identical.
fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn draw_label(task: GenTask, rng: &mut Rng) -> RecordingLabel {
    match task {
        GenTask::Classes(k) => RecordingLabel::Class(rng.below(k) as u32),
        GenTask::Regression(d) => {
            RecordingLabel::Values((0..d).map(|_| rng.uniform() as f32).collect())
        }
    }
}

/// Generates the full dataset deterministically from the spec.
pub fn generate(spec: &GenSpec) -> Result<Vec<GeneratedRecording>> {
    spec.validate()?;
    let base = Rng::seeded(spec.seed).substream("datagen");
    // Partition subjects: at least one per split, roughly 3:1:1.
    let n_sub = spec.subjects;
    let valid_sub = (n_sub / 5).max(1);
    let test_sub = (n_sub / 5).max(1);
    let train_sub = n_sub - valid_sub - test_sub;
    let subject_split = |s: u32| -> Split {
        if (s as usize) < train_sub {
            Split::Train
        } else if (s as usize) < train_sub + valid_sub {
            Split::Valid
        } else {
            Split::Test
        }
    };
    // Per-subject, per-modality gain multipliers.
    let mut subj_rng = base.substream("subjects");
    let subject_gain: Vec<Vec<f64>> = (0..n_sub)
        .map(|_| (0..spec.modalities.len()).map(|_| 0.9 + 0.2 * subj_rng.uniform()).collect())
        .collect();
    let plan: Vec<(Split, usize, usize)> = vec![
        (Split::Train, spec.train, 0),
        (Split::Valid, spec.valid, spec.train),
        (Split::Test, spec.test, spec.train + spec.valid),
    ];
    let mut slots: Vec<(Split, usize, u32)> = Vec::with_capacity(spec.train + spec.valid + spec.test);
    for (split, count, index_base) in plan {
        let split_subjects: Vec<u32> =
            (0..n_sub as u32).filter(|&s| subject_split(s) == split).collect();
        for k in 0..count {
            slots.push((split, index_base + k, split_subjects[k % split_subjects.len()]));
        }
    }
    // Each recording derives its own stream, so generation parallelizes freely and
    // order-preserving collect keeps output deterministic.
    let out: Vec<GeneratedRecording> = slots
        .par_iter()
        .map(|&(split, rec_index, subject)| {
            let mut rng = base.substream_idx(rec_index as u64);
            let label = draw_label(spec.task, &mut rng);
            let latent = Latent::draw(&label, spec.seconds, &mut rng);
            let mut tracks = Vec::with_capacity(spec.modalities.len());
            for (mi, &m) in spec.modalities.iter().enumerate() {
                let rate = source_rate(m);
                let shared = latent.sample(rate, spec.seconds);
                let gain = subject_gain[subject as usize][mi];
                // Private oscillation: per modality per recording, outside the class band.
                let p_freq = match (&label, spec.task) {
                    (RecordingLabel::Values(v), GenTask::Regression(d)) if d >= 3 => {
                        PRIVATE_BAND_HZ.0 + (PRIVATE_BAND_HZ.1 - PRIVATE_BAND_HZ.0) * v[2] as f64
                    }
                    _ => {
                        PRIVATE_BAND_HZ.0
                            + (PRIVATE_BAND_HZ.1 - PRIVATE_BAND_HZ.0) * rng.uniform()
                    }
                };
                let p_phase = rng.uniform() * std::f64::consts::TAU;
                let n = rate as usize * spec.seconds;
                let mut channels = Vec::with_capacity(spec.channels[mi]);
                for _ in 0..spec.channels[mi] {
                    // Per-channel mixing keeps channels distinct but latent-coherent.
                    let ch_gain = 0.8 + 0.4 * rng.uniform();
                    let ch_shift = rng.uniform() * std::f64::consts::TAU;
                    let ch: Vec<f64> = (0..n)
                        .map(|i| {
                            let t = i as f64 / rate as f64;
                            let private =
                                (std::f64::consts::TAU * p_freq * t + p_phase + ch_shift).sin();
                            round_f32(
                                gain * ch_gain * SHARED_AMP * shared[i]
                                    + PRIVATE_AMP * private
                                    + spec.noise * NOISE_AMP * rng.normal(),
                            )
                        })
                        .collect();
                    channels.push(ch);
                }
                tracks.push(ModalityTrack { modality: m, rate, channels });
            }
            GeneratedRecording { recording: Recording { tracks, label }, subject, split }
        })
        .collect();
    Ok(out)
}

/// The shared latent track a given recording index would receive, for verification.
pub fn shared_track(spec: &GenSpec, rec_index: usize, rate: u32) -> Result<Vec<f64>> {
    spec.validate()?;
    let base = Rng::seeded(spec.seed).substream("datagen");
    let mut rng = base.substream_idx(rec_index as u64);
    let label = draw_label(spec.task, &mut rng);
    let latent = Latent::draw(&label, spec.seconds, &mut rng);
    Ok(latent.sample(rate, spec.seconds))
}

const PSRD_MAGIC: &[u8; 4] = b"POMN";
const PSRD_VERSION: u16 = 1;

/// Writes one recording in PSRD layout (little-endian throughout).
pub fn write_psrd(rec: &Recording, path: &Path) -> Result<()> {
    if rec.tracks.is_empty() || rec.tracks.len() > u8::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "{} modalities cannot be stored",
            rec.tracks.len()
        )));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(PSRD_MAGIC);
    buf.extend_from_slice(&PSRD_VERSION.to_le_bytes());
    match &rec.label {
        RecordingLabel::None => buf.push(0),
        RecordingLabel::Class(c) => {
            buf.push(1);
            buf.extend_from_slice(&c.to_le_bytes());
        }
        RecordingLabel::Values(v) => {
            buf.push(2);
            if v.is_empty() || v.len() > u16::MAX as usize {
                return Err(Error::InvalidParameter(format!(
                    "{} regression values cannot be stored",
                    v.len()
                )));
            }
            buf.extend_from_slice(&(v.len() as u16).to_le_bytes());
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    buf.push(rec.tracks.len() as u8);
    for track in &rec.tracks {
        let channels = track.channels.len();
        if channels == 0 || channels > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "{}: {channels} channels cannot be stored",
                track.modality
            )));
        }
        let samples = track.channels[0].len();
        if track.channels.iter().any(|c| c.len() != samples) {
            return Err(Error::InvalidParameter(format!(
                "{}: ragged channels cannot be stored",
                track.modality
            )));
        }
        buf.push(track.modality.code());
        buf.extend_from_slice(&(channels as u16).to_le_bytes());
        buf.extend_from_slice(&track.rate.to_le_bytes());
        buf.extend_from_slice(&(samples as u64).to_le_bytes());
        for ch in &track.channels {
            for &x in ch {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, &buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Cursor over a PSRD byte buffer that reports the offset of any shortfall.
struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated PSRD: {what} needs {n} bytes at byte {}, file has {}",
                self.at,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Reads one PSRD file.
pub fn read_psrd(path: &Path) -> Result<Recording> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut c = Cursor { buf: &buf, at: 0 };
    let magic = c.take(4, "magic")?;
    if magic != PSRD_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:02x?} at byte 0, expected \"POMN\"",
            path.display()
        )));
    }
    let version = c.u16("version")?;
    if version != PSRD_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported PSRD version {version} at byte 4",
            path.display()
        )));
    }
    let label = match c.u8("label kind")? {
        0 => RecordingLabel::None,
        1 => RecordingLabel::Class(c.u32("class label")?),
        2 => {
            let dim = c.u16("regression width")? as usize;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(c.f32("regression value")?);
            }
            RecordingLabel::Values(v)
        }
        k => {
            return Err(Error::Format(format!(
                "{}: unknown label kind {k} at byte 6",
                path.display()
            )))
        }
    };
    let n_mod = c.u8("modality count")? as usize;
    if n_mod == 0 {
        return Err(Error::Format(format!("{}: zero modalities", path.display())));
    }
    let mut tracks = Vec::with_capacity(n_mod);
    for _ in 0..n_mod {
        let at = c.at;
        let code = c.u8("modality code")?;
        let modality = Modality::from_code(code).ok_or_else(|| {
            Error::Format(format!("{}: unknown modality code {code} at byte {at}", path.display()))
        })?;
        let channels = c.u16("channel count")? as usize;
        let rate = c.u32("sampling rate")?;
        let samples = c.u64("sample count")? as usize;
        if channels == 0 || rate == 0 {
            return Err(Error::Format(format!(
                "{}: {modality} with zero channels or rate at byte {at}",
                path.display()
            )));
        }
        let mut chans = Vec::with_capacity(channels);
        for _ in 0..channels {
            let mut ch = Vec::with_capacity(samples);
            for _ in 0..samples {
                ch.push(c.f32("sample data")? as f64);
            }
            chans.push(ch);
        }
        tracks.push(ModalityTrack { modality, rate, channels: chans });
    }
    if c.at != buf.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes at byte {}",
            path.display(),
            buf.len() - c.at,
            c.at
        )));
    }
    Ok(Recording { tracks, label })
}

/// Serializes a label for the manifest column.
pub fn label_to_text(label: &RecordingLabel) -> String {
    match label {
        RecordingLabel::None => "none".into(),
        RecordingLabel::Class(c) => format!("c:{c}"),
        RecordingLabel::Values(v) => {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            format!("r:{}", vals.join(","))
        }
    }
}

pub fn label_from_text(s: &str) -> Result<RecordingLabel> {
    if s == "none" {
        return Ok(RecordingLabel::None);
    }
    if let Some(c) = s.strip_prefix("c:") {
        return Ok(RecordingLabel::Class(c.parse().map_err(|_| {
            Error::Format(format!("bad class label '{s}' in manifest"))
        })?));
    }
    if let Some(r) = s.strip_prefix("r:") {
        let vals: Result<Vec<f32>> = r
            .split(',')
            .map(|x| {
                x.parse::<f32>()
                    .map_err(|_| Error::Format(format!("bad regression label '{s}' in manifest")))
            })
            .collect();
        return Ok(RecordingLabel::Values(vals?));
    }
    Err(Error::Format(format!("unknown label format '{s}' in manifest")))
}

/// One manifest row: a PSRD file plus its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub subject: u32,
    pub label: RecordingLabel,
    pub split: Split,
}

/// Writes the manifest: one `path<TAB>subject<TAB>label<TAB>split` line per recording.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for e in entries {
        writeln!(f, "{}\t{}\t{}\t{}", e.path, e.subject, label_to_text(&e.label), e.split.name())
            .map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!(
                "{}:{}: expected 4 tab-separated columns, found {}",
                path.display(),
                i + 1,
                cols.len()
            )));
        }
        out.push(ManifestEntry {
            path: cols[0].to_string(),
            subject: cols[1].parse().map_err(|_| {
                Error::Format(format!("{}:{}: bad subject '{}'", path.display(), i + 1, cols[1]))
            })?,
            label: label_from_text(cols[2])?,
            split: Split::parse(cols[3])?,
        });
    }
    if out.is_empty() {
        return Err(Error::Format(format!("{}: empty manifest", path.display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigproc::dft_magnitudes;

    fn tiny_spec(seed: u64) -> GenSpec {
        GenSpec {
            modalities: vec![Modality::Eeg, Modality::Ecg],
            channels: vec![2, 1],
            seconds: 2,
            task: GenTask::Classes(2),
            train: 6,
            valid: 2,
            test: 2,
            subjects: 5,
            noise: 1.0,
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate(&tiny_spec(7)).unwrap();
        let b = generate(&tiny_spec(7)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.recording, y.recording);
            assert_eq!(x.subject, y.subject);
            assert_eq!(x.split, y.split);
        }
        let c = generate(&tiny_spec(8)).unwrap();
        assert_ne!(a[0].recording, c[0].recording, "different seeds differ");
    }

    #[test]
    fn splits_are_subject_disjoint() {
        let recs = generate(&GenSpec { train: 30, valid: 10, test: 10, ..tiny_spec(9) }).unwrap();
        let subjects = |s: Split| -> Vec<u32> {
            let mut v: Vec<u32> =
                recs.iter().filter(|r| r.split == s).map(|r| r.subject).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let train = subjects(Split::Train);
        let valid = subjects(Split::Valid);
        let test = subjects(Split::Test);
        assert!(!train.is_empty() && !valid.is_empty() && !test.is_empty());
        for s in &valid {
            assert!(!train.contains(s), "subject {s} leaks train->valid");
            assert!(!test.contains(s), "subject {s} leaks valid->test");
        }
        for s in &test {
            assert!(!train.contains(s), "subject {s} leaks train->test");
        }
    }

    /// Bandpower of a signal in [lo, hi] Hz via DFT magnitudes.
    fn bandpower(x: &[f64], rate: f64, lo: f64, hi: f64) -> f64 {
        let mags = dft_magnitudes(x);
        let hz_per_bin = rate / x.len() as f64;
        mags.iter()
            .enumerate()
            .filter(|(i, _)| {
                let f = *i as f64 * hz_per_bin;
                f >= lo && f <= hi
            })
            .map(|(_, m)| m * m)
            .sum()
    }

    #[test]
    fn noiseless_classes_separate_by_shared_bandpower() {
        let spec = GenSpec { noise: 0.0, train: 20, ..tiny_spec(10) };
        let recs = generate(&spec).unwrap();
        // Class 0 at 6 Hz, class 1 at 11 Hz: compare EEG channel-0 bandpower.
        let mut correct = 0;
        let mut total = 0;
        for r in recs.iter().filter(|r| r.split == Split::Train) {
            let eeg = &r.recording.tracks[0];
            let x = &eeg.channels[0];
            let p6 = bandpower(x, eeg.rate as f64, 4.5, 7.5);
            let p11 = bandpower(x, eeg.rate as f64, 9.5, 12.5);
            let pred = u32::from(p11 > p6);
            let RecordingLabel::Class(y) = r.recording.label else { panic!("class label") };
            if pred == y {
                correct += 1;
            }
            total += 1;
        }
        assert_eq!(correct, total, "noiseless bandpower threshold must be perfect");
    }

    #[test]
    fn shared_component_is_rate_invariant() {
        let spec = tiny_spec(11);
        // Same latent sampled at 250 and 1000 Hz: decimate the fast one and correlate.
        for rec in 0..4 {
            let slow = shared_track(&spec, rec, 250).unwrap();
            let fast = shared_track(&spec, rec, 1000).unwrap();
            let dec: Vec<f64> = fast.iter().step_by(4).cloned().collect();
            assert_eq!(slow.len(), dec.len());
            let n = slow.len() as f64;
            let ms = slow.iter().sum::<f64>() / n;
            let md = dec.iter().sum::<f64>() / n;
            let cov: f64 = slow.iter().zip(&dec).map(|(a, b)| (a - ms) * (b - md)).sum();
            let vs: f64 = slow.iter().map(|a| (a - ms) * (a - ms)).sum();
            let vd: f64 = dec.iter().map(|b| (b - md) * (b - md)).sum();
            let corr = cov / (vs * vd).sqrt();
            assert!(corr >= 0.99, "recording {rec}: cross-rate correlation {corr}");
        }
    }

    #[test]
    fn cross_modal_coherence_peaks_at_the_shared_band() {
        // Per-window shared-band power should co-vary across modalities (the latent
        // envelope drives both); control-band power should not.
        let spec = GenSpec { train: 16, seconds: 4, ..tiny_spec(12) };
        let recs = generate(&spec).unwrap();
        let mut shared_pairs: Vec<(f64, f64)> = Vec::new();
        let mut control_pairs: Vec<(f64, f64)> = Vec::new();
        for r in recs.iter().filter(|r| r.split == Split::Train) {
            let RecordingLabel::Class(y) = r.recording.label else { panic!("class label") };
            let f0 = CLASS_BASE_HZ + CLASS_STEP_HZ * y as f64;
            let eeg = &r.recording.tracks[0];
            let ecg = &r.recording.tracks[1];
            for w in 0..spec.seconds {
                let eeg_win = &eeg.channels[0][w * eeg.rate as usize..(w + 1) * eeg.rate as usize];
                let ecg_win = &ecg.channels[0][w * ecg.rate as usize..(w + 1) * ecg.rate as usize];
                shared_pairs.push((
                    bandpower(eeg_win, eeg.rate as f64, f0 - 1.5, f0 + 1.5),
                    bandpower(ecg_win, ecg.rate as f64, f0 - 1.5, f0 + 1.5),
                ));
                control_pairs.push((
                    bandpower(eeg_win, eeg.rate as f64, 21.0, 29.0),
                    bandpower(ecg_win, ecg.rate as f64, 21.0, 29.0),
                ));
            }
        }
        let corr = |pairs: &[(f64, f64)]| -> f64 {
            let n = pairs.len() as f64;
            let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
            let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
            let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
            let va: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.0 - ma)).sum();
            let vb: f64 = pairs.iter().map(|p| (p.1 - mb) * (p.1 - mb)).sum();
            cov / (va * vb).sqrt()
        };
        let shared_corr = corr(&shared_pairs);
        let control_corr = corr(&control_pairs);
        assert!(
            shared_corr > control_corr + 0.2,
            "shared-band coherence {shared_corr} must clearly exceed control {control_corr}"
        );
        assert!(shared_corr > 0.5, "latent envelope must drive both modalities, got {shared_corr}");
    }

    #[test]
    fn psrd_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let recs = generate(&tiny_spec(13)).unwrap();
        for (i, r) in recs.iter().take(3).enumerate() {
            let path = dir.path().join(format!("r{i}.psrd"));
            write_psrd(&r.recording, &path).unwrap();
            let back = read_psrd(&path).unwrap();
            assert_eq!(back, r.recording, "round trip must be exact");
            // Bit-level check on the raw samples.
            for (ta, tb) in back.tracks.iter().zip(&r.recording.tracks) {
                for (ca, cb) in ta.channels.iter().zip(&tb.channels) {
                    for (a, b) in ca.iter().zip(cb) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
        // Regression labels round-trip too.
        let rec = Recording {
            tracks: vec![ModalityTrack {
                modality: Modality::Eog,
                rate: 250,
                channels: vec![vec![0.25, -0.5, 1.0]],
            }],
            label: RecordingLabel::Values(vec![0.125, 0.75]),
        };
        let path = dir.path().join("reg.psrd");
        write_psrd(&rec, &path).unwrap();
        assert_eq!(read_psrd(&path).unwrap(), rec);
    }

    #[test]
    fn corrupted_psrd_files_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let rec = generate(&tiny_spec(14)).unwrap().remove(0).recording;
        let path = dir.path().join("ok.psrd");
        write_psrd(&rec, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = dir.path().join("magic.psrd");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad_magic, &b).unwrap();
        let err = read_psrd(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let bad_version = dir.path().join("version.psrd");
        let mut b = bytes.clone();
        b[4] = 0xFF;
        b[5] = 0xFF;
        std::fs::write(&bad_version, &b).unwrap();
        let err = read_psrd(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let truncated = dir.path().join("trunc.psrd");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_psrd(&truncated).unwrap_err().to_string();
        assert!(err.contains("at byte"), "truncation must name the offset: {err}");

        let trailing = dir.path().join("trail.psrd");
        let mut b = bytes.clone();
        b.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&trailing, &b).unwrap();
        let err = read_psrd(&trailing).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            ManifestEntry {
                path: "a.psrd".into(),
                subject: 3,
                label: RecordingLabel::Class(2),
                split: Split::Train,
            },
            ManifestEntry {
                path: "b.psrd".into(),
                subject: 9,
                label: RecordingLabel::Values(vec![0.5, 0.25]),
                split: Split::Test,
            },
            ManifestEntry {
                path: "c.psrd".into(),
                subject: 1,
                label: RecordingLabel::None,
                split: Split::Valid,
            },
        ];
        let path = dir.path().join("manifest.tsv");
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
        std::fs::write(&path, "only two\tcolumns\n").unwrap();
        assert!(read_manifest(&path).unwrap_err().to_string().contains("4 tab-separated"));
    }
}
