//! Loading recordings into training-ready samples: preprocessing, patch grids,
//! reconstruction targets, and split separation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::datagen::{
    io_err, read_manifest, read_psrd, write_manifest, write_psrd, GeneratedRecording,
    ManifestEntry, RecordingLabel, Split,
};
use crate::finetune::Label;
use crate::sigproc::{
    patchify, preprocess_channel, recon_target, trim_to_seconds, ModalityLayout, ModalitySpec,
    PatchGrid,
};
use crate::{Error, Modality, Result};

/// One preprocessed recording, ready for any training stage.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Per-modality patch grids, aligned with the dataset's modality order.
    pub grids: Vec<PatchGrid>,
    /// Per-modality reconstruction targets, each `tokens x target_width` row-major.
    pub recon_targets: Vec<Vec<f64>>,
    /// Supervised target, absent for unlabeled recordings.
    pub label: Option<Label>,
    pub subject: u32,
}

/// A fully loaded dataset with consistent geometry across every sample.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub modalities: Vec<Modality>,
    pub layouts: Vec<ModalityLayout>,
    /// Whole seconds retained per recording after preprocessing.
    pub seconds: usize,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedDataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Distinct class count across all splits, if labels are classes.
    pub fn class_count(&self) -> Option<usize> {
        let mut max: Option<usize> = None;
        for s in self.train.iter().chain(&self.valid).chain(&self.test) {
            match &s.label {
                Some(Label::Class(c)) => max = Some(max.unwrap_or(0).max(c + 1)),
                Some(Label::Values(_)) => return None,
                None => {}
            }
        }
        max
    }

    /// Regression width, if labels are value vectors.
    pub fn regression_dim(&self) -> Option<usize> {
        for s in self.train.iter().chain(&self.valid).chain(&self.test) {
            match &s.label {
                Some(Label::Values(v)) => return Some(v.len()),
                Some(Label::Class(_)) => return None,
                None => {}
            }
        }
        None
    }
}

fn convert_label(label: &RecordingLabel) -> Option<Label> {
    match label {
        RecordingLabel::None => None,
        RecordingLabel::Class(c) => Some(Label::Class(*c as usize)),
        RecordingLabel::Values(v) => Some(Label::Values(v.iter().map(|&x| x as f64).collect())),
    }
}

/// Writes recordings plus a manifest into `dir`, returning the manifest path.
pub fn write_dataset(recs: &[GeneratedRecording], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(recs.len());
    for (i, rec) in recs.iter().enumerate() {
        let name = format!("rec_{i:05}.psrd");
        write_psrd(&rec.recording, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            subject: rec.subject,
            label: rec.recording.label.clone(),
            split: rec.split,
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&entries, &manifest)?;
    Ok(manifest)
}

/// Preprocesses one recording into a sample: band-pass, notch, resample, scale, trim to
/// whole seconds, patchify, and compute reconstruction targets.
fn prepare_sample(
    path: &Path,
    entry: &ManifestEntry,
    specs: &[ModalitySpec],
) -> Result<(Sample, usize)> {
    let rec = read_psrd(path)?;
    let mut grids = Vec::with_capacity(specs.len());
    let mut targets = Vec::with_capacity(specs.len());
    let mut seconds = usize::MAX;
    let mut processed: Vec<Vec<Vec<f64>>> = Vec::with_capacity(specs.len());
    for spec in specs {
        let track = rec
            .tracks
            .iter()
            .find(|t| t.modality == spec.modality)
            .ok_or_else(|| {
                Error::Format(format!("{}: no {} track", path.display(), spec.modality))
            })?;
        let channels: Result<Vec<Vec<f64>>> = track
            .channels
            .iter()
            .map(|ch| preprocess_channel(ch, track.rate, spec))
            .collect();
        let channels = channels?;
        let secs = channels[0].len() / spec.target_rate as usize;
        seconds = seconds.min(secs);
        processed.push(channels);
    }
    if seconds == 0 {
        return Err(Error::Format(format!(
            "{}: shorter than one second after preprocessing",
            path.display()
        )));
    }
    for (spec, mut channels) in specs.iter().zip(processed) {
        trim_to_seconds(&mut channels, spec.target_rate, seconds)?;
        let grid = patchify(&channels, spec.modality, spec.patch_len)?;
        let mut flat = Vec::with_capacity(grid.tokens());
        for tok in 0..grid.tokens() {
            flat.extend(recon_target(spec.modality, grid.patch(tok)));
        }
        grids.push(grid);
        targets.push(flat);
    }
    let sample = Sample {
        grids,
        recon_targets: targets,
        label: convert_label(&entry.label),
        subject: entry.subject,
    };
    Ok((sample, seconds))
}

/// Loads a manifest and turns every recording into a preprocessed sample.
///
/// Relative manifest paths resolve against the manifest's directory. Every sample must
/// agree on channel counts and patches per channel; geometry drift is an error.
pub fn prepare(manifest: &Path, modalities: &[Modality], mains_hz: f64) -> Result<PreparedDataset> {
    if modalities.is_empty() {
        return Err(Error::InvalidParameter("empty modality set".into()));
    }
    let entries = read_manifest(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let specs: Vec<ModalitySpec> =
        modalities.iter().map(|&m| ModalitySpec::standard(m, mains_hz)).collect();
    let prepared: Result<Vec<(Split, Sample, usize)>> = entries
        .par_iter()
        .map(|entry| {
            let path = root.join(&entry.path);
            let (sample, seconds) = prepare_sample(&path, entry, &specs)?;
            Ok((entry.split, sample, seconds))
        })
        .collect();
    let prepared = prepared?;
    let seconds = prepared[0].2;
    let mut layouts: Vec<ModalityLayout> = Vec::new();
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (split, sample, secs)) in prepared.into_iter().enumerate() {
        if secs != seconds {
            return Err(Error::Format(format!(
                "{}: recording {i} covers {secs}s, dataset covers {seconds}s",
                manifest.display()
            )));
        }
        if layouts.is_empty() {
            layouts = sample
                .grids
                .iter()
                .zip(&specs)
                .map(|(g, spec)| ModalityLayout {
                    spec: spec.clone(),
                    channels: g.channels,
                    patches_per_channel: g.patches_per_channel,
                })
                .collect();
        } else {
            for (g, layout) in sample.grids.iter().zip(&layouts) {
                if g.channels != layout.channels
                    || g.patches_per_channel != layout.patches_per_channel
                {
                    return Err(Error::Format(format!(
                        "{}: recording {i} {} geometry {}x{} differs from {}x{}",
                        manifest.display(),
                        g.modality,
                        g.channels,
                        g.patches_per_channel,
                        layout.channels,
                        layout.patches_per_channel
                    )));
                }
            }
        }
        match split {
            Split::Train => train.push(sample),
            Split::Valid => valid.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(PreparedDataset {
        modalities: modalities.to_vec(),
        layouts,
        seconds,
        train,
        valid,
        test,
    })
}
