//! Manifest entries loaded as spectrogram + label pairs, with an optional
//! on-disk `VLMS` cache.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::audio::{load_audio, AudioError, PIPELINE_RATE};
use crate::features::{read_vlms, write_vlms, FeatureError, LogMelExtractor, LogMelSpectrogram, StftConfig};
use crate::labels::{FrameLabelTrack, LabelError};
use crate::synth::{DatasetManifest, ManifestEntry, Split, Task};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{id}: audio: {source}")]
    Audio { id: String, source: AudioError },
    #[error("{id}: features: {source}")]
    Features { id: String, source: FeatureError },
    #[error("{id}: labels: {source}")]
    Labels { id: String, source: LabelError },
    #[error("empty split: manifest has no {task} clips in {split}")]
    EmptySplit { task: Task, split: Split },
}

/// A clip ready for block extraction.
#[derive(Clone, Debug)]
pub struct LabeledClip {
    pub id: String,
    pub group: String,
    pub split: Split,
    pub task: Task,
    pub spec: LogMelSpectrogram,
    pub labels: FrameLabelTrack,
}

impl LabeledClip {
    pub fn frames(&self) -> usize {
        self.spec.frames()
    }
}

pub fn cache_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.vlms"))
}

fn load_entry(
    m: &DatasetManifest,
    e: &ManifestEntry,
    ext: &LogMelExtractor,
    cache: Option<&Path>,
) -> Result<LabeledClip, DataError> {
    let id = e.id.clone();
    let period = ext.geometry().hop as f64 / PIPELINE_RATE as f64;
    let cached = cache.map(|d| cache_path(d, &id)).filter(|p| p.is_file());
    let spec = match cached {
        Some(p) => read_vlms(&p, period, &id).map_err(|source| DataError::Features { id: id.clone(), source })?,
        None => {
            let clip = load_audio(&m.resolve(&e.audio), PIPELINE_RATE)
                .map_err(|source| DataError::Audio { id: id.clone(), source })?;
            let spec = ext
                .compute(&clip, &id)
                .map_err(|source| DataError::Features { id: id.clone(), source })?;
            if let Some(d) = cache {
                write_vlms(&cache_path(d, &id), &spec)
                    .map_err(|source| DataError::Features { id: id.clone(), source })?;
                // Reload so cached and fresh runs see identical f32-rounded values.
                read_vlms(&cache_path(d, &id), period, &id)
                    .map_err(|source| DataError::Features { id: id.clone(), source })?
            } else {
                spec
            }
        }
    };
    let labels = FrameLabelTrack::load(&m.resolve(&e.labels))
        .map_err(|source| DataError::Labels { id: id.clone(), source })?;
    labels
        .check_aligned(spec.frames())
        .map_err(|source| DataError::Labels { id: id.clone(), source })?;
    Ok(LabeledClip {
        id,
        group: e.group.clone(),
        split: e.split,
        task: e.task,
        spec,
        labels,
    })
}

/// Loads every entry of `task` in `split`, in manifest order. Computes
/// features in parallel, reading and filling `cache` when given.
pub fn load_split(
    m: &DatasetManifest,
    task: Task,
    split: Split,
    stft: &StftConfig,
    cache: Option<&Path>,
) -> Result<Vec<LabeledClip>, DataError> {
    let entries: Vec<&ManifestEntry> = m.split(split).filter(|e| e.task == task).collect();
    if entries.is_empty() {
        return Err(DataError::EmptySplit { task, split });
    }
    let ext = LogMelExtractor::new(stft, PIPELINE_RATE).map_err(|source| DataError::Features {
        id: "<config>".into(),
        source,
    })?;
    if let Some(d) = cache {
        std::fs::create_dir_all(d).map_err(|e| DataError::Features {
            id: "<cache>".into(),
            source: e.into(),
        })?;
    }
    entries.par_iter().map(|e| load_entry(m, e, &ext, cache)).collect()
}

/// Per-band mean and standard deviation over all frames.
pub fn band_stats(clips: &[LabeledClip]) -> (Vec<f64>, Vec<f64>) {
    let bands = clips.first().map(|c| c.spec.bands()).unwrap_or(0);
    let mut sum = vec![0.0; bands];
    let mut sq = vec![0.0; bands];
    let mut n = 0usize;
    for c in clips {
        for t in 0..c.spec.frames() {
            for (m, &v) in c.spec.row(t).iter().enumerate() {
                sum[m] += v;
                sq[m] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
        .collect();
    (mean, std)
}
