//! Adapter for a local MUSDB18 copy in its WAV stem layout:
//! `<root>/test/<track>/mixture.wav` and `<root>/test/<track>/vocals.wav`.
//!
//! Frame truth is derived from the isolated vocal stem with the endpoint
//! detector: on within 30 dB of the stem's loud frames, no hangover, and
//! never below -50 dBFS.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::EvalError;
use crate::audio::{load_audio, AudioClip, PIPELINE_RATE};
use crate::features::StftConfig;
use crate::labels::FrameLabelTrack;
use crate::synth::{detect_endpoints, toy::vocal_stem_vad, DatasetManifest, ManifestEntry, Split, Task, VadConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct MusdbTrack {
    pub id: String,
    pub mixture: PathBuf,
    pub vocals: PathBuf,
}

pub fn vocal_truth_config() -> VadConfig {
    vocal_stem_vad()
}

/// Lists tracks of one subset (`train` or `test`), sorted by name.
pub fn list_tracks(root: &Path, subset: &str) -> Result<Vec<MusdbTrack>, EvalError> {
    let dir = root.join(subset);
    let rd = std::fs::read_dir(&dir)
        .map_err(|e| EvalError::Musdb(format!("cannot read {}: {e}", dir.display())))?;
    let mut tracks = Vec::new();
    for e in rd {
        let p = e?.path();
        if !p.is_dir() {
            continue;
        }
        let (mixture, vocals) = (p.join("mixture.wav"), p.join("vocals.wav"));
        if !mixture.is_file() || !vocals.is_file() {
            return Err(EvalError::Musdb(format!(
                "track {} lacks mixture.wav or vocals.wav",
                p.display()
            )));
        }
        tracks.push(MusdbTrack {
            id: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            mixture,
            vocals,
        });
    }
    if tracks.is_empty() {
        return Err(EvalError::Musdb(format!("no tracks under {}", dir.display())));
    }
    tracks.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(tracks)
}

/// Frame truth from the vocal stem. Frames match the spectrogram of the
/// mixture when both have the same length and framing.
pub fn vocal_truth(vocals: &AudioClip, cfg: &VadConfig) -> Result<FrameLabelTrack, EvalError> {
    detect_endpoints(vocals, cfg).map_err(|e| EvalError::Musdb(e.to_string()))
}

/// Labels every track of `subset` from its vocal stem into `out/labels` and
/// returns a test-split manifest over the mixtures, also saved as
/// `out/manifest.jsonl`.
pub fn musdb_manifest(root: &Path, subset: &str, out: &Path, stft: &StftConfig, task: Task) -> Result<DatasetManifest, EvalError> {
    let tracks = list_tracks(root, subset)?;
    let cfg = VadConfig {
        frame_ms: stft.window_ms,
        hop_fraction: stft.hop_fraction,
        ..vocal_truth_config()
    };
    std::fs::create_dir_all(out.join("labels"))?;
    let entries = tracks
        .par_iter()
        .map(|t| {
            let vocals = load_audio(&t.vocals, PIPELINE_RATE)
                .map_err(|e| EvalError::Musdb(format!("{}: {e}", t.vocals.display())))?;
            let labels = PathBuf::from("labels").join(format!("{}.csv", t.id));
            vocal_truth(&vocals, &cfg)?
                .save(&out.join(&labels))
                .map_err(|e| EvalError::Musdb(e.to_string()))?;
            let audio = std::path::absolute(&t.mixture)?;
            Ok(ManifestEntry {
                id: t.id.clone(),
                audio,
                labels,
                split: Split::Test,
                task,
                group: t.id.clone(),
                snr_db: None,
                music_id: None,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let m = DatasetManifest::new(entries, out).map_err(|e| EvalError::Musdb(e.to_string()))?;
    m.save(&out.join("manifest.jsonl")).map_err(|e| EvalError::Musdb(e.to_string()))?;
    Ok(m)
}
