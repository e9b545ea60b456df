use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::audio::AudioClip;
use crate::features::{FrameGeometry, StftConfig};
use crate::labels::FrameLabelTrack;

/// Energy endpoint detector settings. Framing follows [`StftConfig`] so the
/// labels line up with spectrogram frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VadConfig {
    pub frame_ms: f64,
    pub hop_fraction: f64,
    /// A frame is on when its energy is within this many dB of the clip's
    /// 95th-percentile frame energy.
    pub energy_threshold_db: f64,
    pub hangover_frames: usize,
    /// Frames quieter than this (dB relative to full scale) are always off.
    pub abs_floor_db: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 40.0,
            hop_fraction: 0.5,
            energy_threshold_db: 30.0,
            hangover_frames: 1,
            abs_floor_db: -80.0,
        }
    }
}

impl VadConfig {
    pub fn matching(stft: &StftConfig) -> Self {
        Self {
            frame_ms: stft.window_ms,
            hop_fraction: stft.hop_fraction,
            ..Self::default()
        }
    }

    pub fn geometry(&self, sample_rate: u32) -> FrameGeometry {
        StftConfig {
            window_ms: self.frame_ms,
            hop_fraction: self.hop_fraction,
            ..StftConfig::default()
        }
        .geometry(sample_rate)
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !self.energy_threshold_db.is_finite() || !self.abs_floor_db.is_finite() {
            return Err(SynthError::Config("VAD thresholds must be finite".into()));
        }
        if !(self.frame_ms > 0.0 && self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return Err(SynthError::Config("VAD framing must be positive".into()));
        }
        Ok(())
    }
}

/// Mean-square energy of each frame, in dB full scale.
pub fn frame_energies_db(samples: &[f32], geom: FrameGeometry) -> Vec<f64> {
    (0..geom.frame_count(samples.len()))
        .map(|t| {
            let s = &samples[geom.frame_span(t)];
            let ms = s.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / s.len() as f64;
            10.0 * (ms + 1e-20).log10()
        })
        .collect()
}

/// Nearest-rank percentile of unsorted data.
pub(crate) fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

pub fn detect_endpoints(clip: &AudioClip, cfg: &VadConfig) -> Result<FrameLabelTrack, SynthError> {
    cfg.validate()?;
    let geom = cfg.geometry(clip.sample_rate());
    let energies = frame_energies_db(clip.samples(), geom);
    if energies.is_empty() {
        return Err(SynthError::TooShort {
            samples: clip.len(),
            frame: geom.window,
        });
    }
    let level = percentile(&energies, 95.0) - cfg.energy_threshold_db;
    let raw: Vec<bool> = energies
        .iter()
        .map(|&e| e > level && e > cfg.abs_floor_db)
        .collect();
    Ok(dilate(&raw, cfg.hangover_frames).into())
}

pub(crate) fn dilate(raw: &[bool], radius: usize) -> Vec<bool> {
    let n = raw.len();
    let mut out = vec![false; n];
    for (i, _) in raw.iter().enumerate().filter(|(_, &on)| on) {
        let lo = i.saturating_sub(radius);
        let hi = (i + radius + 1).min(n);
        out[lo..hi].iter_mut().for_each(|o| *o = true);
    }
    out
}
