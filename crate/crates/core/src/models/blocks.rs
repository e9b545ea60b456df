use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::LogMelSpectrogram;
use crate::labels::FrameLabelTrack;

/// `T = 2L + 1` frames centred on the frame being classified, hop one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub frames: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { frames: 25 }
    }
}

impl ContextConfig {
    pub fn new(frames: usize) -> Result<Self, ModelError> {
        let c = Self { frames };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.frames == 0 || self.frames.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "context length T={} must be odd and positive",
                self.frames
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.frames / 2
    }
}

/// One `T × bands` block and the label of its centre frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub center: usize,
    pub data: Vec<f32>,
    pub label: bool,
}

/// Copies the block centred on `center` into `out` (`T × bands`), repeating
/// the first or last frame past the clip edges.
pub fn fill_block(spec: &LogMelSpectrogram, center: usize, cfg: ContextConfig, out: &mut [f32]) {
    let bands = spec.bands();
    let last = spec.frames() - 1;
    let l = cfg.radius() as isize;
    for (r, row) in out.chunks_mut(bands).enumerate().take(cfg.frames) {
        let src = (center as isize + r as isize - l).clamp(0, last as isize) as usize;
        for (o, &v) in row.iter_mut().zip(spec.row(src)) {
            *o = v as f32;
        }
    }
}

pub fn make_blocks(
    spec: &LogMelSpectrogram,
    labels: &FrameLabelTrack,
    cfg: ContextConfig,
) -> Result<Vec<Block>, ModelError> {
    cfg.validate()?;
    if labels.len() != spec.frames() {
        return Err(ModelError::Misaligned {
            labels: labels.len(),
            frames: spec.frames(),
        });
    }
    let size = cfg.frames * spec.bands();
    Ok((0..spec.frames())
        .map(|t| {
            let mut data = vec![0.0; size];
            fill_block(spec, t, cfg, &mut data);
            Block {
                center: t,
                data,
                label: labels.get(t),
            }
        })
        .collect())
}
