use super::SynthError;
use crate::audio::AudioClip;
use crate::features::FrameGeometry;
use crate::labels::FrameLabelTrack;

/// Crossfade used when music has to be looped to cover the speech.
pub const LOOP_CROSSFADE_S: f64 = 0.010;

/// A speech + music mixture together with its scaled components, so the
/// realized SNR can be recomputed from the buffers.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixture: AudioClip,
    pub labels: FrameLabelTrack,
    /// Speech as it appears inside the mixture (after any peak rescale).
    pub speech: Vec<f32>,
    /// Scaled music as it appears inside the mixture.
    pub music: Vec<f32>,
    /// Music gain before any peak rescale.
    pub gain: f64,
    /// Samples that exceeded full scale before rescaling.
    pub clipped: usize,
    /// Factor applied to the whole mixture to bring its peak back to 1.
    pub rescale: f64,
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Sample mask covering every on-frame's window.
pub fn voiced_mask(n: usize, labels: &FrameLabelTrack, geom: FrameGeometry) -> Vec<bool> {
    let mut mask = vec![false; n];
    for t in (0..labels.len()).filter(|&t| labels.get(t)) {
        let span = geom.frame_span(t);
        mask[span.start..span.end.min(n)].iter_mut().for_each(|m| *m = true);
    }
    mask
}

pub fn voiced_rms(samples: &[f32], labels: &FrameLabelTrack, geom: FrameGeometry) -> f64 {
    let mask = voiced_mask(samples.len(), labels, geom);
    let (mut sum, mut count) = (0.0, 0usize);
    for (&s, _) in samples.iter().zip(&mask).filter(|(_, &m)| m) {
        sum += (s as f64) * (s as f64);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// SNR in dB between speech over on-frames and the music span.
pub fn measured_snr_db(speech: &[f32], music: &[f32], labels: &FrameLabelTrack, geom: FrameGeometry) -> f64 {
    20.0 * (voiced_rms(speech, labels, geom) / rms(music)).log10()
}

/// `n` samples of music starting at `offset`, looping with a short linear
/// crossfade whenever the source runs out.
pub fn music_span(music: &[f32], offset: usize, n: usize, sample_rate: u32) -> Vec<f32> {
    let mut out: Vec<f32> = music[offset..].iter().copied().take(n).collect();
    let fade = ((LOOP_CROSSFADE_S * sample_rate as f64).round() as usize).min(music.len() / 2);
    while out.len() < n {
        let len = out.len();
        let f = fade.min(len);
        for i in 0..f {
            let a = (i + 1) as f32 / (f + 1) as f32;
            let j = len - f + i;
            out[j] = out[j] * (1.0 - a) + music[i] * a;
        }
        out.extend(music[f..].iter().copied().take(n - len));
    }
    out
}

/// Adds music under speech at the requested SNR, measured against speech
/// energy over on-frames.
///
/// `offset` is where the music starts, in samples. A mixture whose peak
/// exceeds full scale is rescaled as a whole, which keeps the realized SNR.
pub fn mix_at_snr(
    speech: &AudioClip,
    music: &AudioClip,
    labels: &FrameLabelTrack,
    geom: FrameGeometry,
    snr_db: f64,
    offset: usize,
) -> Result<Mixture, SynthError> {
    if speech.sample_rate() != music.sample_rate() {
        return Err(SynthError::Config(format!(
            "speech at {} Hz, music at {} Hz",
            speech.sample_rate(),
            music.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(SynthError::Config(format!("snr_db {snr_db} is not finite")));
    }
    if offset >= music.len() {
        return Err(SynthError::Config(format!(
            "music offset {offset} beyond its {} samples",
            music.len()
        )));
    }
    labels
        .check_aligned(geom.frame_count(speech.len()))
        .map_err(|e| SynthError::Config(e.to_string()))?;
    let speech_rms = voiced_rms(speech.samples(), labels, geom);
    if labels.on_count() == 0 || speech_rms == 0.0 {
        return Err(SynthError::NoVoicedFrames);
    }
    let span = music_span(music.samples(), offset, speech.len(), music.sample_rate());
    let music_rms = rms(&span);
    if music_rms == 0.0 {
        return Err(SynthError::SilentMusic);
    }
    let gain = speech_rms / music_rms * 10f64.powf(-snr_db / 20.0);
    let mut music_scaled: Vec<f32> = span.iter().map(|&m| (m as f64 * gain) as f32).collect();
    let mut speech_part = speech.samples().to_vec();
    let mut mixed: Vec<f32> = speech_part.iter().zip(&music_scaled).map(|(&s, &m)| s + m).collect();
    let clipped = mixed.iter().filter(|v| v.abs() > 1.0).count();
    let peak = mixed.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    let rescale = if peak > 1.0 { 1.0 / peak as f64 } else { 1.0 };
    if peak > 1.0 {
        for buf in [&mut mixed, &mut speech_part, &mut music_scaled] {
            buf.iter_mut().for_each(|v| *v = (*v as f64 * rescale) as f32);
        }
    }
    let mixture = AudioClip::new(mixed, speech.sample_rate()).map_err(SynthError::Audio)?;
    Ok(Mixture {
        mixture,
        labels: labels.clone(),
        speech: speech_part,
        music: music_scaled,
        gain,
        clipped,
        rescale,
    })
}
