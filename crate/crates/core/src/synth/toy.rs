//! Built-in toy corpora so the whole pipeline runs without external data.
//!
//! Source side: harmonic "speech" bursts over silence, and "music" made of
//! band-limited noise below 400 Hz. Target side: vibrato "singing" over
//! low harmonic accompaniment, with frame labels taken from the vocal stem.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{detect_endpoints, SynthError, VadConfig};
use crate::audio::{write_wav, AudioClip, PIPELINE_RATE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub speakers: usize,
    pub clips_per_speaker: usize,
    pub clip_s: f64,
    pub music_clips: usize,
    pub music_s: f64,
    pub singers: usize,
    pub songs_per_singer: usize,
    pub song_s: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            speakers: 20,
            clips_per_speaker: 10,
            clip_s: 1.5,
            music_clips: 8,
            music_s: 4.0,
            singers: 10,
            songs_per_singer: 2,
            song_s: 3.0,
        }
    }
}

/// Where [`write_toy_corpus`] put things.
#[derive(Clone, Debug)]
pub struct ToyLayout {
    pub speech_dir: PathBuf,
    pub music_dir: PathBuf,
    /// Songs in `train/`, `validation/`, `test/` with sibling label CSVs.
    pub songs_dir: PathBuf,
}

const SR: f64 = PIPELINE_RATE as f64;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Raised-cosine gate: 1 inside `[start, end)`, 10 ms ramps at each edge.
fn gate(i: usize, start: usize, end: usize) -> f64 {
    let ramp = 160usize;
    if i < start || i >= end {
        return 0.0;
    }
    let d = (i - start).min(end - 1 - i);
    if d >= ramp {
        1.0
    } else {
        0.5 - 0.5 * (PI * d as f64 / ramp as f64).cos()
    }
}

/// Alternating silence/voiced segments; returns sample ranges of the voiced parts.
fn segments(rng: &mut ChaCha8Rng, n: usize, voiced: (f64, f64), gap: (f64, f64)) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = (rng.gen_range(gap.0..gap.1) * SR) as usize;
    while pos < n {
        let len = (rng.gen_range(voiced.0..voiced.1) * SR) as usize;
        let end = (pos + len).min(n);
        if end - pos > 800 {
            out.push((pos, end));
        }
        pos = end + (rng.gen_range(gap.0..gap.1) * SR) as usize;
    }
    out
}

fn harmonic(rng: &mut ChaCha8Rng, out: &mut [f64], span: (usize, usize), f0: f64, vibrato: f64, harmonics: usize, tilt: f64, amp: f64) {
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let vib_rate = rng.gen_range(4.5..6.0);
    let mut phase = 0.0;
    for i in span.0..span.1 {
        let t = (i - span.0) as f64 / SR;
        let f = f0 * (1.0 + vibrato * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f / SR;
        let g = gate(i, span.0, span.1);
        let mut s = 0.0;
        for (k, ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            if h * f < SR / 2.0 - 200.0 {
                s += (h * phase + ph).sin() / h.powf(tilt);
            }
        }
        out[i] += amp * g * s;
    }
}

/// Clean toy speech: harmonic bursts, f0 in 300–500 Hz, over digital silence.
pub fn toy_speech(seed: u64, stream: u64, seconds: f64) -> AudioClip {
    let mut rng = rng_for(seed, stream);
    let n = (seconds * SR) as usize;
    let mut x = vec![0.0; n];
    let f0_base = rng.gen_range(300.0..500.0);
    for span in segments(&mut rng, n, (0.2, 0.6), (0.1, 0.35)) {
        let f0 = f0_base * rng.gen_range(0.9..1.1);
        let amp = rng.gen_range(0.15..0.3);
        harmonic(&mut rng, &mut x, span, f0, 0.01, 10, 1.0, amp);
    }
    to_clip(x)
}

/// Band-limited noise between 50 and 400 Hz with a slow swell.
pub fn toy_music(seed: u64, stream: u64, seconds: f64) -> AudioClip {
    let mut rng = rng_for(seed, stream);
    let n = (seconds * SR) as usize;
    let comps: Vec<(f64, f64, f64)> = (0..120)
        .map(|_| (rng.gen_range(50.0..400.0), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.2..1.0)))
        .collect();
    let swell = rng.gen_range(0.2..0.8);
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / SR;
            let s: f64 = comps.iter().map(|&(f, p, a)| a * (2.0 * PI * f * t + p).sin()).sum();
            0.02 * s * (1.0 + 0.3 * (2.0 * PI * swell * t).sin())
        })
        .collect();
    to_clip(x)
}

/// Labels for songs come from the vocal stem: 30 dB below its loud frames,
/// no hangover, and nothing quieter than -50 dBFS.
pub fn vocal_stem_vad() -> VadConfig {
    VadConfig {
        energy_threshold_db: 30.0,
        hangover_frames: 0,
        abs_floor_db: -50.0,
        ..VadConfig::default()
    }
}

/// A toy song: vibrato voice in 250–600 Hz over a low chord and a pulse.
/// Returns `(mixture, vocal stem)`.
pub fn toy_song(seed: u64, stream: u64, seconds: f64) -> (AudioClip, AudioClip) {
    let mut rng = rng_for(seed, stream);
    let n = (seconds * SR) as usize;
    let mut voice = vec![0.0; n];
    let f0_base = rng.gen_range(250.0..600.0);
    for span in segments(&mut rng, n, (0.3, 0.9), (0.15, 0.5)) {
        let f0 = f0_base * rng.gen_range(0.85..1.2);
        let amp = rng.gen_range(0.2..0.35);
        harmonic(&mut rng, &mut voice, span, f0, 0.03, 12, 1.3, amp);
    }
    let mut acc = vec![0.0; n];
    let root = rng.gen_range(80.0..160.0);
    for ratio in [1.0, 1.25, 1.5] {
        harmonic(&mut rng, &mut acc, (0, n), root * ratio, 0.0, 3, 1.0, 0.08);
    }
    let beat = (rng.gen_range(0.4..0.6) * SR) as usize;
    for (i, a) in acc.iter_mut().enumerate() {
        let k = i % beat;
        *a += 0.2 * (-(k as f64) / 800.0).exp() * (2.0 * PI * 60.0 * k as f64 / SR).sin();
    }
    let mix: Vec<f64> = voice.iter().zip(&acc).map(|(v, a)| v + a).collect();
    (to_clip(mix), to_clip(voice))
}

fn to_clip(x: Vec<f64>) -> AudioClip {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.95 { 0.95 / peak } else { 1.0 };
    AudioClip::new(x.iter().map(|v| (v * scale) as f32).collect(), PIPELINE_RATE)
        .expect("toy audio is finite and non-empty")
}

/// Writes speech, music and labeled songs under `root`.
pub fn write_toy_corpus(root: &Path, cfg: &ToyConfig, seed: u64) -> Result<ToyLayout, SynthError> {
    let layout = ToyLayout {
        speech_dir: root.join("speech"),
        music_dir: root.join("music"),
        songs_dir: root.join("songs"),
    };
    for d in [&layout.speech_dir, &layout.music_dir] {
        std::fs::create_dir_all(d)?;
    }
    let speech: Vec<(usize, usize)> = (0..cfg.speakers)
        .flat_map(|s| (0..cfg.clips_per_speaker).map(move |c| (s, c)))
        .collect();
    speech.par_iter().enumerate().try_for_each(|(i, &(s, c))| {
        let clip = toy_speech(seed, 1_000_000 + i as u64, cfg.clip_s);
        write_wav(&layout.speech_dir.join(format!("spk{s:02}_{c:03}.wav")), &clip)
    })?;
    (0..cfg.music_clips).into_par_iter().try_for_each(|m| {
        let clip = toy_music(seed, 2_000_000 + m as u64, cfg.music_s);
        write_wav(&layout.music_dir.join(format!("music{m:02}.wav")), &clip)
    })?;
    let vad = vocal_stem_vad();
    let n_test = (cfg.singers as f64 * 0.2).round() as usize;
    let n_val = (cfg.singers as f64 * 0.2).round() as usize;
    let songs: Vec<(usize, usize)> = (0..cfg.singers)
        .flat_map(|s| (0..cfg.songs_per_singer).map(move |k| (s, k)))
        .collect();
    songs.par_iter().enumerate().try_for_each(|(i, &(s, k))| -> Result<(), SynthError> {
        let split = if s < n_test {
            "test"
        } else if s < n_test + n_val {
            "validation"
        } else {
            "train"
        };
        let dir = layout.songs_dir.join(split);
        let (mix, voice) = toy_song(seed, 3_000_000 + i as u64, cfg.song_s);
        let labels = detect_endpoints(&voice, &vad)?;
        let name = format!("singer{s:02}_{k:02}");
        write_wav(&dir.join(format!("{name}.wav")), &mix)?;
        labels
            .save(&dir.join(format!("{name}.csv")))
            .map_err(|e| SynthError::Manifest(e.to_string()))
    })?;
    Ok(layout)
}
