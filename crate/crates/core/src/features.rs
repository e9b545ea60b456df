//! Log-mel spectrogram front end and its `VLMS` cache container.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip of {samples} samples is shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid STFT configuration: {0}")]
    Config(String),
    #[error("spectrogram container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    #[default]
    Hamming,
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_fraction: f64,
    pub window_kind: WindowKind,
    pub mel_bands: usize,
    /// Floor applied to mel power before the logarithm.
    pub log_floor: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 40.0,
            hop_fraction: 0.5,
            window_kind: WindowKind::Hamming,
            mel_bands: 64,
            log_floor: 1e-10,
        }
    }
}

/// Window and hop in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeometry {
    pub window: usize,
    pub hop: usize,
}

impl FrameGeometry {
    /// `floor((n - window) / hop) + 1`, or 0 when the clip is shorter than a window.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            (num_samples - self.window) / self.hop + 1
        }
    }

    pub fn frame_span(&self, frame: usize) -> std::ops::Range<usize> {
        let start = frame * self.hop;
        start..start + self.window
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.window_ms > 0.0) {
            return Err(FeatureError::Config("window_ms must be positive".into()));
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction <= 1.0) {
            return Err(FeatureError::Config("hop_fraction must be in (0, 1]".into()));
        }
        if self.mel_bands == 0 {
            return Err(FeatureError::Config("mel_bands must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(FeatureError::Config("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self, sample_rate: u32) -> FrameGeometry {
        let window = (self.window_ms / 1000.0 * sample_rate as f64).round() as usize;
        let hop = ((window as f64 * self.hop_fraction).round() as usize).max(1);
        FrameGeometry { window, hop }
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.geometry(sample_rate).window.next_power_of_two()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, unit peak.
///
/// Band edges are spaced evenly in mel from 0 Hz to one FFT bin past
/// Nyquist, so the Nyquist bin itself still carries weight.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    bands: usize,
    bins: usize,
    /// `bands × bins`, row-major.
    weights: Vec<f64>,
    edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, fft_size: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let top = sample_rate as f64 / 2.0 + bin_hz;
        let mel_top = hz_to_mel(top);
        let edges_hz: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_top * i as f64 / (bands + 1) as f64))
            .collect();
        let mut weights = vec![0.0; bands * bins];
        for m in 0..bands {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        Self {
            bands,
            bins,
            weights,
            edges_hz,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn band(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    /// Centre frequency of band `m` in Hz.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.band(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// `frames × bands` matrix of log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    values: Vec<f64>,
    frames: usize,
    bands: usize,
    pub frame_period_s: f64,
    pub source_id: String,
}

impl LogMelSpectrogram {
    pub fn from_values(
        values: Vec<f64>,
        frames: usize,
        bands: usize,
        frame_period_s: f64,
        source_id: impl Into<String>,
    ) -> Result<Self, FeatureError> {
        if values.len() != frames * bands || bands == 0 {
            return Err(FeatureError::Format(format!(
                "{} values for {frames}x{bands}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            frames,
            bands,
            frame_period_s,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.bands..(t + 1) * self.bands]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.bands + m]
    }
}

/// Precomputed window, filterbank and FFT plan for one sample rate.
pub struct LogMelExtractor {
    cfg: StftConfig,
    geom: FrameGeometry,
    sample_rate: u32,
    fft_size: usize,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(cfg: &StftConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let geom = cfg.geometry(sample_rate);
        if geom.window < 2 {
            return Err(FeatureError::Config(format!(
                "window of {} samples is too short",
                geom.window
            )));
        }
        let fft_size = geom.window.next_power_of_two();
        let n = geom.window;
        let window = (0..n)
            .map(|i| {
                let c = (2.0 * PI * i as f64 / (n - 1) as f64).cos();
                match cfg.window_kind {
                    WindowKind::Hamming => 0.54 - 0.46 * c,
                    WindowKind::Hann => 0.5 - 0.5 * c,
                }
            })
            .collect();
        let filterbank = MelFilterbank::new(cfg.mel_bands, fft_size, sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            geom,
            sample_rate,
            fft_size,
            window,
            filterbank,
            fft,
        })
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geom
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    pub fn compute(&self, clip: &AudioClip, source_id: &str) -> Result<LogMelSpectrogram, FeatureError> {
        if clip.sample_rate() != self.sample_rate {
            return Err(FeatureError::Config(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.sample_rate,
                clip.sample_rate()
            )));
        }
        let samples = clip.samples();
        let frames = self.geom.frame_count(samples.len());
        if frames == 0 {
            return Err(FeatureError::TooShort {
                samples: samples.len(),
                window: self.geom.window,
            });
        }
        let bands = self.cfg.mel_bands;
        let bins = self.fft_size / 2 + 1;
        let floor = self.cfg.log_floor;
        let mut values = vec![0.0; frames * bands];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        for t in 0..frames {
            let span = self.geom.frame_span(t);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.geom.window {
                    Complex::new(samples[span.start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut values[t * bands..(t + 1) * bands];
            self.filterbank.apply(&power, row);
            for v in row.iter_mut() {
                *v = v.max(floor).ln();
            }
        }
        LogMelSpectrogram::from_values(
            values,
            frames,
            bands,
            self.geom.hop as f64 / self.sample_rate as f64,
            source_id,
        )
    }
}

/// Computes the log-mel spectrogram of a clip:
/// `entry(t, m) = ln(max(mel_m · |STFT_t|², log_floor))`.
pub fn log_mel(clip: &AudioClip, cfg: &StftConfig) -> Result<LogMelSpectrogram, FeatureError> {
    LogMelExtractor::new(cfg, clip.sample_rate())?.compute(clip, "")
}

pub const VLMS_MAGIC: &[u8; 4] = b"VLMS";
pub const VLMS_VERSION: u16 = 1;

/// `"VLMS"`, u16 version, u32 frames, u32 bands, then row-major f32 LE.
pub fn encode_vlms(spec: &LogMelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + spec.values.len() * 4);
    out.extend_from_slice(VLMS_MAGIC);
    out.extend_from_slice(&VLMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.frames as u32).to_le_bytes());
    out.extend_from_slice(&(spec.bands as u32).to_le_bytes());
    for &v in &spec.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_vlms(bytes: &[u8], frame_period_s: f64, source_id: &str) -> Result<LogMelSpectrogram, FeatureError> {
    let bad = |m: &str| FeatureError::Format(m.to_string());
    if bytes.len() < 14 || &bytes[..4] != VLMS_MAGIC {
        return Err(bad("not a VLMS container"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VLMS_VERSION {
        return Err(FeatureError::Format(format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    if body.len() != frames * bands * 4 {
        return Err(bad("payload length does not match header"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    LogMelSpectrogram::from_values(values, frames, bands, frame_period_s, source_id)
}

pub fn write_vlms(path: &Path, spec: &LogMelSpectrogram) -> Result<(), FeatureError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_vlms(spec))?;
    Ok(())
}

pub fn read_vlms(path: &Path, frame_period_s: f64, source_id: &str) -> Result<LogMelSpectrogram, FeatureError> {
    decode_vlms(&std::fs::read(path)?, frame_period_s, source_id)
}
