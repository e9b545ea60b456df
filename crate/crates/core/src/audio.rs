//! Audio ingestion: WAV decoding, channel folding, resampling.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

/// Sample rate every clip is brought to before analysis.
pub const PIPELINE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unreadable audio file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("unsupported encoding in {path}: {detail}")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("zero-length audio: {0}")]
    ZeroLength(String),
    #[error("invalid clip: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Validates that the clip is nonempty, finite and within `[-1, 1]`.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::ZeroLength("clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::Invalid("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(AudioError::Invalid(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a clip from arbitrary finite samples, peak-normalizing only if
    /// some `|sample| > 1`.
    pub fn normalized(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::Invalid("non-finite sample".into()));
        }
        let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            samples.iter_mut().for_each(|s| *s /= peak);
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }
}

/// Decodes a 16-bit integer or 32-bit float PCM WAV, averages channels and
/// resamples to `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip, AudioError> {
    let p = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Unreadable {
            path: p.clone(),
            reason: io.to_string(),
        },
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: p.clone(),
            detail: "format not supported by the decoder".into(),
        },
        other => AudioError::Unreadable {
            path: p.clone(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedEncoding {
            path: p,
            detail: format!("{channels} channels (mono or stereo only)"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<_, _>>(),
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: p,
                detail: format!("{bits}-bit {fmt:?} (expected 16-bit int or 32-bit float)"),
            })
        }
    }
    .map_err(|e| AudioError::Unreadable {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    if interleaved.len() < channels {
        return Err(AudioError::ZeroLength(p));
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|fr| fr.iter().sum::<f32>() / channels as f32)
        .collect();
    let resampled = resample(&mono, spec.sample_rate, target_rate);
    AudioClip::normalized(resampled, target_rate)
}

/// Writes a mono 32-bit float WAV.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let err = |e: hound::Error| AudioError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| err(e.into()))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(err)?;
    }
    w.finalize().map_err(err)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zero crossings of the sinc kernel on each side, at the output cutoff.
const SINC_ZEROS: f64 = 24.0;
/// Cutoff as a fraction of the lower Nyquist rate.
const ROLLOFF: f64 = 0.94;

/// Windowed-sinc polyphase resampler (Blackman window). Output length is
/// `round(len · to / from)`.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let up = to as u64 / g;
    let down = from as u64 / g;
    // cutoff in cycles per input sample, relative to input Nyquist
    let cutoff = ROLLOFF * (to as f64 / from as f64).min(1.0);
    let half = (SINC_ZEROS / cutoff).ceil() as i64;
    let taps = (2 * half) as usize;
    // one filter per output phase
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            (0..taps)
                .map(|k| {
                    let j = k as i64 - half + 1;
                    let t = j as f64 - frac;
                    let x = cutoff * t;
                    let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                    let wpos = (t + half as f64) / (2.0 * half as f64);
                    let win = if (0.0..=1.0).contains(&wpos) {
                        0.42 - 0.5 * (2.0 * PI * wpos).cos() + 0.08 * (4.0 * PI * wpos).cos()
                    } else {
                        0.0
                    };
                    cutoff * sinc * win
                })
                .collect()
        })
        .collect();
    let out_len = ((input.len() as u64 * up) as f64 / down as f64).round() as usize;
    let n = input.len() as i64;
    (0..out_len as u64)
        .map(|i| {
            let pos = i * down;
            let base = (pos / up) as i64;
            let h = &phases[(pos % up) as usize];
            let mut acc = 0.0;
            for (k, &c) in h.iter().enumerate() {
                let idx = base + k as i64 - half + 1;
                if (0..n).contains(&idx) {
                    acc += c * input[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect()
}
