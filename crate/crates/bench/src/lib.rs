//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::nn::NdArray;
use vocalis_core::synth::toy::toy_speech;
use vocalis_core::{AudioClip, FrameLabelTrack, LogMelSpectrogram};

pub fn uniform(shape: &[usize], seed: u64) -> NdArray<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("length matches")
}

/// Ten seconds of toy speech.
pub fn speech_clip() -> AudioClip {
    toy_speech(1, 0, 10.0)
}

pub fn spectrogram(frames: usize, bands: usize, seed: u64) -> (LogMelSpectrogram, FrameLabelTrack) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..frames * bands).map(|_| rng.gen_range(-10.0..0.0)).collect();
    let spec = LogMelSpectrogram::from_values(values, frames, bands, 0.02, "bench").expect("valid extents");
    let labels = (0..frames).map(|t| t % 7 < 4).collect();
    (spec, labels)
}
