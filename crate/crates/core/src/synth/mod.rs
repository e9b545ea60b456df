//! Source-task corpus construction: endpoint detection on clean speech,
//! mixing with music at a fixed SNR, manifests, and a toy corpus generator.

mod manifest;
mod mix;
pub mod toy;
mod vad;

pub use manifest::{
    assign_splits, build_manifest, group_of, index_labeled_corpus, DatasetManifest, ManifestEntry, Split,
    SplitPolicy, SynthOptions, Task,
};
pub use mix::{measured_snr_db, mix_at_snr, music_span, rms, voiced_mask, voiced_rms, Mixture, LOOP_CROSSFADE_S};
pub use vad::{detect_endpoints, frame_energies_db, VadConfig};

use thiserror::Error;

use crate::audio::AudioError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("clip of {samples} samples is shorter than one {frame}-sample frame")]
    TooShort { samples: usize, frame: usize },
    #[error("label track has no on-frames, speech level is undefined")]
    NoVoicedFrames,
    #[error("music has zero energy over the mixed span")]
    SilentMusic,
    #[error("empty corpus: no WAV files in {0}")]
    EmptyCorpus(String),
    #[error("duplicate output id {0}")]
    DuplicateId(String),
    #[error("split leakage: group {group} appears in both {a} and {b}")]
    SplitLeakage { group: String, a: Split, b: Split },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{id}: {source}")]
    Clip {
        id: String,
        #[source]
        source: Box<SynthError>,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SynthError {
    pub(crate) fn context(self, id: &str) -> Self {
        SynthError::Clip {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}
