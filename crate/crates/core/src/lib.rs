//! Frame-level singing-voice detection. A CNN learns speech-in-music
//! detection on synthetic mixtures; its gated convolution layers then seed a
//! convolutional-recurrent detector for singing voice.
//!
//! The modules follow the pipeline: [`audio`] and [`features`] turn WAVs
//! into log-mel spectrograms, [`synth`] builds the labeled source corpus,
//! [`nn`] and [`models`] define the networks, [`train`] fits and transfers,
//! [`eval`] scores, [`viz`] inspects, and [`pipeline`] runs it all over a
//! work directory.

pub mod audio;
pub mod data;
pub mod eval;
pub mod features;
pub mod labels;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod viz;

pub use audio::{load_audio, AudioClip, AudioError, PIPELINE_RATE};
pub use data::{LabeledClip, DataError};
pub use eval::{prf, score, ConfusionCounts, EvalError, EvalReport, Prf};
pub use features::{FeatureError, LogMelExtractor, LogMelSpectrogram, StftConfig};
pub use labels::{FrameLabelTrack, LabelError};
pub use models::{Arch, ContextConfig, LayerId, Model, ModelConfig, ModelError};
pub use nn::NnError;
pub use pipeline::{Pipeline, PipelineConfig, PipelineError, Step};
pub use synth::{DatasetManifest, ManifestEntry, Split, SynthError, SynthOptions, Task, VadConfig};
pub use train::{RunRecord, TrainConfig, TrainError, TransferMode, TransferPlan};
pub use viz::{FilterPatternJob, VizError};
