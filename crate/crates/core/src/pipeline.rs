//! End-to-end runs over a work directory, driven by one TOML configuration.
//!
//! Each step writes into its own subdirectory and brackets its work with
//! `.running` / `.done` marker files, so a later step can tell a missing
//! input from one left behind by an interrupted run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_split, DataError, LabeledClip};
use crate::eval::musdb::musdb_manifest;
use crate::eval::{write_timeline, EvalError, EvalReport};
use crate::features::StftConfig;
use crate::models::{Arch, LayerId, Model, ModelConfig, ModelError};
use crate::nn::checkpoint::{opt_path, save_adam};
use crate::nn::NnError;
use crate::synth::toy::{write_toy_corpus, ToyConfig};
use crate::synth::{
    build_manifest, index_labeled_corpus, DatasetManifest, Split, SplitPolicy, SynthError, SynthOptions, Task,
    VadConfig,
};
use crate::train::{
    evaluate, train_source, train_target, LayerSelector, RunRecord, TrainConfig, TrainError, TrainOutcome,
    TransferMode, TransferPlan,
};
use crate::viz::{export_features, filter_pattern, save_pattern, write_features, FilterPatternJob, StepRule, VizError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("missing {what}: {} (run `vocalis {step}` first)", path.display())]
    MissingArtifact { what: String, path: PathBuf, step: &'static str },
    #[error("step `{step}` did not finish: found {} without .done; rerun `vocalis {step}`", marker.display())]
    Incomplete { step: &'static str, marker: PathBuf },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(key: &str, msg: impl ToString) -> PipelineError {
    PipelineError::Config {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Clean speech WAVs. Defaults to the toy corpus under the work dir.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speech_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub music_dir: Option<PathBuf>,
    /// Labeled songs: `<name>.wav` with a sibling `<name>.csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("work"),
            speech_dir: None,
            music_dir: None,
            target_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub snr_db: f64,
    pub splits: SplitPolicy,
    pub vad: VadConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            snr_db: 0.0,
            splits: SplitPolicy::default(),
            vad: VadConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub splits: SplitPolicy,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self {
            splits: SplitPolicy::Directories,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub source: TrainConfig,
    pub target: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            source: TrainConfig {
                batch_size: 32,
                max_epochs: 20,
                blocks_per_clip: Some(8),
                ..TrainConfig::default()
            },
            target: TrainConfig {
                batch_size: 32,
                max_epochs: 20,
                blocks_per_clip: Some(32),
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    /// Off trains the target model from scratch.
    pub enabled: bool,
    pub layers: Vec<LayerSelector>,
    pub mode: TransferMode,
}

impl Default for TransferSection {
    fn default() -> Self {
        let p = TransferPlan::default();
        Self {
            enabled: true,
            layers: p.layers,
            mode: p.mode,
        }
    }
}

impl TransferSection {
    pub fn plan(&self) -> Option<TransferPlan> {
        self.enabled.then(|| TransferPlan {
            layers: self.layers.clone(),
            mode: self.mode,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSection {
    pub layer: LayerId,
    pub filters: Vec<usize>,
    pub steps: usize,
    pub eta: f64,
    pub step_rule: StepRule,
    pub export_layer: LayerId,
    pub export_samples: usize,
}

impl Default for VizSection {
    fn default() -> Self {
        Self {
            layer: LayerId(0),
            filters: vec![0],
            steps: 200,
            eta: 0.1,
            step_rule: StepRule::Normalized,
            export_layer: LayerId(2),
            export_samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Context lengths `T` to try.
    pub frames: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            frames: vec![5, 15, 25, 35, 45],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every step: corpus generation, splits, mixing, initialization,
    /// block sampling, dropout and visualization noise.
    pub seed: u64,
    pub paths: Paths,
    pub toy: ToyConfig,
    pub synth: SynthSection,
    pub target: TargetSection,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub transfer: TransferSection,
    pub viz: VizSection,
    pub sweep: SweepSection,
}

/// Sets `key.path = value` in a TOML table. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), PipelineError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| PipelineError::Parse(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Parse(format!("bad override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides in order, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, PipelineError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Parse(e.to_string()))?;
        // Missing keys take the pipeline defaults, which differ from some
        // section types' own defaults.
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize");
        merge(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| PipelineError::Parse(e.to_string()))?;
        let cfg: Self = toml::from_str(&merged).map_err(|e| PipelineError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate().map_err(|e| config_err("model", e))?;
        if self.stft.mel_bands != self.model.mel_bands {
            return Err(config_err(
                "model.mel_bands",
                format!("{} differs from stft.mel_bands {}", self.model.mel_bands, self.stft.mel_bands),
            ));
        }
        self.stft.validate().map_err(|e| config_err("stft", e))?;
        let vad = &self.synth.vad;
        if vad.frame_ms != self.stft.window_ms || vad.hop_fraction != self.stft.hop_fraction {
            return Err(config_err(
                "synth.vad",
                "frame_ms and hop_fraction must equal stft.window_ms and stft.hop_fraction so labels align with frames",
            ));
        }
        if !self.synth.snr_db.is_finite() {
            return Err(config_err("synth.snr_db", "must be finite"));
        }
        self.train.source.validate().map_err(|e| config_err("train.source", e))?;
        self.train.target.validate().map_err(|e| config_err("train.target", e))?;
        if let Some(p) = self.transfer.plan() {
            p.validate().map_err(|e| config_err("transfer", e))?;
        }
        let v = &self.viz;
        if !(v.eta > 0.0 && v.eta.is_finite()) {
            return Err(config_err("viz.eta", "must be positive"));
        }
        if v.steps == 0 {
            return Err(config_err("viz.steps", "must be at least 1"));
        }
        let ch = self.model.channels[v.layer.0];
        if let Some(f) = v.filters.iter().find(|&&f| f >= ch) {
            return Err(config_err("viz.filters", format!("filter {f} out of range, {} has {ch}", v.layer)));
        }
        if v.export_samples == 0 {
            return Err(config_err("viz.export_samples", "must be positive"));
        }
        if self.sweep.frames.is_empty() || self.sweep.frames.iter().any(|t| t % 2 == 0) {
            return Err(config_err("sweep.frames", "needs at least one length, all odd"));
        }
        Ok(())
    }

    pub fn speech_dir(&self) -> PathBuf {
        self.paths.speech_dir.clone().unwrap_or_else(|| self.paths.work_dir.join("toy/speech"))
    }

    pub fn music_dir(&self) -> PathBuf {
        self.paths.music_dir.clone().unwrap_or_else(|| self.paths.work_dir.join("toy/music"))
    }

    pub fn target_dir(&self) -> PathBuf {
        self.paths.target_dir.clone().unwrap_or_else(|| self.paths.work_dir.join("toy/songs"))
    }

    /// True when any corpus path falls back to the generated toy corpus.
    pub fn uses_toy(&self) -> bool {
        self.paths.speech_dir.is_none() || self.paths.music_dir.is_none() || self.paths.target_dir.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Toy,
    Synth,
    Features,
    TrainSource,
    TrainTarget,
    Eval,
    Viz,
    ExportFeatures,
    SweepT,
}

impl Step {
    pub const ALL: [Step; 9] = [
        Step::Toy,
        Step::Synth,
        Step::Features,
        Step::TrainSource,
        Step::TrainTarget,
        Step::Eval,
        Step::Viz,
        Step::ExportFeatures,
        Step::SweepT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Toy => "toy",
            Step::Synth => "synth",
            Step::Features => "features",
            Step::TrainSource => "train-source",
            Step::TrainTarget => "train-target",
            Step::Eval => "eval",
            Step::Viz => "viz",
            Step::ExportFeatures => "export-features",
            Step::SweepT => "sweep-t",
        }
    }

    /// Output directory under the work dir.
    pub fn dir(self) -> &'static str {
        match self {
            Step::Toy => "toy",
            Step::Synth => "synth",
            Step::Features => "features",
            Step::TrainSource => "source",
            Step::TrainTarget => "target",
            Step::Eval => "eval",
            Step::Viz => "viz",
            Step::ExportFeatures => "features_export",
            Step::SweepT => "sweep",
        }
    }
}

pub const CHECKPOINT: &str = "model.vckp";
pub const SOURCE_MANIFEST: &str = "synth/manifest.jsonl";
pub const TARGET_MANIFEST: &str = "synth/target.jsonl";

/// Options of the `eval` step that may point outside the work dir.
#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Local MUSDB18 copy; truth comes from the `test` vocal stems.
    pub musdb: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub frames: usize,
    pub best_epoch: usize,
    pub validation_f: f64,
    pub test_f: f64,
    pub total_params: usize,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    /// `key=value` overrides applied on top of the file, kept for run records.
    pub overrides: Vec<String>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, overrides: Vec<String>) -> Self {
        Self { config, overrides }
    }

    pub fn work(&self) -> &Path {
        &self.config.paths.work_dir
    }

    fn step_dir(&self, step: Step) -> PathBuf {
        self.work().join(step.dir())
    }

    fn begin(&self, step: Step) -> Result<PathBuf, PipelineError> {
        let dir = self.step_dir(step);
        std::fs::create_dir_all(&dir)?;
        let done = dir.join(".done");
        if done.exists() {
            std::fs::remove_file(done)?;
        }
        std::fs::write(dir.join(".running"), format!("{}\n", step.name()))?;
        info!("{}: started", step.name());
        Ok(dir)
    }

    fn finish(&self, step: Step) -> Result<(), PipelineError> {
        let dir = self.step_dir(step);
        std::fs::write(dir.join(".done"), format!("{}\n", step.name()))?;
        std::fs::remove_file(dir.join(".running"))?;
        info!("{}: done", step.name());
        Ok(())
    }

    /// Fails unless `step` has completed in this work dir.
    pub fn require(&self, step: Step) -> Result<(), PipelineError> {
        let dir = self.step_dir(step);
        if dir.join(".done").is_file() {
            return Ok(());
        }
        let running = dir.join(".running");
        if running.is_file() {
            return Err(PipelineError::Incomplete {
                step: step.name(),
                marker: running,
            });
        }
        Err(PipelineError::MissingArtifact {
            what: format!("output of `{}`", step.name()),
            path: dir,
            step: step.name(),
        })
    }

    fn require_file(&self, path: &Path, what: &str, step: Step) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::MissingArtifact {
                what: what.to_string(),
                path: path.to_path_buf(),
                step: step.name(),
            })
        }
    }

    /// Every step except `sweep-t`, in order, generating the toy corpus
    /// first when a corpus path is unset.
    pub fn run_all(&self) -> Result<Vec<String>, PipelineError> {
        let mut out = Vec::new();
        if self.config.uses_toy() {
            out.push(self.toy()?);
        }
        out.push(self.synth()?);
        out.push(self.features()?);
        out.push(self.train_source()?);
        out.push(self.train_target()?);
        out.push(self.eval(&EvalArgs::default())?);
        out.push(self.viz(None)?);
        out.push(self.export_features(None)?);
        Ok(out)
    }

    pub fn toy(&self) -> Result<String, PipelineError> {
        let dir = self.begin(Step::Toy)?;
        let layout = write_toy_corpus(&dir, &self.config.toy, self.config.seed)?;
        self.finish(Step::Toy)?;
        Ok(format!(
            "toy corpus in {} (speech, music, songs)",
            layout.speech_dir.parent().unwrap_or(&dir).display()
        ))
    }

    fn require_corpus(&self) -> Result<(), PipelineError> {
        if self.config.uses_toy() {
            self.require(Step::Toy)?;
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<String, PipelineError> {
        self.require_corpus()?;
        let c = &self.config;
        let dir = self.begin(Step::Synth)?;
        let opts = SynthOptions {
            snr_db: c.synth.snr_db,
            splits: c.synth.splits.clone(),
            seed: c.seed,
            vad: c.synth.vad.clone(),
            stft: c.stft.clone(),
        };
        let source = build_manifest(&c.speech_dir(), &c.music_dir(), &dir, &opts)?;
        let target = index_labeled_corpus(&c.target_dir(), &c.target.splits, c.seed)?;
        target.save(&self.work().join(TARGET_MANIFEST))?;
        self.finish(Step::Synth)?;
        Ok(format!(
            "{} source mixtures at {} dB, {} target songs",
            source.entries.len(),
            c.synth.snr_db,
            target.entries.len()
        ))
    }

    fn manifest(&self, task: Task) -> Result<DatasetManifest, PipelineError> {
        let rel = match task {
            Task::Source => SOURCE_MANIFEST,
            Task::Target => TARGET_MANIFEST,
        };
        let path = self.work().join(rel);
        self.require_file(&path, &format!("{task} manifest"), Step::Synth)?;
        Ok(DatasetManifest::load(&path)?)
    }

    fn cache(&self) -> PathBuf {
        self.step_dir(Step::Features)
    }

    fn clips(&self, m: &DatasetManifest, task: Task, split: Split) -> Result<Vec<LabeledClip>, PipelineError> {
        Ok(load_split(m, task, split, &self.config.stft, Some(&self.cache()))?)
    }

    pub fn features(&self) -> Result<String, PipelineError> {
        self.require(Step::Synth)?;
        let manifests = [(Task::Source, self.manifest(Task::Source)?), (Task::Target, self.manifest(Task::Target)?)];
        self.begin(Step::Features)?;
        let (mut clips, mut frames) = (0, 0);
        for (task, m) in &manifests {
            for split in Split::ALL {
                if m.split(split).all(|e| e.task != *task) {
                    continue;
                }
                let loaded = self.clips(m, *task, split)?;
                clips += loaded.len();
                frames += loaded.iter().map(LabeledClip::frames).sum::<usize>();
            }
        }
        self.finish(Step::Features)?;
        Ok(format!("{clips} spectrograms ({frames} frames) cached"))
    }

    fn save_outcome(&self, dir: &Path, out: &mut TrainOutcome, test: &[LabeledClip]) -> Result<EvalReport, PipelineError> {
        let ckpt = dir.join(CHECKPOINT);
        out.model.save(&ckpt)?;
        save_adam(&opt_path(&ckpt), &out.optimizer)?;
        let rel = ckpt.strip_prefix(self.work()).unwrap_or(&ckpt);
        out.record.checkpoint = Some(rel.display().to_string());
        out.record.overrides = self.overrides.clone();
        std::fs::write(dir.join("run.json"), out.record.to_json())?;
        let (report, _) = evaluate(&out.model, test)?;
        report.save(&dir.join("test"))?;
        Ok(report)
    }

    fn source_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.config.seed,
            ..self.config.train.source.clone()
        }
    }

    pub fn train_source(&self) -> Result<String, PipelineError> {
        self.require(Step::Features)?;
        let m = self.manifest(Task::Source)?;
        let (train, val, test) = (
            self.clips(&m, Task::Source, Split::Train)?,
            self.clips(&m, Task::Source, Split::Validation)?,
            self.clips(&m, Task::Source, Split::Test)?,
        );
        let dir = self.begin(Step::TrainSource)?;
        let mut out = train_source(&train, &val, &self.config.model, &self.source_train_config())?;
        let report = self.save_outcome(&dir, &mut out, &test)?;
        self.finish(Step::TrainSource)?;
        Ok(summary("source", &out.record, &report))
    }

    fn load_checkpoint(&self, path: &Path, step: Step) -> Result<Model, PipelineError> {
        self.require_file(path, "checkpoint", step)?;
        Ok(Model::load(path, self.config.model.clone())?)
    }

    fn default_checkpoint(&self, step: Step) -> PathBuf {
        self.step_dir(step).join(CHECKPOINT)
    }

    pub fn train_target(&self) -> Result<String, PipelineError> {
        self.require(Step::Features)?;
        let plan = self.config.transfer.plan();
        let source = match plan {
            Some(_) => {
                self.require(Step::TrainSource)?;
                Some(self.load_checkpoint(&self.default_checkpoint(Step::TrainSource), Step::TrainSource)?)
            }
            None => None,
        };
        let m = self.manifest(Task::Target)?;
        let (train, val, test) = (
            self.clips(&m, Task::Target, Split::Train)?,
            self.clips(&m, Task::Target, Split::Validation)?,
            self.clips(&m, Task::Target, Split::Test)?,
        );
        let dir = self.begin(Step::TrainTarget)?;
        let cfg = TrainConfig {
            seed: self.config.seed,
            ..self.config.train.target.clone()
        };
        let mut out = train_target(&train, &val, &self.config.model, source.as_ref(), plan.as_ref(), &cfg)?;
        let report = self.save_outcome(&dir, &mut out, &test)?;
        self.finish(Step::TrainTarget)?;
        Ok(summary(&format!("target ({})", out.record.plan), &out.record, &report))
    }

    /// Scores a checkpoint on a test split. Defaults: the target checkpoint
    /// and, by the checkpoint's architecture, the matching manifest.
    pub fn eval(&self, args: &EvalArgs) -> Result<String, PipelineError> {
        let ckpt = args.checkpoint.clone().unwrap_or_else(|| self.default_checkpoint(Step::TrainTarget));
        let model = self.load_checkpoint(&ckpt, Step::TrainTarget)?;
        let task = match model.arch {
            Arch::Source => Task::Source,
            Arch::Target => Task::Target,
        };
        let out = args.out.clone().unwrap_or_else(|| self.step_dir(Step::Eval));
        let marked = args.out.is_none();
        let test = match (&args.manifest, &args.musdb) {
            (Some(_), Some(_)) => {
                return Err(PipelineError::Config {
                    key: "eval".into(),
                    msg: "give either a manifest or a MUSDB18 root, not both".into(),
                })
            }
            (Some(p), None) => {
                self.require_file(p, "manifest", Step::Synth)?;
                load_split(&DatasetManifest::load(p)?, task, Split::Test, &self.config.stft, None)?
            }
            (None, Some(root)) => {
                let m = musdb_manifest(root, "test", &out.join("musdb"), &self.config.stft, task)?;
                load_split(&m, task, Split::Test, &self.config.stft, None)?
            }
            (None, None) => self.clips(&self.manifest(task)?, task, Split::Test)?,
        };
        if marked {
            self.begin(Step::Eval)?;
        }
        let (report, preds) = evaluate(&model, &test)?;
        report.save(&out)?;
        let tl = out.join("timelines");
        std::fs::create_dir_all(&tl)?;
        for (clip, pred) in test.iter().zip(&preds) {
            let mut buf = Vec::new();
            write_timeline(&mut buf, &clip.labels, pred)?;
            std::fs::write(tl.join(format!("{}.csv", clip.id)), buf)?;
        }
        if marked {
            self.finish(Step::Eval)?;
        }
        let o = &report.overall;
        Ok(format!(
            "{} songs, overall P {:.3} R {:.3} F {:.3}; report in {}",
            report.rows.len(),
            o.precision,
            o.recall,
            o.f,
            out.display()
        ))
    }

    /// Filter patterns for every configured filter of `viz.layer`.
    pub fn viz(&self, checkpoint: Option<&Path>) -> Result<String, PipelineError> {
        let ckpt = checkpoint.map_or_else(|| self.default_checkpoint(Step::TrainSource), Path::to_path_buf);
        let model = self.load_checkpoint(&ckpt, Step::TrainSource)?;
        let v = &self.config.viz;
        let dir = self.begin(Step::Viz)?;
        let runs = v
            .filters
            .par_iter()
            .map(|&filter| {
                let job = FilterPatternJob {
                    eta: v.eta,
                    steps: v.steps,
                    seed: self.config.seed,
                    step_rule: v.step_rule,
                    ..FilterPatternJob::new(v.layer, filter, self.config.model.context_frames, self.config.model.mel_bands)
                };
                let run = filter_pattern(&model, &job)?;
                save_pattern(&dir, &format!("{}_f{filter}", v.layer.prefix()), &job, &run)?;
                Ok((filter, run))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        self.finish(Step::Viz)?;
        let mut s = String::new();
        for (filter, run) in runs {
            let _ = write!(
                s,
                "{} filter {filter}: activation {:.4} -> {:.4} at eta {}; ",
                v.layer,
                run.trace[0],
                run.trace[run.trace.len() - 1],
                run.eta
            );
        }
        Ok(s.trim_end_matches("; ").to_string())
    }

    /// Hidden features of sampled test blocks from both tasks.
    pub fn export_features(&self, checkpoint: Option<&Path>) -> Result<String, PipelineError> {
        let ckpt = checkpoint.map_or_else(|| self.default_checkpoint(Step::TrainSource), Path::to_path_buf);
        let model = self.load_checkpoint(&ckpt, Step::TrainSource)?;
        let mut clips = self.clips(&self.manifest(Task::Source)?, Task::Source, Split::Test)?;
        clips.extend(self.clips(&self.manifest(Task::Target)?, Task::Target, Split::Test)?);
        let v = &self.config.viz;
        let dir = self.begin(Step::ExportFeatures)?;
        let rows = export_features(&model, &clips, v.export_layer, v.export_samples, self.config.seed)?;
        let path = dir.join(format!("{}.csv", v.export_layer.prefix()));
        let mut buf = Vec::new();
        write_features(&mut buf, &rows)?;
        std::fs::write(&path, buf)?;
        self.finish(Step::ExportFeatures)?;
        Ok(format!(
            "{} rows of width {} in {}",
            rows.len(),
            rows.first().map_or(0, |r| r.values.len()),
            path.display()
        ))
    }

    /// Retrains the source model for each context length in `sweep.frames`.
    pub fn sweep_t(&self) -> Result<String, PipelineError> {
        self.require(Step::Features)?;
        let m = self.manifest(Task::Source)?;
        let (train, val, test) = (
            self.clips(&m, Task::Source, Split::Train)?,
            self.clips(&m, Task::Source, Split::Validation)?,
            self.clips(&m, Task::Source, Split::Test)?,
        );
        let dir = self.begin(Step::SweepT)?;
        let mut rows = Vec::new();
        for &frames in &self.config.sweep.frames {
            let model_cfg = ModelConfig {
                context_frames: frames,
                ..self.config.model.clone()
            };
            let mut out = train_source(&train, &val, &model_cfg, &self.source_train_config())?;
            let sub = dir.join(format!("t{frames:02}"));
            let report = self.save_outcome(&sub, &mut out, &test)?;
            info!("sweep-t: T={frames} test F {:.4}", report.overall.f);
            rows.push(SweepRow {
                frames,
                best_epoch: out.record.best_epoch,
                validation_f: out.record.best_validation.f,
                test_f: report.overall.f,
                total_params: out.record.total_params,
            });
        }
        let mut w = csv::Writer::from_path(dir.join("f_vs_t.csv")).map_err(EvalError::from)?;
        for r in &rows {
            w.serialize(r).map_err(EvalError::from)?;
        }
        w.flush()?;
        let text = sweep_table(&rows);
        std::fs::write(dir.join("f_vs_t.txt"), &text)?;
        self.finish(Step::SweepT)?;
        Ok(text)
    }
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>3}  {:>10}  {:>7}  {:>7}  {:>7}\n", "T", "best epoch", "val F", "test F", "params");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>3}  {:>10}  {:>7.4}  {:>7.4}  {:>7}",
            r.frames, r.best_epoch, r.validation_f, r.test_f, r.total_params
        );
    }
    s
}

fn summary(what: &str, r: &RunRecord, test: &EvalReport) -> String {
    format!(
        "{what}: {} epochs, best {} with validation F {:.4}; test F {:.4}; {} of {} parameters trainable",
        r.epochs.len(),
        r.best_epoch,
        r.best_validation.f,
        test.overall.f,
        r.trainable_params,
        r.total_params
    )
}
