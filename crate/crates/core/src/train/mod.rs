//! Training loops for the source and target models, layer transfer, and
//! early stopping on validation F-score.

mod transfer;

pub use transfer::{apply_transfer, plan_tag, LayerSelector, TransferMode, TransferPlan, NO_TRANSFER};

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{band_stats, LabeledClip};
use crate::eval::{prf, score, ConfusionCounts, EvalReport, Prf, SongRow};
use crate::labels::FrameLabelTrack;
use crate::models::{fill_block, forward, loss, update_running_stats, Arch, Model, ModelConfig, ModelError};
use crate::nn::{Adam, AdamConfig, NnError, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training performed: max_epochs is 0")]
    NoTraining,
    #[error("empty split: no {0} clips")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("transfer: {0}")]
    Transfer(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation F improvement before stopping.
    pub patience: usize,
    /// Set per run; [`RunRecord::seed`] records it.
    #[serde(skip)]
    pub seed: u64,
    /// Blocks drawn per training clip each epoch; all frames when unset.
    pub blocks_per_clip: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            blocks_per_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return Err(TrainError::NoTraining);
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.blocks_per_clip == Some(0) {
            return Err(TrainError::Config("blocks_per_clip must be positive when set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Prf,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arch: Arch,
    /// Transfer plan tag, `none` for runs without transfer.
    pub plan: String,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation: Prf,
    pub total_params: usize,
    pub trainable_params: usize,
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Command-line overrides applied on top of the configuration file.
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl RunRecord {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_s = 0.0);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run records serialize")
    }
}

/// A trained model together with its optimizer state and history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam<f32>,
    pub record: RunRecord,
}

const INFER_BATCH: usize = 128;

/// Frame decisions for a whole clip, one block per frame.
pub fn predict_clip(model: &Model, clip: &LabeledClip) -> Result<FrameLabelTrack, TrainError> {
    let ctx = model.config.context();
    let per = ctx.frames * clip.spec.bands();
    let frames = clip.frames();
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![0.0f32; INFER_BATCH * per];
    for start in (0..frames).step_by(INFER_BATCH) {
        let n = INFER_BATCH.min(frames - start);
        for i in 0..n {
            fill_block(&clip.spec, start + i, ctx, &mut buf[i * per..(i + 1) * per]);
        }
        out.extend(model.predict(&buf[..n * per], n)?);
    }
    Ok(out.into())
}

/// Scores every clip and builds the per-song report. Also returns the
/// predicted tracks in clip order.
pub fn evaluate(model: &Model, clips: &[LabeledClip]) -> Result<(EvalReport, Vec<FrameLabelTrack>), TrainError> {
    let preds: Vec<FrameLabelTrack> = clips
        .par_iter()
        .map(|c| predict_clip(model, c))
        .collect::<Result<_, _>>()?;
    let rows = clips
        .iter()
        .zip(&preds)
        .map(|(c, p)| Ok(SongRow::new(c.id.clone(), score(p, &c.labels).map_err(|e| TrainError::Config(e.to_string()))?)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    Ok((EvalReport::new(rows), preds))
}

/// One Adam step on a batch of blocks. Returns the batch's mean loss.
///
/// Non-finite values surface as [`TrainError::NonFiniteLoss`] with zero
/// epoch and batch indices; [`fit`] fills them in.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam<f32>,
    blocks: &[f32],
    targets: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let nonfinite = |e: NnError| match e {
        NnError::NonFinite(_) | NnError::NonFiniteGradient(_) => TrainError::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            detail: e.to_string(),
        },
        other => TrainError::Nn(other),
    };
    let x = model.prepare_input(blocks, targets.len())?;
    let mut tape = Tape::new();
    let xv = tape.input(x).map_err(nonfinite)?;
    let out = forward(&mut tape, model.arch, &model.config, &model.params, xv, Some(rng)).map_err(|e| match e {
        ModelError::Nn(n) => nonfinite(n),
        other => TrainError::Model(other),
    })?;
    let l = loss(&mut tape, &out, targets).map_err(nonfinite)?;
    let lv = tape.value(l).data()[0] as f64;
    model.params.zero_grads();
    tape.backward_into(l, &mut model.params).map_err(nonfinite)?;
    opt.step(&mut model.params).map_err(nonfinite)?;
    update_running_stats(&mut model.params, &out.bn_stats)?;
    Ok(lv)
}

fn pooled_prf(model: &Model, clips: &[LabeledClip]) -> Result<Prf, TrainError> {
    let (report, _) = evaluate(model, clips)?;
    let c: ConfusionCounts = report.rows.iter().map(|r| r.counts).sum();
    Ok(prf(&c))
}

/// Trains `model` and returns the parameters of its best validation epoch.
///
/// Each epoch draws blocks (all frames, or `blocks_per_clip` per clip),
/// shuffles them, and takes Adam steps on mean cross-entropy. Parameters are
/// kept from the first epoch reaching the highest validation F; training
/// stops after `patience` epochs without improvement.
pub fn fit(
    mut model: Model,
    train: &[LabeledClip],
    validation: &[LabeledClip],
    cfg: &TrainConfig,
    plan: String,
    fit_standardizer: bool,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    if fit_standardizer {
        let (mean, std) = band_stats(train);
        model.set_standardizer(&mean, &std)?;
    }
    let arch = model.arch;
    let mcfg = model.config.clone();
    let ctx = mcfg.context();
    let per = ctx.frames * mcfg.mel_bands;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut epochs = Vec::new();
    let mut best: Option<(usize, Prf, Model, Adam<f32>)> = None;
    let mut buf = vec![0.0f32; cfg.batch_size * per];
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (ci, clip) in train.iter().enumerate() {
            let n = clip.frames();
            match cfg.blocks_per_clip {
                Some(k) if k < n => order.extend(index::sample(&mut rng, n, k).into_iter().map(|t| (ci, t))),
                _ => order.extend((0..n).map(|t| (ci, t))),
            }
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let n = chunk.len();
            let mut targets = Vec::with_capacity(n);
            for (i, &(ci, t)) in chunk.iter().enumerate() {
                fill_block(&train[ci].spec, t, ctx, &mut buf[i * per..(i + 1) * per]);
                targets.push(usize::from(train[ci].labels.get(t)));
            }
            let lv = train_step(&mut model, &mut opt, &buf[..n * per], &targets, &mut rng).map_err(|e| match e {
                TrainError::NonFiniteLoss { detail, .. } => TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    detail,
                },
                other => other,
            })?;
            loss_sum += lv * n as f64;
            seen += n;
        }
        let validation_prf = pooled_prf(&model, validation)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            validation: validation_prf,
            wall_s: t0.elapsed().as_secs_f64(),
        });
        let improved = best.as_ref().is_none_or(|(_, b, _, _)| validation_prf.f > b.f);
        if improved {
            best = Some((epoch, validation_prf, model.clone(), opt.clone()));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_validation, model, optimizer) = best.expect("at least one epoch ran");
    let record = RunRecord {
        arch,
        plan,
        seed: cfg.seed,
        train_config: cfg.clone(),
        model_config: mcfg,
        epochs,
        best_epoch,
        best_validation,
        total_params: model.total_params(),
        trainable_params: model.trainable_params(),
        checkpoint: None,
        overrides: Vec::new(),
    };
    Ok(TrainOutcome {
        model,
        optimizer,
        record,
    })
}

/// Trains the source CNN from scratch.
pub fn train_source(
    train: &[LabeledClip],
    validation: &[LabeledClip],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = Model::new(Arch::Source, model_cfg.clone(), cfg.seed)?;
    fit(model, train, validation, cfg, NO_TRANSFER.to_string(), true)
}

/// Builds a target CRNN, applies `plan` from `source` when given, and trains it.
/// Without a plan this is the from-scratch baseline.
pub fn train_target(
    train: &[LabeledClip],
    validation: &[LabeledClip],
    model_cfg: &ModelConfig,
    source: Option<&Model>,
    plan: Option<&TransferPlan>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut model = Model::new(Arch::Target, model_cfg.clone(), cfg.seed)?;
    let transferred = match (source, plan) {
        (Some(src), Some(p)) => {
            apply_transfer(src, &mut model, p)?;
            true
        }
        (None, Some(_)) => return Err(TrainError::Transfer("a transfer plan needs a source model".into())),
        _ => false,
    };
    fit(model, train, validation, cfg, plan_tag(plan), !transferred)
}
