//! Filter patterns by gradient ascent on the input, and export of per-block
//! hidden features for external embedding plots.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledClip;
use crate::models::{conv_stack, fill_block, LayerId, Model, ModelError};
use crate::nn::{NdArray, NnError, ParamSet, Tape, Var};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("invalid job: {0}")]
    Job(String),
    #[error("ascent diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("no monotone ascent after {halvings} halvings of eta (last eta {eta:e})")]
    NotMonotone { halvings: usize, eta: f64 },
    #[error("empty split: nothing to export")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How the gradient becomes an update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `X += eta * g`.
    Raw,
    /// `X += eta * g / rms(g)`, so `eta` is a step length per element.
    #[default]
    Normalized,
}

/// One ascent run: which filter, the input extents and the step schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPatternJob {
    pub layer: LayerId,
    pub filter: usize,
    /// Input extents in frames and mel bands.
    pub frames: usize,
    pub bands: usize,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub step_rule: StepRule,
    /// Standard deviation of the starting noise.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    0.01
}

impl FilterPatternJob {
    pub fn new(layer: LayerId, filter: usize, frames: usize, bands: usize) -> Self {
        Self {
            layer,
            filter,
            frames,
            bands,
            eta: 0.1,
            steps: 200,
            seed: 0,
            step_rule: StepRule::Normalized,
            init_scale: default_init_scale(),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<(), VizError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(VizError::Job(format!("eta {} must be positive", self.eta)));
        }
        if self.steps == 0 {
            return Err(VizError::Job("steps must be at least 1".into()));
        }
        if self.layer.0 >= LayerId::ALL.len() {
            return Err(VizError::Job(format!("layer index {} out of range", self.layer.0)));
        }
        let out = model.config.channels[self.layer.0];
        if self.filter >= out {
            return Err(VizError::Job(format!(
                "filter {} out of range: {} has {out} filters",
                self.filter, self.layer
            )));
        }
        Ok(())
    }
}

/// Result of an ascent run.
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    /// Final input, unnormalized.
    pub input: NdArray<f64>,
    /// Objective at `X_0 .. X_K`, so `steps + 1` values.
    pub trace: Vec<f64>,
    pub eta: f64,
}

impl Ascent {
    /// True when no step lowered the objective by more than `tol`.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.trace.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

/// Tolerance for the non-decreasing trace check.
pub const MONOTONE_TOL: f64 = 1e-7;
/// Halvings tried by [`filter_pattern`] before giving up.
pub const MAX_HALVINGS: usize = 40;

/// Gradient ascent of a scalar objective with respect to its input.
pub fn ascend<B>(x0: NdArray<f64>, objective: B, eta: f64, steps: usize, rule: StepRule) -> Result<Ascent, VizError>
where
    B: Fn(&mut Tape<f64>, Var) -> Result<Var, VizError>,
{
    let mut x = x0;
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let xv = tape.input_with_grad(x.clone())?;
        let obj = objective(&mut tape, xv).map_err(|e| match e {
            VizError::Nn(NnError::NonFinite(op)) => VizError::Diverged {
                step,
                detail: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        let value = tape.value(obj).data()[0];
        if !value.is_finite() {
            return Err(VizError::Diverged {
                step,
                detail: format!("activation is {value}"),
            });
        }
        trace.push(value);
        if step == steps {
            break;
        }
        let grads = tape.backward(obj)?;
        let Some(g) = grads.get(xv) else { break };
        let scale = match rule {
            StepRule::Raw => eta,
            StepRule::Normalized => {
                let rms = (g.data().iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
                if rms == 0.0 {
                    0.0
                } else {
                    eta / rms
                }
            }
        };
        for (xi, gi) in x.data_mut().iter_mut().zip(g.data()) {
            *xi += scale * gi;
        }
    }
    Ok(Ascent { input: x, trace, eta })
}

/// Mean activation of one filter's gated output at `layer`, computed in
/// `f64` with running normalization statistics.
pub fn filter_objective<'a>(
    model: &'a Model,
    params: &'a ParamSet<f64>,
    job: &'a FilterPatternJob,
) -> Result<impl Fn(&mut Tape<f64>, Var) -> Result<Var, VizError> + 'a, VizError> {
    let mut cfg = model.config.clone();
    cfg.context_frames = job.frames;
    cfg.mel_bands = job.bands;
    cfg.validate()
        .map_err(|e| VizError::Job(format!("extents {}x{}: {e}", job.frames, job.bands)))?;
    Ok(move |tape: &mut Tape<f64>, x: Var| {
        let (glus, _, _) = conv_stack(tape, &cfg, params, x, job.layer, false)?;
        let g = glus[job.layer.0];
        let (_, ch, t, f) = tape.value(g).dims4()?;
        let per = t * f;
        let mut w = vec![0.0; ch * per];
        w[job.filter * per..(job.filter + 1) * per].fill(1.0 / per as f64);
        Ok(tape.weighted_sum(g, w)?)
    })
}

/// Starting input: seeded Gaussian noise with deviation `init_scale`.
pub fn initial_input(job: &FilterPatternJob) -> NdArray<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let n = job.frames * job.bands;
    let data = (0..n)
        .map(|_| job.init_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    NdArray::from_vec(&[1, 1, job.frames, job.bands], data).expect("length matches shape")
}

/// Runs the job, halving `eta` until the trace is non-decreasing within
/// [`MONOTONE_TOL`].
pub fn filter_pattern(model: &Model, job: &FilterPatternJob) -> Result<Ascent, VizError> {
    job.validate(model)?;
    let params = model.params.cast::<f64>();
    let objective = filter_objective(model, &params, job)?;
    let mut eta = job.eta;
    for _ in 0..=MAX_HALVINGS {
        let run = ascend(initial_input(job), &objective, eta, job.steps, job.step_rule)?;
        if run.is_monotone(MONOTONE_TOL) {
            return Ok(run);
        }
        eta /= 2.0;
    }
    Err(VizError::NotMonotone {
        halvings: MAX_HALVINGS,
        eta: eta * 2.0,
    })
}

/// Min-max scaling to `[0, 1]`; a constant input maps to 0.5.
pub fn normalize_unit(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; x.len()];
    }
    x.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Binary 8-bit PGM of a `frames × bands` pattern: time runs left to right,
/// the lowest band is the bottom row.
pub fn pgm_bytes(unit: &[f64], frames: usize, bands: usize) -> Vec<u8> {
    let mut out = format!("P5\n{frames} {bands}\n255\n").into_bytes();
    for m in (0..bands).rev() {
        for t in 0..frames {
            out.push((unit[t * bands + m].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Writes `pattern.pgm` and `trace.csv` (`step,activation`) for a run.
pub fn save_pattern(dir: &Path, stem: &str, job: &FilterPatternJob, run: &Ascent) -> Result<(), VizError> {
    std::fs::create_dir_all(dir)?;
    let unit = normalize_unit(run.input.data());
    std::fs::write(dir.join(format!("{stem}.pgm")), pgm_bytes(&unit, job.frames, job.bands))?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}_trace.csv")))?;
    w.write_record(["step", "activation"])?;
    for (k, a) in run.trace.iter().enumerate() {
        w.write_record([k.to_string(), format!("{a:.12e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// One sampled block's flattened post-layer features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub clip_id: String,
    pub frame: usize,
    pub task: String,
    pub label: bool,
    pub values: Vec<f32>,
}

const EXPORT_BATCH: usize = 128;

/// Samples up to `sample` blocks across `clips` (all when fewer) and returns
/// the pooled output of `layer` for each, flattened channel-major.
pub fn export_features(
    model: &Model,
    clips: &[LabeledClip],
    layer: LayerId,
    sample: usize,
    seed: u64,
) -> Result<Vec<FeatureRow>, VizError> {
    let all: Vec<(usize, usize)> = clips
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.frames()).map(move |t| (ci, t)))
        .collect();
    if all.is_empty() {
        return Err(VizError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = if sample >= all.len() {
        (0..all.len()).collect()
    } else {
        index::sample(&mut rng, all.len(), sample).into_vec()
    };
    picked.sort_unstable();
    let ctx = model.config.context();
    let per = ctx.frames * model.config.mel_bands;
    let mut rows = Vec::with_capacity(picked.len());
    let mut buf = vec![0.0f32; EXPORT_BATCH * per];
    for chunk in picked.chunks(EXPORT_BATCH) {
        for (i, &k) in chunk.iter().enumerate() {
            let (ci, t) = all[k];
            fill_block(&clips[ci].spec, t, ctx, &mut buf[i * per..(i + 1) * per]);
        }
        let x = model.prepare_input(&buf[..chunk.len() * per], chunk.len())?;
        let mut tape = Tape::new();
        let xv = tape.input(x)?;
        let (_, outs, _) = conv_stack(&mut tape, &model.config, &model.params, xv, layer, false)?;
        let out = tape.value(outs[layer.0]);
        let width = out.len() / chunk.len();
        for (i, &k) in chunk.iter().enumerate() {
            let (ci, t) = all[k];
            rows.push(FeatureRow {
                clip_id: clips[ci].id.clone(),
                frame: t,
                task: clips[ci].task.to_string(),
                label: clips[ci].labels.get(t),
                values: out.data()[i * width..(i + 1) * width].to_vec(),
            });
        }
    }
    Ok(rows)
}

/// `clip_id,frame_index,task,label,f0,f1,...`.
pub fn write_features<W: Write>(w: W, rows: &[FeatureRow]) -> Result<(), VizError> {
    let mut out = csv::Writer::from_writer(w);
    let width = rows.first().map_or(0, |r| r.values.len());
    let mut header = vec!["clip_id".to_string(), "frame_index".into(), "task".into(), "label".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.clip_id.clone(), r.frame.to_string(), r.task.clone(), u8::from(r.label).to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
