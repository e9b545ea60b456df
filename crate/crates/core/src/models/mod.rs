//! Source GLU-CNN and target CRNN over context blocks.
//!
//! Both share one convolutional stack: three GLU layers, each followed by
//! per-channel normalization and max pooling over frequency. The source head
//! averages over time and classifies; the target head runs a gated recurrent
//! cell over the block's time axis and classifies from its final state.
//! Class 0 is off, class 1 is on.

mod blocks;

pub use blocks::{fill_block, make_blocks, Block, ContextConfig};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint;
use crate::nn::{BatchStats, FreqPadding, NdArray, NnError, ParamKind, ParamSet, Real, Tape, Var, PROB_FLOOR};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("label track has {labels} frames, spectrogram has {frames}")]
    Misaligned { labels: usize, frames: usize },
    #[error("expected blocks of {expected:?}, got {got:?}")]
    BlockShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint does not match model configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// GLU-CNN with temporal averaging (speech activity).
    Source,
    /// CRNN with a recurrent readout (singing voice).
    Target,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Source => "source",
            Arch::Target => "target",
        })
    }
}

/// Conv layer index, `L1`..`L3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerId(pub usize);

impl LayerId {
    pub const ALL: [LayerId; 3] = [LayerId(0), LayerId(1), LayerId(2)];

    pub fn prefix(self) -> String {
        format!("l{}", self.0 + 1)
    }

    /// Names of the GLU arrays `W`, `V`, `b`, `c` of this layer.
    pub fn conv_params(self) -> [String; 4] {
        let p = self.prefix();
        [format!("{p}.w"), format!("{p}.v"), format!("{p}.b"), format!("{p}.c")]
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0 + 1)
    }
}

impl FromStr for LayerId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LayerId(0)),
            "l2" => Ok(LayerId(1)),
            "l3" => Ok(LayerId(2)),
            _ => Err(ModelError::Config(format!("unknown layer {s:?}, expected l1, l2 or l3"))),
        }
    }
}

impl TryFrom<String> for LayerId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, ModelError> {
        s.parse()
    }
}

impl From<LayerId> for String {
    fn from(l: LayerId) -> String {
        l.prefix()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of L1, L2, L3.
    pub channels: [usize; 3],
    /// `(time, freq)` kernel extents per layer.
    pub kernels: [[usize; 2]; 3],
    /// Frequency pooling per layer.
    pub pools: [usize; 3],
    pub freq_padding: FreqPadding,
    /// Recurrent hidden size of the target model.
    pub hidden: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    /// Context block length `T`.
    pub context_frames: usize,
    pub mel_bands: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 16],
            kernels: [[3, 3]; 3],
            pools: [4, 4, 4],
            freq_padding: FreqPadding::Same,
            hidden: 32,
            dropout: 0.2,
            batch_norm: true,
            context_frames: 25,
            mel_bands: 64,
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
const STD_FLOOR: f64 = 1e-3;

impl ModelConfig {
    pub fn context(&self) -> ContextConfig {
        ContextConfig {
            frames: self.context_frames,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.context().validate()?;
        if self.channels.contains(&0) || self.pools.contains(&0) || self.hidden == 0 || self.mel_bands == 0 {
            return Err(ModelError::Config("channels, pools, hidden and mel_bands must be positive".into()));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if k[0] % 2 == 0 || k[0] == 0 || k[1] == 0 {
                return Err(ModelError::Config(format!(
                    "kernels[{i}] = {k:?}: time extent must be odd, both positive"
                )));
            }
            if self.freq_padding == FreqPadding::Same && k[1] % 2 == 0 {
                return Err(ModelError::Config(format!(
                    "kernels[{i}] = {k:?}: same padding needs an odd frequency extent"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let f = self.freq_extents()?;
        if f[3] != 1 {
            return Err(ModelError::Config(format!(
                "frequency extents {f:?} do not reduce to 1 after the last pool"
            )));
        }
        Ok(())
    }

    /// Frequency extent at the stack input and after each layer's pool.
    pub fn freq_extents(&self) -> Result<[usize; 4], ModelError> {
        let mut f = [self.mel_bands, 0, 0, 0];
        for i in 0..3 {
            let conv = match self.freq_padding {
                FreqPadding::Same => f[i],
                FreqPadding::Valid => f[i]
                    .checked_sub(self.kernels[i][1] - 1)
                    .filter(|&v| v > 0)
                    .ok_or_else(|| ModelError::Config(format!("layer {} has no frequency extent left", i + 1)))?,
            };
            f[i + 1] = conv.div_ceil(self.pools[i]);
        }
        Ok(f)
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.channels[layer - 1]
        }
    }

    /// Number of scalars in one layer's `W`, `V`, `b`, `c`.
    pub fn conv_param_count(&self, layer: LayerId) -> usize {
        let i = layer.0;
        let k = self.kernels[i];
        2 * self.channels[i] * self.in_channels(i) * k[0] * k[1] + 2 * self.channels[i]
    }

    /// Shape of the `(batch, 1, T, bands)` input.
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.context_frames, self.mel_bands]
    }
}

/// Network parameters plus the configuration and architecture they belong to.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Arch,
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> NdArray<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale) as f32).collect();
    NdArray::from_vec(shape, data).expect("shape and length agree")
}

pub const GRU_WEIGHTS: [&str; 6] = ["w_iz", "w_ir", "w_in", "w_hz", "w_hr", "w_hn"];
pub const GRU_BIASES: [&str; 6] = ["b_iz", "b_ir", "b_in", "b_hz", "b_hr", "b_hn"];

impl Model {
    /// Fresh parameters: uniform fan-in scaled weights, zero biases, identity
    /// normalization and input standardization.
    pub fn new(arch: Arch, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let bands = config.mel_bands;
        p.insert("input.mean", NdArray::zeros(&[bands]), ParamKind::Buffer);
        p.insert("input.std", NdArray::full(&[bands], 1.0), ParamKind::Buffer);
        for layer in LayerId::ALL {
            let i = layer.0;
            let (co, ci) = (config.channels[i], config.in_channels(i));
            let [kt, kf] = config.kernels[i];
            let scale = (3.0 / (ci * kt * kf) as f64).sqrt();
            let [w, v, b, c] = layer.conv_params();
            p.insert(w, uniform(&mut rng, &[co, ci, kt, kf], scale), ParamKind::Weight);
            p.insert(v, uniform(&mut rng, &[co, ci, kt, kf], scale), ParamKind::Weight);
            p.insert(b, NdArray::zeros(&[co]), ParamKind::Weight);
            p.insert(c, NdArray::zeros(&[co]), ParamKind::Weight);
            if config.batch_norm {
                let pre = layer.prefix();
                p.insert(format!("{pre}.bn.gamma"), NdArray::full(&[co], 1.0), ParamKind::Weight);
                p.insert(format!("{pre}.bn.beta"), NdArray::zeros(&[co]), ParamKind::Weight);
                p.insert(format!("{pre}.bn.mean"), NdArray::zeros(&[co]), ParamKind::Buffer);
                p.insert(format!("{pre}.bn.var"), NdArray::full(&[co], 1.0), ParamKind::Buffer);
            }
        }
        let feat = config.channels[2];
        let head_in = match arch {
            Arch::Source => feat,
            Arch::Target => {
                let h = config.hidden;
                let s = 1.0 / (h as f64).sqrt();
                for name in GRU_WEIGHTS {
                    let rows = if name.starts_with("w_i") { feat } else { h };
                    p.insert(format!("gru.{name}"), uniform(&mut rng, &[rows, h], s), ParamKind::Weight);
                }
                for name in GRU_BIASES {
                    p.insert(format!("gru.{name}"), NdArray::zeros(&[h]), ParamKind::Weight);
                }
                h
            }
        };
        let s = (3.0 / head_in as f64).sqrt();
        p.insert("head.w", uniform(&mut rng, &[head_in, 2], s), ParamKind::Weight);
        p.insert("head.b", NdArray::zeros(&[2]), ParamKind::Weight);
        Ok(Self {
            arch,
            config,
            params: p,
        })
    }

    /// Loads a checkpoint saved for `config`; the architecture is read off
    /// the parameter names.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self, ModelError> {
        let entries = checkpoint::load_entries(path)?;
        let arch = if entries.contains_key("gru.w_iz") {
            Arch::Target
        } else {
            Arch::Source
        };
        let mut m = Self::new(arch, config, 0)?;
        let expected: Vec<&str> = m.params.names().collect();
        let got: Vec<&str> = entries.keys().map(String::as_str).collect();
        if expected != got {
            return Err(ModelError::Mismatch(format!(
                "{} has parameters {got:?}, a {arch} model with this configuration has {expected:?}",
                path.display()
            )));
        }
        checkpoint::load_into(&entries, &mut m.params).map_err(|e| ModelError::Mismatch(e.to_string()))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        checkpoint::save_params(path, &self.params)?;
        Ok(())
    }

    /// Sets per-band input standardization from training frames.
    pub fn set_standardizer(&mut self, mean: &[f64], std: &[f64]) -> Result<(), ModelError> {
        let b = self.config.mel_bands;
        if mean.len() != b || std.len() != b {
            return Err(ModelError::Config(format!("standardizer needs {b} bands")));
        }
        let m = NdArray::from_vec(&[b], mean.iter().map(|&v| v as f32).collect())?;
        let s = NdArray::from_vec(&[b], std.iter().map(|&v| v.max(STD_FLOOR) as f32).collect())?;
        self.params.set_value("input.mean", m)?;
        self.params.set_value("input.std", s)?;
        Ok(())
    }

    /// Sum of extents of weight arrays (buffers excluded).
    pub fn total_params(&self) -> usize {
        self.params.total_weight_count()
    }

    pub fn trainable_params(&self) -> usize {
        self.params.trainable_count()
    }

    /// Standardized `(batch, 1, T, bands)` input from raw log-mel blocks.
    pub fn prepare_input(&self, blocks: &[f32], batch: usize) -> Result<NdArray<f32>, ModelError> {
        prepare_input(&self.params, &self.config, blocks, batch)
    }

    /// Class probabilities for a batch of raw blocks, inference mode.
    pub fn predict_proba(&self, blocks: &[f32], batch: usize) -> Result<Vec<[f32; 2]>, ModelError> {
        let x = self.prepare_input(blocks, batch)?;
        let mut tape = Tape::new();
        let xv = tape.input(x)?;
        let out = forward(&mut tape, self.arch, &self.config, &self.params, xv, None)?;
        Ok(tape
            .value(out.probs)
            .data()
            .chunks(2)
            .map(|r| [r[0], r[1]])
            .collect())
    }

    pub fn predict(&self, blocks: &[f32], batch: usize) -> Result<Vec<bool>, ModelError> {
        Ok(self.predict_proba(blocks, batch)?.iter().map(|p| decide(*p)).collect())
    }
}

/// On when the on-probability is strictly larger; an exact tie is off.
pub fn decide<F: PartialOrd>(p: [F; 2]) -> bool {
    p[1] > p[0]
}

pub fn prepare_input<F: Real>(
    params: &ParamSet<F>,
    cfg: &ModelConfig,
    blocks: &[F],
    batch: usize,
) -> Result<NdArray<F>, ModelError> {
    let shape = cfg.input_shape(batch);
    let per = cfg.context_frames * cfg.mel_bands;
    if blocks.len() != batch * per || batch == 0 {
        return Err(ModelError::BlockShape {
            expected: shape.to_vec(),
            got: vec![blocks.len() / per.max(1), blocks.len() % per.max(1)],
        });
    }
    let mean = params.value("input.mean")?.data();
    let std = params.value("input.std")?.data();
    let bands = cfg.mel_bands;
    let data = blocks
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = i % bands;
            (v - mean[m]) / std[m]
        })
        .collect();
    Ok(NdArray::from_vec(&shape, data)?)
}

/// Nodes of interest from one forward pass.
#[derive(Debug)]
pub struct ForwardOut<F> {
    /// `(batch, 2)` class probabilities.
    pub probs: Var,
    pub logits: Var,
    /// GLU output of each layer, before normalization and pooling.
    pub glu: Vec<Var>,
    /// Output of each layer after pooling; the last one is `(batch, C3, T, 1)`.
    pub layers: Vec<Var>,
    /// Observed statistics per normalized layer (training mode only).
    pub bn_stats: Vec<(LayerId, BatchStats<F>)>,
}

fn bn_running<F: Real>(params: &ParamSet<F>, pre: &str) -> Result<(Vec<F>, Vec<F>), NnError> {
    Ok((
        params.value(&format!("{pre}.bn.mean"))?.data().to_vec(),
        params.value(&format!("{pre}.bn.var"))?.data().to_vec(),
    ))
}

/// Runs the conv stack up to and including layer `upto`. In training mode
/// normalization uses batch statistics.
pub fn conv_stack<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    x: Var,
    upto: LayerId,
    training: bool,
) -> Result<(Vec<Var>, Vec<Var>, Vec<(LayerId, BatchStats<F>)>), ModelError> {
    let want = cfg.input_shape(tape.value(x).shape()[0]);
    if tape.value(x).shape() != want {
        return Err(ModelError::BlockShape {
            expected: want.to_vec(),
            got: tape.value(x).shape().to_vec(),
        });
    }
    let mut h = x;
    let (mut glus, mut outs, mut stats) = (Vec::new(), Vec::new(), Vec::new());
    for layer in LayerId::ALL.into_iter().take(upto.0 + 1) {
        let [w, v, b, c] = layer.conv_params();
        let (w, v, b, c) = (
            tape.param(params, &w)?,
            tape.param(params, &v)?,
            tape.param(params, &b)?,
            tape.param(params, &c)?,
        );
        let g = tape.glu_conv(h, w, b, v, c, cfg.freq_padding)?;
        glus.push(g);
        let mut y = g;
        if cfg.batch_norm {
            let pre = layer.prefix();
            let gamma = tape.param(params, &format!("{pre}.bn.gamma"))?;
            let beta = tape.param(params, &format!("{pre}.bn.beta"))?;
            if training {
                let (out, s) = tape.batch_norm(g, gamma, beta, None)?;
                stats.push((layer, s.expect("training mode returns statistics")));
                y = out;
            } else {
                let (m, var) = bn_running(params, &pre)?;
                y = tape.batch_norm(g, gamma, beta, Some((&m, &var)))?.0;
            }
        }
        h = tape.max_pool_freq(y, cfg.pools[layer.0])?;
        outs.push(h);
    }
    Ok((glus, outs, stats))
}

fn affine<F: Real>(tape: &mut Tape<F>, params: &ParamSet<F>, x: Var, w: &str, b: &str) -> Result<Var, NnError> {
    let w = tape.param(params, &format!("gru.{w}"))?;
    let b = tape.param(params, &format!("gru.{b}"))?;
    let m = tape.matmul(x, w)?;
    tape.add_bias(m, b)
}

/// One gated recurrent step; `x` is `(batch, in)`, `h` is `(batch, hidden)`.
///
/// `z = σ(x W_iz + b_iz + h W_hz + b_hz)`, `r` likewise,
/// `n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))`, `h' = n + z ⊙ (h − n)`.
pub fn gru_step<F: Real>(tape: &mut Tape<F>, params: &ParamSet<F>, x: Var, h: Var) -> Result<Var, NnError> {
    let xz = affine(tape, params, x, "w_iz", "b_iz")?;
    let hz = affine(tape, params, h, "w_hz", "b_hz")?;
    let zs = tape.add(xz, hz)?;
    let z = tape.sigmoid(zs)?;
    let xr = affine(tape, params, x, "w_ir", "b_ir")?;
    let hr = affine(tape, params, h, "w_hr", "b_hr")?;
    let rs = tape.add(xr, hr)?;
    let r = tape.sigmoid(rs)?;
    let xn = affine(tape, params, x, "w_in", "b_in")?;
    let hn = affine(tape, params, h, "w_hn", "b_hn")?;
    let rhn = tape.mul(r, hn)?;
    let ns = tape.add(xn, rhn)?;
    let n = tape.tanh(ns)?;
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    tape.add(n, zd)
}

/// Full forward pass to class probabilities. Passing an RNG selects
/// training mode: batch statistics and dropout.
pub fn forward<F: Real>(
    tape: &mut Tape<F>,
    arch: Arch,
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    x: Var,
    train: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOut<F>, ModelError> {
    let training = train.is_some();
    let (glu, layers, bn_stats) = conv_stack(tape, cfg, params, x, LayerId(2), training)?;
    let feat = *layers.last().expect("three layers");
    let mut summary = match arch {
        Arch::Source => tape.mean_time_freq(feat)?,
        Arch::Target => {
            let batch = tape.value(feat).shape()[0];
            let mut h = tape.input(NdArray::zeros(&[batch, cfg.hidden]))?;
            for t in 0..cfg.context_frames {
                let xt = tape.time_slice(feat, t)?;
                h = gru_step(tape, params, xt, h)?;
            }
            h
        }
    };
    if let Some(rng) = train {
        if cfg.dropout > 0.0 {
            summary = tape.dropout(summary, cfg.dropout, rng)?;
        }
    }
    let w = tape.param(params, "head.w")?;
    let b = tape.param(params, "head.b")?;
    let m = tape.matmul(summary, w)?;
    let logits = tape.add_bias(m, b)?;
    let probs = tape.softmax2(logits)?;
    Ok(ForwardOut {
        probs,
        logits,
        glu,
        layers,
        bn_stats,
    })
}

/// Binary cross-entropy of a forward pass against 0/1 targets.
pub fn loss<F: Real>(tape: &mut Tape<F>, out: &ForwardOut<F>, targets: &[usize]) -> Result<Var, NnError> {
    tape.bce(out.probs, targets, PROB_FLOOR)
}

/// Folds observed batch statistics into the running buffers.
pub fn update_running_stats<F: Real>(params: &mut ParamSet<F>, stats: &[(LayerId, BatchStats<F>)]) -> Result<(), NnError> {
    let mom = F::of(BN_MOMENTUM);
    for (layer, s) in stats {
        let pre = layer.prefix();
        let unbias = if s.count > 1 {
            F::of(s.count as f64 / (s.count - 1) as f64)
        } else {
            F::one()
        };
        let mean = &mut params.get_mut(&format!("{pre}.bn.mean"))?.value;
        for (r, &m) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (F::one() - mom) * *r + mom * m;
        }
        let var = &mut params.get_mut(&format!("{pre}.bn.var"))?.value;
        for (r, &v) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (F::one() - mom) * *r + mom * v * unbias;
        }
    }
    Ok(())
}
