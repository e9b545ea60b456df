//! Minimal differentiable compute: arrays, the layer operations the two
//! detectors need, reverse-mode gradients, Adam and cross-entropy.

mod adam;
mod array;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use adam::{adam_update, Adam, AdamConfig};
pub use array::{NdArray, Real};
pub use kernels::FreqPadding;
pub use params::{Param, ParamKind, ParamSet};
pub use tape::{BatchStats, Grads, Tape, Var};

use thiserror::Error;

/// Probability floor used by the cross-entropy clamp.
pub const PROB_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {0} is outside {{0, 1}}")]
    Label(usize),
    #[error("backward called before any forward pass recorded the loss")]
    NoForward,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Filter banks and biases of one gated convolution.
#[derive(Clone, Debug)]
pub struct GluConvLayer<F> {
    /// Linear-path filters, `out × in × k_time × k_freq`.
    pub w: NdArray<F>,
    /// Gate filters, same shape as `w`.
    pub v: NdArray<F>,
    pub b: NdArray<F>,
    pub c: NdArray<F>,
}

impl<F: Real> GluConvLayer<F> {
    pub fn new(w: NdArray<F>, v: NdArray<F>, b: NdArray<F>, c: NdArray<F>) -> Result<Self, NnError> {
        if w.shape() != v.shape() {
            return Err(NnError::Shape(format!(
                "W {:?} and V {:?} differ",
                w.shape(),
                v.shape()
            )));
        }
        let (out, _, _, _) = w.dims4()?;
        if b.shape() != [out] || c.shape() != [out] {
            return Err(NnError::Shape(format!(
                "biases {:?}/{:?} for {out} output channels",
                b.shape(),
                c.shape()
            )));
        }
        Ok(Self { w, v, b, c })
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.v.len() + self.b.len() + self.c.len()
    }
}

/// `Y = (W∗X + b) ⊙ σ(V∗X + c)` on a `(batch, channels, time, freq)` input.
pub fn glu_conv_forward<F: Real>(
    x: &NdArray<F>,
    layer: &GluConvLayer<F>,
    pad: FreqPadding,
) -> Result<NdArray<F>, NnError> {
    let lin = kernels::conv2d_forward(x, &layer.w, &layer.b, pad)?;
    let gate = kernels::conv2d_forward(x, &layer.v, &layer.c, pad)?;
    let data = lin
        .data()
        .iter()
        .zip(gate.data())
        .map(|(&a, &g)| a * kernels::sigmoid(g))
        .collect();
    NdArray::from_vec(lin.shape(), data)
}

/// Plain convolution with bias (time same-padded).
pub fn conv2d<F: Real>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    b: &NdArray<F>,
    pad: FreqPadding,
) -> Result<NdArray<F>, NnError> {
    kernels::conv2d_forward(x, w, b, pad)
}

/// Max pooling over frequency only; time extent is untouched.
pub fn pool_freq<F: Real>(x: &NdArray<F>, pool: usize) -> Result<NdArray<F>, NnError> {
    kernels::max_pool_freq(x, pool).map(|(y, _)| y)
}

/// Row-wise softmax of `(batch, 2)` logits.
pub fn softmax2<F: Real>(logits: &NdArray<F>) -> Result<NdArray<F>, NnError> {
    let (_, cols) = logits.dims2()?;
    if cols != 2 {
        return Err(NnError::Shape(format!("softmax2 needs 2 units, got {cols}")));
    }
    if !logits.is_finite() {
        return Err(NnError::NonFinite("softmax2 logits"));
    }
    kernels::softmax_rows(logits)
}

/// Mean of `-ln p(true class)`, clamped at [`PROB_FLOOR`].
pub fn bce_loss<F: Real>(probs: &NdArray<F>, labels: &[usize]) -> Result<F, NnError> {
    let mut tape = Tape::new();
    let p = tape.input(probs.clone())?;
    let l = tape.bce(p, labels, PROB_FLOOR)?;
    Ok(tape.value(l).data()[0])
}
