use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{NdArray, NnError, ParamSet, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `step` is the
/// 1-based step number after increment.
pub fn adam_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let c1 = F::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = F::of(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (F::of(cfg.lr), F::of(cfg.eps));
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (F::one() - b1) * g;
        *v = b2 * *v + (F::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam optimizer state: first/second moments per named parameter.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    moments: IndexMap<String, (NdArray<F>, NdArray<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &NdArray<F>, &NdArray<F>)> {
        self.moments.iter().map(|(k, (m, v))| (k.as_str(), m, v))
    }

    pub(crate) fn insert_moments(&mut self, name: String, m: NdArray<F>, v: NdArray<F>) {
        self.moments.insert(name, (m, v));
    }

    /// Applies one update from the gradients stored in `params`. Frozen
    /// parameters and buffers are skipped.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<(), NnError> {
        for (name, p) in params.iter() {
            if !p.is_trainable() {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(NnError::NonFiniteGradient(name.to_string()));
            }
            if let Some((m, _)) = self.moments.get(name) {
                if m.shape() != p.value.shape() {
                    return Err(NnError::Shape(format!(
                        "optimizer state for {name} is {:?}, parameter is {:?}",
                        m.shape(),
                        p.value.shape()
                    )));
                }
            }
        }
        self.step += 1;
        for (name, p) in params.iter_mut() {
            if !p.is_trainable() {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (NdArray::zeros(p.value.shape()), NdArray::zeros(p.value.shape())));
            adam_update(
                p.value.data_mut(),
                p.grad.data(),
                m.data_mut(),
                v.data_mut(),
                self.step,
                &self.config,
            );
        }
        Ok(())
    }
}
