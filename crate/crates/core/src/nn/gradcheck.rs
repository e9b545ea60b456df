//! Central finite-difference checks of tape gradients, in `f64`.

use super::{NdArray, NnError, ParamSet, Tape, Var};

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_rel_error = self.max_rel_error.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }
}

fn loss_value<B>(build: &B, params: &ParamSet<f64>) -> Result<f64, NnError>
where
    B: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var, NnError>,
{
    let mut tape = Tape::new();
    let l = build(&mut tape, params)?;
    Ok(tape.value(l).data()[0])
}

/// Compares analytic parameter gradients against central differences with
/// step `h` for every trainable element.
pub fn check_params<B>(params: &ParamSet<f64>, build: B, h: f64) -> Result<GradCheck, NnError>
where
    B: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<Var, NnError>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    {
        let mut tape = Tape::new();
        let l = build(&mut tape, &analytic)?;
        tape.backward_into(l, &mut analytic)?;
    }
    let mut report = GradCheck::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if !params.get(&name)?.is_trainable() {
            continue;
        }
        let n = params.get(&name)?.value.len();
        for i in 0..n {
            let orig = params.get(&name)?.value.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = orig + h;
            let up = loss_value(&build, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig - h;
            let down = loss_value(&build, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.absorb(analytic.get(&name)?.grad.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Same check with respect to a single input array.
pub fn check_input<B>(x: &NdArray<f64>, build: B, h: f64) -> Result<GradCheck, NnError>
where
    B: Fn(&mut Tape<f64>, Var) -> Result<Var, NnError>,
{
    let eval = |x: &NdArray<f64>| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone())?;
        let l = build(&mut tape, xv)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let xv = tape.input_with_grad(x.clone())?;
    let l = build(&mut tape, xv)?;
    let grads = tape.backward(l)?;
    let zero = NdArray::zeros(x.shape());
    let g = grads.get(xv).unwrap_or(&zero);
    let mut report = GradCheck::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        report.absorb(g.data()[i], (up - down) / (2.0 * h));
    }
    Ok(report)
}
