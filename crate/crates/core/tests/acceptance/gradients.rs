use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::models::{gru_step, GRU_BIASES, GRU_WEIGHTS};
use vocalis_core::nn::gradcheck::{check_input, check_params, GradCheck};
use vocalis_core::nn::{FreqPadding, NdArray, NnError, ParamKind, ParamSet, Tape, Var, PROB_FLOOR};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SHAPES: usize = 6;
const BUDGET: Duration = Duration::from_secs(120);

fn arr(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> NdArray<f64> {
    let n = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[derive(Default)]
struct Tally {
    worst: f64,
    checked: usize,
    shapes: usize,
}

impl Tally {
    fn add(&mut self, g: GradCheck) {
        self.worst = self.worst.max(g.max_rel_error);
        self.checked += g.checked;
    }
}

fn glu_conv(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for i in 0..SHAPES {
        let pad = if i % 2 == 0 { FreqPadding::Same } else { FreqPadding::Valid };
        let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let (time, freq) = (rng.gen_range(3..=6), rng.gen_range(4..=8));
        let kt = [1, 3][rng.gen_range(0..2)];
        let kf = match pad {
            FreqPadding::Same => [1, 3][rng.gen_range(0..2)],
            FreqPadding::Valid => rng.gen_range(1..=3),
        };
        let f_out = match pad {
            FreqPadding::Same => freq,
            FreqPadding::Valid => freq - kf + 1,
        };
        let x = arr(rng, &[b, ci, time, freq], 1.0);
        let mut ps = ParamSet::new();
        for name in ["w", "v"] {
            ps.insert(name, arr(rng, &[co, ci, kt, kf], 0.6), ParamKind::Weight);
        }
        for name in ["b", "c"] {
            ps.insert(name, arr(rng, &[co], 0.3), ParamKind::Weight);
        }
        let wts = weights(rng, b * co * time * f_out);
        let by_params = |tape: &mut Tape<f64>, ps: &ParamSet<f64>| -> Result<Var, NnError> {
            let xv = tape.input(x.clone())?;
            let [w, v, bb, c] = ["w", "v", "b", "c"].map(|n| tape.param(ps, n));
            let y = tape.glu_conv(xv, w?, bb?, v?, c?, pad)?;
            tape.weighted_sum(y, wts.clone())
        };
        t.add(check_params(&ps, by_params, H)?);
        let by_input = |tape: &mut Tape<f64>, xv: Var| -> Result<Var, NnError> {
            let [w, v, bb, c] = ["w", "v", "b", "c"].map(|n| tape.input(ps.value(n).unwrap().clone()));
            let y = tape.glu_conv(xv, w?, bb?, v?, c?, pad)?;
            tape.weighted_sum(y, wts.clone())
        };
        t.add(check_input(&x, by_input, H)?);
        t.shapes += 1;
    }
    Ok(())
}

fn max_pool(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..SHAPES {
        let (b, c, time, freq) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(5..=12));
        let pool = rng.gen_range(2..=4);
        let x = arr(rng, &[b, c, time, freq], 1.0);
        let wts = weights(rng, b * c * time * freq.div_ceil(pool));
        let build = |tape: &mut Tape<f64>, xv: Var| -> Result<Var, NnError> {
            let y = tape.max_pool_freq(xv, pool)?;
            tape.weighted_sum(y, wts.clone())
        };
        t.add(check_input(&x, build, H)?);
        t.shapes += 1;
    }
    Ok(())
}

/// A GRU unrolled over the time axis of a `(batch, in, steps, 1)` input, as
/// the target readout uses it.
fn gru(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..SHAPES {
        let (b, inp, hid, steps) = (rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5), rng.gen_range(1..=3));
        let mut ps = ParamSet::new();
        for name in GRU_WEIGHTS {
            let rows = if name.starts_with("w_i") { inp } else { hid };
            ps.insert(format!("gru.{name}"), arr(rng, &[rows, hid], 0.8), ParamKind::Weight);
        }
        for name in GRU_BIASES {
            ps.insert(format!("gru.{name}"), arr(rng, &[hid], 0.3), ParamKind::Weight);
        }
        let x = arr(rng, &[b, inp, steps, 1], 1.0);
        let h0 = arr(rng, &[b, hid], 0.8);
        let wts = weights(rng, b * hid);
        let unroll = |tape: &mut Tape<f64>, ps: &ParamSet<f64>, xv: Var, hv: Var| -> Result<Var, NnError> {
            let mut h = hv;
            for s in 0..steps {
                let xt = tape.time_slice(xv, s)?;
                h = gru_step(tape, ps, xt, h)?;
            }
            tape.weighted_sum(h, wts.clone())
        };
        t.add(check_params(
            &ps,
            |tape, ps| {
                let (xv, hv) = (tape.input(x.clone())?, tape.input(h0.clone())?);
                unroll(tape, ps, xv, hv)
            },
            H,
        )?);
        t.add(check_input(
            &x,
            |tape, xv| {
                let hv = tape.input(h0.clone())?;
                unroll(tape, &ps, xv, hv)
            },
            H,
        )?);
        t.add(check_input(
            &h0,
            |tape, hv| {
                let xv = tape.input(x.clone())?;
                unroll(tape, &ps, xv, hv)
            },
            H,
        )?);
        t.shapes += 1;
    }
    Ok(())
}

fn batch_norm(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..SHAPES {
        let (b, c, time, freq) = (rng.gen_range(2..=3), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let x = arr(rng, &[b, c, time, freq], 1.5);
        let mut ps = ParamSet::new();
        let gamma = NdArray::from_vec(&[c], (0..c).map(|_| rng.gen_range(0.5..1.5)).collect())?;
        ps.insert("gamma", gamma, ParamKind::Weight);
        ps.insert("beta", arr(rng, &[c], 0.5), ParamKind::Weight);
        let wts = weights(rng, x.len());
        t.add(check_params(
            &ps,
            |tape, ps| {
                let xv = tape.input(x.clone())?;
                let (g, be) = (tape.param(ps, "gamma")?, tape.param(ps, "beta")?);
                let (y, _) = tape.batch_norm(xv, g, be, None)?;
                tape.weighted_sum(y, wts.clone())
            },
            H,
        )?);
        t.add(check_input(
            &x,
            |tape, xv| {
                let g = tape.input(ps.value("gamma").unwrap().clone())?;
                let be = tape.input(ps.value("beta").unwrap().clone())?;
                let (y, _) = tape.batch_norm(xv, g, be, None)?;
                tape.weighted_sum(y, wts.clone())
            },
            H,
        )?);
        t.shapes += 1;
    }
    Ok(())
}

fn dense(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..SHAPES {
        let (b, inp, out) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=4));
        let x = arr(rng, &[b, inp], 1.0);
        let mut ps = ParamSet::new();
        ps.insert("w", arr(rng, &[inp, out], 1.0), ParamKind::Weight);
        ps.insert("b", arr(rng, &[out], 0.5), ParamKind::Weight);
        let wts = weights(rng, b * out);
        let layer = |tape: &mut Tape<f64>, xv: Var, w: Var, bb: Var| -> Result<Var, NnError> {
            let m = tape.matmul(xv, w)?;
            let y = tape.add_bias(m, bb)?;
            tape.weighted_sum(y, wts.clone())
        };
        t.add(check_params(
            &ps,
            |tape, ps| {
                let xv = tape.input(x.clone())?;
                let (w, bb) = (tape.param(ps, "w")?, tape.param(ps, "b")?);
                layer(tape, xv, w, bb)
            },
            H,
        )?);
        t.add(check_input(
            &x,
            |tape, xv| {
                let w = tape.input(ps.value("w").unwrap().clone())?;
                let bb = tape.input(ps.value("b").unwrap().clone())?;
                layer(tape, xv, w, bb)
            },
            H,
        )?);
        t.shapes += 1;
    }
    Ok(())
}

/// Softmax and cross-entropy on raw logits, and the source readout
/// (time-frequency mean, dense, softmax, cross-entropy) on a feature map.
fn softmax_bce(rng: &mut ChaCha8Rng, t: &mut Tally) -> Result<()> {
    for _ in 0..SHAPES {
        let b = rng.gen_range(1..=5);
        let logits = arr(rng, &[b, 2], 3.0);
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
        t.add(check_input(
            &logits,
            |tape, z| {
                let p = tape.softmax2(z)?;
                tape.bce(p, &targets, PROB_FLOOR)
            },
            H,
        )?);
        let (c, time, freq) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=3));
        let feat = arr(rng, &[b, c, time, freq], 1.0);
        let mut ps = ParamSet::new();
        ps.insert("w", arr(rng, &[c, 2], 1.5), ParamKind::Weight);
        ps.insert("b", arr(rng, &[2], 0.5), ParamKind::Weight);
        let head = |tape: &mut Tape<f64>, ps: &ParamSet<f64>, fv: Var| -> Result<Var, NnError> {
            let m = tape.mean_time_freq(fv)?;
            let (w, bb) = (tape.param(ps, "w")?, tape.param(ps, "b")?);
            let z = tape.matmul(m, w)?;
            let z = tape.add_bias(z, bb)?;
            let p = tape.softmax2(z)?;
            tape.bce(p, &targets, PROB_FLOOR)
        };
        t.add(check_params(
            &ps,
            |tape, ps| {
                let fv = tape.input(feat.clone())?;
                head(tape, ps, fv)
            },
            H,
        )?);
        t.add(check_input(&feat, |tape, fv| head(tape, &ps, fv), H)?);
        t.shapes += 1;
    }
    Ok(())
}

type OpCheck = fn(&mut ChaCha8Rng, &mut Tally) -> Result<()>;

pub fn run() -> Result<String> {
    let start = Instant::now();
    let ops: [(&str, OpCheck); 6] = [
        ("glu-conv", glu_conv),
        ("max-pool", max_pool),
        ("gru", gru),
        ("batch-norm", batch_norm),
        ("dense", dense),
        ("softmax+bce", softmax_bce),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut parts = Vec::new();
    let mut total = 0;
    let mut worst: f64 = 0.0;
    for (name, op) in ops {
        let mut t = Tally::default();
        op(&mut rng, &mut t)?;
        ensure!(t.shapes >= 5, "{name}: only {} shapes", t.shapes);
        ensure!(t.worst < TOL, "{name}: max relative error {:.3e} >= {TOL:e}", t.worst);
        total += t.checked;
        worst = worst.max(t.worst);
        parts.push(format!("{name} {:.1e}", t.worst));
    }
    let took = start.elapsed();
    ensure!(took < BUDGET, "took {took:?}, budget {BUDGET:?}");
    Ok(format!(
        "{total} derivatives, max rel err {worst:.1e} [{}]",
        parts.join(", ")
    ))
}
