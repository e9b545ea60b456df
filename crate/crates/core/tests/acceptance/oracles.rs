use anyhow::{ensure, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::eval::{prf, score, ConfusionCounts};
use vocalis_core::labels::FrameLabelTrack;
use vocalis_core::nn::{conv2d, glu_conv_forward, pool_freq, FreqPadding, GluConvLayer, NdArray};

const INSTANCES: usize = 100;
const TOL: f64 = 1e-6;

fn arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    let n = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct zero-padded cross-correlation, time always same-padded.
fn conv_oracle(x: &NdArray<f64>, w: &NdArray<f64>, bias: &NdArray<f64>, pad: FreqPadding) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (b, ci, t, f) = (s[0], s[1], s[2], s[3]);
    let ws = w.shape();
    let (co, kt, kf) = (ws[0], ws[2], ws[3]);
    let pt = (kt / 2) as isize;
    let (pf, fo) = match pad {
        FreqPadding::Same => ((kf / 2) as isize, f),
        FreqPadding::Valid => (0, f - kf + 1),
    };
    let xd = |n: usize, c: usize, tt: isize, ff: isize| -> f64 {
        if tt < 0 || ff < 0 || tt >= t as isize || ff >= f as isize {
            0.0
        } else {
            x.data()[((n * ci + c) * t + tt as usize) * f + ff as usize]
        }
    };
    let mut out = vec![0.0; b * co * t * fo];
    for n in 0..b {
        for o in 0..co {
            for tt in 0..t {
                for ff in 0..fo {
                    let mut acc = bias.data()[o];
                    for c in 0..ci {
                        for i in 0..kt {
                            for j in 0..kf {
                                let wv = w.data()[((o * ci + c) * kt + i) * kf + j];
                                acc += wv * xd(n, c, tt as isize + i as isize - pt, ff as isize + j as isize - pf);
                            }
                        }
                    }
                    out[((n * co + o) * t + tt) * fo + ff] = acc;
                }
            }
        }
    }
    (vec![b, co, t, fo], out)
}

fn pool_oracle(x: &NdArray<f64>, p: usize) -> (Vec<usize>, Vec<f64>) {
    let s = x.shape();
    let (rows, f) = (s[0] * s[1] * s[2], s[3]);
    let fo = f.div_ceil(p);
    let mut out = Vec::with_capacity(rows * fo);
    for r in 0..rows {
        for j in 0..fo {
            let window = &x.data()[r * f + j * p..r * f + ((j + 1) * p).min(f)];
            out.push(window.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    (vec![s[0], s[1], s[2], fo], out)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn convs(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let pad = if i % 2 == 0 { FreqPadding::Same } else { FreqPadding::Valid };
        let (b, ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (t, f) = (rng.gen_range(1..=7), rng.gen_range(3..=12));
        let kt = [1, 3, 5][rng.gen_range(0..3)];
        let kf = match pad {
            FreqPadding::Same => [1, 3, 5][rng.gen_range(0..3)],
            FreqPadding::Valid => rng.gen_range(1..=f.min(5)),
        };
        let x = arr(rng, &[b, ci, t, f]);
        let (w, v) = (arr(rng, &[co, ci, kt, kf]), arr(rng, &[co, ci, kt, kf]));
        let (bb, c) = (arr(rng, &[co]), arr(rng, &[co]));

        let got = conv2d(&x, &w, &bb, pad)?;
        let (shape, want) = conv_oracle(&x, &w, &bb, pad);
        ensure!(got.shape() == shape, "conv shape {:?}, oracle {shape:?}", got.shape());
        worst = worst.max(max_diff(got.data(), &want));

        let got = glu_conv_forward(&x, &GluConvLayer::new(w.clone(), v.clone(), bb.clone(), c.clone())?, pad)?;
        let (_, gate) = conv_oracle(&x, &v, &c, pad);
        let want: Vec<f64> = want.iter().zip(&gate).map(|(&a, &g)| a * sigmoid(g)).collect();
        ensure!(got.shape() == shape, "GLU shape {:?}, oracle {shape:?}", got.shape());
        worst = worst.max(max_diff(got.data(), &want));
    }
    ensure!(worst <= TOL, "conv max abs difference {worst:.3e}");
    Ok(worst)
}

fn pools(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let shape = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=17)];
        let p = rng.gen_range(1..=5);
        let x = arr(rng, &shape);
        let got = pool_freq(&x, p)?;
        let (s, want) = pool_oracle(&x, p);
        ensure!(got.shape() == s, "pool shape {:?}, oracle {s:?} (F {}, pool {p})", got.shape(), shape[3]);
        worst = worst.max(max_diff(got.data(), &want));
    }
    ensure!(worst <= TOL, "pool max abs difference {worst:.3e}");
    Ok(worst)
}

fn counts(rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..INSTANCES {
        let n = rng.gen_range(0..200);
        let density = rng.gen_range(0.0..1.0);
        let track = |rng: &mut ChaCha8Rng| FrameLabelTrack::new((0..n).map(|_| rng.gen_bool(density)).collect());
        let (pred, truth) = (track(rng), track(rng));
        let got = score(&pred, &truth)?;
        let mut want = ConfusionCounts::default();
        for t in 0..n {
            let (p, g) = (pred.get(t), truth.get(t));
            want.n_tp += (p && g) as u64;
            want.n_fp += (p && !g) as u64;
            want.n_fn += (!p && g) as u64;
            want.n_tn += (!p && !g) as u64;
        }
        ensure!(got == want, "counts {got:?}, oracle {want:?}");
        if want.n_tp > 0 {
            let (tp, fp, fn_) = (want.n_tp as f64, want.n_fp as f64, want.n_fn as f64);
            let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
            let m = prf(&got);
            ensure!(
                (m.precision - p).abs() <= 1e-12 && (m.recall - r).abs() <= 1e-12 && (m.f - 2.0 * p * r / (p + r)).abs() <= 1e-12,
                "P/R/F {m:?} for {want:?}"
            );
        }
    }
    Ok(())
}

pub fn run() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let c = convs(&mut rng)?;
    let p = pools(&mut rng)?;
    counts(&mut rng)?;
    Ok(format!(
        "{INSTANCES} instances each: conv/GLU max diff {c:.1e}, pooling {p:.1e}, counts exact"
    ))
}
