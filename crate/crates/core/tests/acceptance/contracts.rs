use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::audio::{AudioClip, PIPELINE_RATE};
use vocalis_core::eval::f_score;
use vocalis_core::features::StftConfig;
use vocalis_core::models::{conv_stack, Arch, LayerId, Model, ModelConfig};
use vocalis_core::nn::{Adam, AdamConfig, FreqPadding, NdArray, Tape};
use vocalis_core::synth::toy::{toy_music, toy_speech};
use vocalis_core::synth::{detect_endpoints, measured_snr_db, mix_at_snr, VadConfig};
use vocalis_core::train::{apply_transfer, train_step, LayerSelector, TransferMode, TransferPlan};

pub fn f_measure() -> Result<String> {
    let cases = [(0.861, 0.932, 0.8951), (0.901, 0.960, 0.9296)];
    let mut got = Vec::new();
    for (p, r, want) in cases {
        let f = f_score(p, r);
        ensure!((f - want).abs() <= 5e-4, "F({p}, {r}) = {f:.5}, expected {want} ± 0.0005");
        got.push(format!("F({p}, {r}) = {f:.4}"));
    }
    Ok(got.join(", "))
}

fn peak_normalized(clip: &AudioClip, peak: f32) -> Result<AudioClip> {
    let m = clip.samples().iter().fold(0.0f32, |a, s| a.max(s.abs()));
    let s = clip.samples().iter().map(|v| v * peak / m).collect();
    Ok(AudioClip::new(s, clip.sample_rate())?)
}

pub fn mixing() -> Result<String> {
    let geom = StftConfig::default().geometry(PIPELINE_RATE);
    let vad = VadConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut mixes, mut rescaled) = (0.0f64, 0, 0);
    for pair in 0..8u64 {
        let mut speech = toy_speech(11, pair, 2.0);
        if pair % 4 == 3 {
            // near full scale, so low SNRs push the sum past 1
            speech = peak_normalized(&speech, 0.98)?;
        }
        let music = toy_music(11, 100 + pair, 3.0);
        let labels = detect_endpoints(&speech, &vad)?;
        for snr in [-6.0, 0.0, 6.0] {
            let offset = rng.gen_range(0..music.len());
            let m = mix_at_snr(&speech, &music, &labels, geom, snr, offset)
                .with_context(|| format!("pair {pair} at {snr} dB"))?;
            ensure!(m.labels == labels, "pair {pair} at {snr} dB: labels changed");
            let sum_err = m
                .mixture
                .samples()
                .iter()
                .zip(m.speech.iter().zip(&m.music))
                .map(|(&x, (&s, &u))| (x - (s + u)).abs())
                .fold(0.0f32, f32::max);
            ensure!(sum_err <= 1e-6, "pair {pair} at {snr} dB: mixture differs from its parts by {sum_err:e}");
            let got = measured_snr_db(&m.speech, &m.music, &labels, geom);
            ensure!((got - snr).abs() <= 0.1, "pair {pair}: asked {snr} dB, measured {got:.3} dB");
            worst = worst.max((got - snr).abs());
            mixes += 1;
            rescaled += (m.rescale < 1.0) as usize;
        }
    }
    ensure!(rescaled > 0, "no mixture exercised the clipping rescale");
    Ok(format!("{mixes} mixtures ({rescaled} rescaled after clipping), max SNR error {worst:.4} dB"))
}

fn bits(a: &NdArray<f32>) -> Vec<u32> {
    a.data().iter().map(|v| v.to_bits()).collect()
}

/// Scalars in `W`, `V`, `b`, `c` of each layer, listed from the layer shapes.
const LAYER_COUNTS: [usize; 3] = [
    2 * (16 * 1 * 3 * 3) + 2 * 16,
    2 * (32 * 16 * 3 * 3) + 2 * 32,
    2 * (16 * 32 * 3 * 3) + 2 * 16,
];
const TARGET_TOTAL: usize = 23_842;

pub fn transfer() -> Result<String> {
    let cfg = ModelConfig::default();
    let mut source = Model::new(Arch::Source, cfg.clone(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mean: Vec<f64> = (0..cfg.mel_bands).map(|_| rng.gen_range(-60.0..-20.0)).collect();
    let std: Vec<f64> = (0..cfg.mel_bands).map(|_| rng.gen_range(2.0..9.0)).collect();
    source.set_standardizer(&mean, &std)?;
    let fresh = Model::new(Arch::Target, cfg.clone(), 13)?;
    ensure!(fresh.total_params() == TARGET_TOTAL, "target has {} parameters", fresh.total_params());
    for l in LayerId::ALL {
        ensure!(cfg.conv_param_count(l) == LAYER_COUNTS[l.0], "{l} count {}", cfg.conv_param_count(l));
    }

    let selections: [(&[LayerSelector], &[usize]); 5] = [
        (&[LayerSelector::L1], &[0]),
        (&[LayerSelector::L2], &[1]),
        (&[LayerSelector::L3], &[2]),
        (&[LayerSelector::L1, LayerSelector::L2], &[0, 1]),
        (&[LayerSelector::All], &[0, 1, 2]),
    ];
    let batch = 4;
    let block = cfg.context_frames * cfg.mel_bands;
    let mut steps_run = 0;
    for (sel, layers) in selections {
        for mode in [TransferMode::Fixed, TransferMode::FineTune] {
            let plan = TransferPlan::new(sel.to_vec(), mode)?;
            let tag = plan.tag();
            let mut target = fresh.clone();
            apply_transfer(&source, &mut target, &plan)?;
            let moved: Vec<String> = layers.iter().flat_map(|&i| LayerId(i).conv_params()).collect();
            for (name, p) in target.params.iter() {
                let want = if moved.iter().any(|m| m == name) || name.starts_with("input.") {
                    source.params.value(name)?
                } else {
                    fresh.params.value(name)?
                };
                ensure!(bits(&p.value) == bits(want), "{tag}: {name} is not a bit-exact copy");
            }
            let frozen: usize = layers.iter().map(|&i| LAYER_COUNTS[i]).sum();
            let want = match mode {
                TransferMode::Fixed => TARGET_TOTAL - frozen,
                TransferMode::FineTune => TARGET_TOTAL,
            };
            ensure!(target.trainable_params() == want, "{tag}: {} trainable, expected {want}", target.trainable_params());

            let steps = if mode == TransferMode::Fixed { 100 } else { 10 };
            let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
            let mut step_rng = ChaCha8Rng::seed_from_u64(14);
            for _ in 0..steps {
                let blocks: Vec<f32> = (0..batch * block).map(|_| step_rng.gen_range(-70.0f32..-10.0)).collect();
                let targets: Vec<usize> = (0..batch).map(|_| step_rng.gen_range(0..2)).collect();
                train_step(&mut target, &mut opt, &blocks, &targets, &mut step_rng)?;
            }
            steps_run += steps;
            if mode == TransferMode::Fixed {
                for name in &moved {
                    let same = bits(target.params.value(name)?) == bits(source.params.value(name)?);
                    ensure!(same, "{tag}: {name} changed after {steps} steps");
                }
            } else {
                let w = LayerId(layers[0]).conv_params()[0].clone();
                ensure!(
                    bits(target.params.value(&w)?) != bits(source.params.value(&w)?),
                    "{tag}: {w} did not train"
                );
            }
            ensure!(
                bits(target.params.value("head.w")?) != bits(fresh.params.value("head.w")?),
                "{tag}: head did not train"
            );
        }
    }
    Ok(format!(
        "10 plans copied bit-exactly, trainable counts match {TARGET_TOTAL} minus {LAYER_COUNTS:?}, {steps_run} optimizer steps"
    ))
}

pub fn stack_shapes() -> Result<String> {
    let mut lines = Vec::new();
    for pad in [FreqPadding::Same, FreqPadding::Valid] {
        let cfg = ModelConfig {
            freq_padding: pad,
            context_frames: 25,
            mel_bands: 64,
            ..ModelConfig::default()
        };
        ensure!(cfg.pools == [4, 4, 4], "pools {:?}", cfg.pools);
        let model = Model::new(Arch::Source, cfg.clone(), 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = 2;
        let x: Vec<f32> = (0..batch * 25 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.input(model.prepare_input(&x, batch)?)?;
        let (glus, outs, _) = conv_stack(&mut tape, &cfg, &model.params, xv, LayerId(2), false)?;
        let extents = cfg.freq_extents()?;
        let mut freqs = Vec::new();
        for (i, (&g, &o)) in glus.iter().zip(&outs).enumerate() {
            let (gs, os) = (tape.value(g).shape().to_vec(), tape.value(o).shape().to_vec());
            ensure!(gs[2] == 25 && os[2] == 25, "{pad:?} L{}: time {} / {}", i + 1, gs[2], os[2]);
            ensure!(os[1] == cfg.channels[i], "{pad:?} L{}: {} channels", i + 1, os[1]);
            ensure!(os[3] == extents[i + 1], "{pad:?} L{}: freq {} vs {}", i + 1, os[3], extents[i + 1]);
            freqs.push(os[3]);
        }
        ensure!(freqs == [16, 4, 1], "{pad:?}: frequency extents {freqs:?}, expected [16, 4, 1]");
        lines.push(format!("{pad:?} 64 -> {}", freqs.iter().map(usize::to_string).collect::<Vec<_>>().join(" -> ")));
    }
    Ok(format!("T = 25 kept through L1-L3; {}", lines.join("; ")))
}
