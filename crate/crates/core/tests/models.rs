use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::models::{
    conv_stack, decide, forward, loss, Arch, LayerId, Model, ModelConfig, ModelError, GRU_BIASES, GRU_WEIGHTS,
};
use vocalis_core::nn::{softmax2, FreqPadding, NdArray, Tape};

fn random_blocks(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * cfg.context_frames * cfg.mel_bands)
        .map(|_| rng.gen_range(-3.0f32..3.0))
        .collect()
}

/// Sum of extents, listed array by array from the layer description.
fn hand_count(arch: Arch) -> usize {
    let l1 = 2 * (16 * 1 * 3 * 3) + 2 * 16;
    let l2 = 2 * (32 * 16 * 3 * 3) + 2 * 32;
    let l3 = 2 * (16 * 32 * 3 * 3) + 2 * 16;
    let norm = 2 * 16 + 2 * 32 + 2 * 16;
    match arch {
        Arch::Source => l1 + l2 + l3 + norm + 16 * 2 + 2,
        Arch::Target => {
            let gru = 3 * (16 * 32) + 3 * (32 * 32) + 6 * 32;
            l1 + l2 + l3 + norm + gru + 32 * 2 + 2
        }
    }
}

#[test]
fn parameter_counts() {
    let cfg = ModelConfig::default();
    for arch in [Arch::Source, Arch::Target] {
        let m = Model::new(arch, cfg.clone(), 1).unwrap();
        assert_eq!(m.total_params(), hand_count(arch));
        assert!((15_000..=25_000).contains(&m.total_params()), "{arch}: {}", m.total_params());
        assert_eq!(m.trainable_params(), m.total_params());
    }
    assert_eq!(hand_count(Arch::Source), 19_010);
    assert_eq!(hand_count(Arch::Target), 23_842);
    for l in LayerId::ALL {
        let m = Model::new(Arch::Source, cfg.clone(), 1).unwrap();
        let n: usize = l.conv_params().iter().map(|p| m.params.value(p).unwrap().len()).sum();
        assert_eq!(n, cfg.conv_param_count(l));
    }
}

#[test]
fn stack_keeps_time_and_pools_frequency_to_one() {
    for pad in [FreqPadding::Same, FreqPadding::Valid] {
        let cfg = ModelConfig {
            freq_padding: pad,
            ..ModelConfig::default()
        };
        let m = Model::new(Arch::Source, cfg.clone(), 2).unwrap();
        let x = m.prepare_input(&random_blocks(&cfg, 3, 1), 3).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x).unwrap();
        let (glu, outs, _) = conv_stack(&mut tape, &cfg, &m.params, xv, LayerId(2), false).unwrap();
        let f = cfg.freq_extents().unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(glu[i]).shape()[2], 25);
            assert_eq!(tape.value(outs[i]).shape(), [3, cfg.channels[i], 25, f[i + 1]]);
        }
        assert_eq!(tape.value(outs[2]).shape(), [3, 16, 25, 1]);
    }
    assert_eq!(ModelConfig::default().freq_extents().unwrap(), [64, 16, 4, 1]);
}

#[test]
fn probabilities_and_batch_order() {
    let cfg = ModelConfig::default();
    for arch in [Arch::Source, Arch::Target] {
        let m = Model::new(arch, cfg.clone(), 3).unwrap();
        let blocks = random_blocks(&cfg, 5, 9);
        let p = m.predict_proba(&blocks, 5).unwrap();
        assert_eq!(p.len(), 5);
        for r in &p {
            assert!(r[0] > 0.0 && r[1] > 0.0);
            assert!((r[0] + r[1] - 1.0).abs() < 1e-6);
        }
        let per = cfg.context_frames * cfg.mel_bands;
        for i in 0..5 {
            let single = m.predict_proba(&blocks[i * per..(i + 1) * per], 1).unwrap();
            assert!((single[0][1] - p[i][1]).abs() < 1e-6);
        }
    }
}

#[test]
fn decision_rule() {
    assert!(decide([0.3, 0.7]));
    assert!(!decide([0.7, 0.3]));
    assert!(!decide([0.5, 0.5]));
}

#[test]
fn wrong_block_shape_is_an_error() {
    let cfg = ModelConfig::default();
    let m = Model::new(Arch::Source, cfg, 3).unwrap();
    assert!(matches!(m.predict_proba(&[0.0; 100], 1), Err(ModelError::BlockShape { .. })));
}

#[test]
fn zero_recurrence_gives_constant_output() {
    let cfg = ModelConfig::default();
    let mut m = Model::new(Arch::Target, cfg.clone(), 4).unwrap();
    for n in GRU_WEIGHTS.iter().chain(&GRU_BIASES) {
        let name = format!("gru.{n}");
        let shape = m.params.value(&name).unwrap().shape().to_vec();
        m.params.set_value(&name, NdArray::zeros(&shape)).unwrap();
    }
    m.params.set_value("head.b", NdArray::from_vec(&[2], vec![0.3, -0.2]).unwrap()).unwrap();
    let p = m.predict_proba(&random_blocks(&cfg, 6, 5), 6).unwrap();
    let want = softmax2(&NdArray::from_vec(&[1, 2], vec![0.3f32, -0.2]).unwrap()).unwrap();
    for r in &p {
        assert_eq!(r[0], p[0][0]);
        assert!((r[1] - want.data()[1]).abs() < 1e-6);
    }
}

#[test]
fn recurrent_input_is_time_by_channels() {
    let cfg = ModelConfig::default();
    let m = Model::new(Arch::Target, cfg.clone(), 4).unwrap();
    let x = m.prepare_input(&random_blocks(&cfg, 2, 5), 2).unwrap();
    let mut tape = Tape::new();
    let xv = tape.input(x).unwrap();
    let out = forward(&mut tape, Arch::Target, &cfg, &m.params, xv, None).unwrap();
    // (batch, channels, T, 1) read as a length-T sequence of 16-vectors
    assert_eq!(tape.value(*out.layers.last().unwrap()).shape(), [2, 16, 25, 1]);
}

#[test]
fn same_stack_for_both_architectures() {
    let cfg = ModelConfig::default();
    let src = Model::new(Arch::Source, cfg.clone(), 7).unwrap();
    let mut tgt = Model::new(Arch::Target, cfg.clone(), 8).unwrap();
    for (name, p) in src.params.iter() {
        if !name.starts_with("head") {
            tgt.params.set_value(name, p.value.clone()).unwrap();
        }
    }
    let x = src.prepare_input(&random_blocks(&cfg, 2, 6), 2).unwrap();
    let run = |m: &Model| {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let (_, outs, _) = conv_stack(&mut tape, &cfg, &m.params, xv, LayerId(2), false).unwrap();
        tape.value(outs[2]).clone()
    };
    let (a, b) = (run(&src), run(&tgt));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradient_reaches_every_conv_parameter() {
    let cfg = ModelConfig::default();
    for seed in 0..5 {
        let mut m = Model::new(Arch::Target, cfg.clone(), 100 + seed).unwrap();
        let x = m.prepare_input(&random_blocks(&cfg, 4, seed), 4).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = forward(&mut tape, Arch::Target, &cfg, &m.params, xv, Some(&mut rng)).unwrap();
        let l = loss(&mut tape, &out, &[0, 1, 1, 0]).unwrap();
        m.params.zero_grads();
        tape.backward_into(l, &mut m.params).unwrap();
        for layer in LayerId::ALL {
            for name in layer.conv_params() {
                let g = &m.params.get(&name).unwrap().grad;
                let zeros = g.data().iter().filter(|v| **v == 0.0).count();
                assert_eq!(zeros, 0, "seed {seed}: {name} has {zeros} zero gradient entries");
            }
        }
    }
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::default();
    let m = Model::new(Arch::Target, cfg.clone(), 11).unwrap();
    let path = dir.path().join("t.vckp");
    m.save(&path).unwrap();
    let back = Model::load(&path, cfg.clone()).unwrap();
    assert_eq!(back.arch, Arch::Target);
    for ((n1, a), (n2, b)) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.value, b.value);
    }
    let other = ModelConfig {
        channels: [8, 16, 16],
        ..cfg
    };
    assert!(matches!(Model::load(&path, other), Err(ModelError::Mismatch(_))));
}

#[test]
fn config_toml_round_trip() {
    let cfg = ModelConfig {
        context_frames: 15,
        freq_padding: FreqPadding::Valid,
        ..ModelConfig::default()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert!(text.contains("channels = [16, 32, 16]"));
    let back: ModelConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let bad = ModelConfig {
        context_frames: 24,
        ..ModelConfig::default()
    };
    assert!(Model::new(Arch::Source, bad, 0).is_err());
    let bad = ModelConfig {
        pools: [2, 2, 2],
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shifting_logits_keeps_decision(a in -20.0f64..20.0, b in -20.0f64..20.0, c in -50.0f64..50.0) {
        let p = softmax2(&NdArray::from_vec(&[1, 2], vec![a, b]).unwrap()).unwrap();
        let q = softmax2(&NdArray::from_vec(&[1, 2], vec![a + c, b + c]).unwrap()).unwrap();
        prop_assume!((a - b).abs() > 1e-9);
        prop_assert_eq!(decide([p.data()[0], p.data()[1]]), decide([q.data()[0], q.data()[1]]));
    }

    #[test]
    fn blocks_in_predictions_out(frames in 1usize..40, half in 0usize..4) {
        use vocalis_core::features::LogMelSpectrogram;
        use vocalis_core::labels::FrameLabelTrack;
        use vocalis_core::models::make_blocks;
        let cfg = ModelConfig { context_frames: 2 * half + 1, channels: [2, 2, 2], ..ModelConfig::default() };
        let m = Model::new(Arch::Source, cfg.clone(), 1).unwrap();
        let s = LogMelSpectrogram::from_values(vec![0.5; frames * 64], frames, 64, 0.02, "x").unwrap();
        let blocks = make_blocks(&s, &FrameLabelTrack::all(true, frames), cfg.context()).unwrap();
        let flat: Vec<f32> = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        prop_assert_eq!(m.predict(&flat, blocks.len()).unwrap().len(), frames);
    }
}
