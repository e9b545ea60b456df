use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::data::LabeledClip;
use vocalis_core::features::LogMelSpectrogram;
use vocalis_core::labels::FrameLabelTrack;
use vocalis_core::models::{Arch, LayerId, Model, ModelConfig};
use vocalis_core::nn::{Adam, AdamConfig};
use vocalis_core::synth::{Split, Task};
use vocalis_core::train::*;

const BANDS: usize = 64;

/// On frames carry a bright band near mel 20; off frames are plain noise.
fn clip(id: &str, frames: usize, seed: u64) -> LabeledClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..frames).map(|t| (t / 15) % 2 == 1).collect();
    let mut values = vec![0.0; frames * BANDS];
    for t in 0..frames {
        for m in 0..BANDS {
            let mut v = -8.0 + rng.gen::<f64>();
            if labels[t] && (18..24).contains(&m) {
                v += 6.0;
            }
            values[t * BANDS + m] = v;
        }
    }
    LabeledClip {
        id: id.into(),
        group: id.into(),
        split: Split::Train,
        task: Task::Source,
        spec: LogMelSpectrogram::from_values(values, frames, BANDS, 0.02, id).unwrap(),
        labels: FrameLabelTrack::new(labels),
    }
}

fn clips(n: usize, base: u64) -> Vec<LabeledClip> {
    (0..n).map(|i| clip(&format!("c{i}"), 60, base + i as u64)).collect()
}

fn small_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        patience: 2,
        batch_size: 16,
        blocks_per_clip: Some(16),
        seed,
        ..Default::default()
    }
}

#[test]
fn zero_epochs_is_an_error() {
    let tr = clips(2, 0);
    let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
    let err = train_source(&tr, &tr, &ModelConfig::default(), &cfg).unwrap_err();
    assert!(matches!(err, TrainError::NoTraining));
    assert!(err.to_string().contains("no training performed"));
}

#[test]
fn training_is_deterministic_and_learns() {
    let (tr, va) = (clips(6, 0), clips(2, 100));
    let cfg = TrainConfig { max_epochs: 5, patience: 5, blocks_per_clip: Some(40), ..small_cfg(4) };
    let a = train_source(&tr, &va, &ModelConfig::default(), &cfg).unwrap();
    let b = train_source(&tr, &va, &ModelConfig::default(), &cfg).unwrap();
    assert_eq!(a.record.without_timing(), b.record.without_timing());
    for (n, p) in a.model.params.iter() {
        assert_eq!(p.value, b.model.params.get(n).unwrap().value, "{n}");
    }
    assert!(a.record.best_validation.f > 0.9, "{:?}", a.record.best_validation);
}

#[test]
fn early_stopping_keeps_first_best() {
    let (tr, va) = (clips(4, 7), clips(2, 200));
    let cfg = TrainConfig { max_epochs: 6, patience: 1, ..small_cfg(9) };
    let r = train_source(&tr, &va, &ModelConfig::default(), &cfg).unwrap().record;
    let fs: Vec<f64> = r.epochs.iter().map(|e| e.validation.f).collect();
    let max = fs.iter().copied().fold(f64::MIN, f64::max);
    let first = fs.iter().position(|&f| f == max).unwrap() + 1;
    assert_eq!(r.best_epoch, first);
    assert_eq!(r.best_validation.f, max);
    assert!(r.epochs.len() <= (r.best_epoch + cfg.patience).min(cfg.max_epochs));
    assert!(r.epochs.len() == cfg.max_epochs || r.epochs.len() == r.best_epoch + cfg.patience);
}

fn source() -> Model {
    let mut m = Model::new(Arch::Source, ModelConfig::default(), 21).unwrap();
    m.set_standardizer(&vec![-7.5; BANDS], &vec![1.3; BANDS]).unwrap();
    m
}

#[test]
fn transfer_copies_exactly_and_counts_trainable() {
    let cfg = ModelConfig::default();
    let src = source();
    let total = Model::new(Arch::Target, cfg.clone(), 0).unwrap().total_params();
    let conv: Vec<usize> = LayerId::ALL.iter().map(|&l| cfg.conv_param_count(l)).collect();
    for (sel, ids) in [
        (vec![LayerSelector::L1], vec![0]),
        (vec![LayerSelector::L2, LayerSelector::L3], vec![1, 2]),
        (vec![LayerSelector::All], vec![0, 1, 2]),
    ] {
        for mode in [TransferMode::Fixed, TransferMode::FineTune] {
            let mut tgt = Model::new(Arch::Target, cfg.clone(), 5).unwrap();
            let plan = TransferPlan::new(sel.clone(), mode).unwrap();
            apply_transfer(&src, &mut tgt, &plan).unwrap();
            for &i in &ids {
                for name in LayerId(i).conv_params() {
                    let (a, b) = (&src.params.get(&name).unwrap().value, &tgt.params.get(&name).unwrap().value);
                    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
            let frozen: usize = ids.iter().map(|&i| conv[i]).sum();
            let want = if mode == TransferMode::Fixed { total - frozen } else { total };
            assert_eq!(tgt.trainable_params(), want, "{}", plan.tag());
        }
    }
    // hand count: 3x3 kernels, 1 -> 16 -> 32 -> 16 channels, two banks plus two biases each
    assert_eq!(conv, vec![2 * (16 * 9) + 32, 2 * (32 * 16 * 9) + 64, 2 * (16 * 32 * 9) + 32]);
}

#[test]
fn fixed_layers_survive_optimizer_steps() {
    let cfg = ModelConfig::default();
    let src = source();
    let mut tgt = Model::new(Arch::Target, cfg.clone(), 5).unwrap();
    let plan = TransferPlan::new(vec![LayerSelector::L1, LayerSelector::L3], TransferMode::Fixed).unwrap();
    apply_transfer(&src, &mut tgt, &plan).unwrap();
    let before = tgt.params.clone();
    let data = clips(2, 300);
    let per = cfg.context_frames * BANDS;
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut buf = vec![0.0f32; 8 * per];
    for step in 0..100 {
        let mut targets = Vec::new();
        for i in 0..8 {
            let c = &data[i % 2];
            let t = (step * 7 + i * 5) % c.frames();
            vocalis_core::models::fill_block(&c.spec, t, cfg.context(), &mut buf[i * per..(i + 1) * per]);
            targets.push(usize::from(c.labels.get(t)));
        }
        train_step(&mut tgt, &mut opt, &buf, &targets, &mut rng).unwrap();
    }
    for l in [LayerId(0), LayerId(2)] {
        for name in l.conv_params() {
            let (a, b) = (&before.get(&name).unwrap().value, &tgt.params.get(&name).unwrap().value);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{name}");
        }
    }
    assert_ne!(before.get("l2.w").unwrap().value, tgt.params.get("l2.w").unwrap().value);
    assert_ne!(before.get("gru.w_hz").unwrap().value, tgt.params.get("gru.w_hz").unwrap().value);
}

#[test]
fn plan_parsing_and_tags() {
    assert_eq!(TransferPlan::default().tag(), "l1/finetune");
    assert_eq!(plan_tag(None), "none");
    assert!(TransferPlan::new(vec![], TransferMode::Fixed).is_err());
    assert!(TransferPlan::new(vec![LayerSelector::All, LayerSelector::L1], TransferMode::Fixed).is_err());
    assert_eq!("Fine-Tune".parse::<TransferMode>().unwrap(), TransferMode::FineTune);
    assert!("frozen".parse::<TransferMode>().is_err());
    let tr = clips(2, 0);
    let err = train_target(&tr, &tr, &ModelConfig::default(), None, Some(&TransferPlan::default()), &small_cfg(0));
    assert!(matches!(err, Err(TrainError::Transfer(_))));
}

#[test]
fn transfer_carries_standardizer() {
    let src = source();
    let mut tgt = Model::new(Arch::Target, ModelConfig::default(), 5).unwrap();
    apply_transfer(&src, &mut tgt, &TransferPlan::default()).unwrap();
    assert_eq!(tgt.params.value("input.mean").unwrap(), src.params.value("input.mean").unwrap());
}
