use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vocalis_core::models::{Arch, LayerId, Model, ModelConfig};
use vocalis_core::viz::{filter_pattern, FilterPatternJob, MONOTONE_TOL};

const FILTERS: usize = 10;
const STEPS: usize = 200;

pub fn run() -> Result<String> {
    let cfg = ModelConfig::default();
    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("random.vckp");
    Model::new(Arch::Source, cfg.clone(), 77)?.save(&ckpt)?;
    let model = Model::load(&ckpt, cfg.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let mut picks: Vec<(LayerId, usize)> = LayerId::ALL.iter().map(|&l| (l, 0)).collect();
    while picks.len() < FILTERS {
        let l = LayerId(rng.gen_range(0..3));
        picks.push((l, 0));
    }
    for p in &mut picks {
        p.1 = rng.gen_range(0..cfg.channels[p.0 .0]);
    }

    let mut etas = Vec::new();
    for (i, &(layer, filter)) in picks.iter().enumerate() {
        let job = FilterPatternJob {
            steps: STEPS,
            seed: i as u64,
            ..FilterPatternJob::new(layer, filter, cfg.context_frames, cfg.mel_bands)
        };
        let run = filter_pattern(&model, &job).with_context(|| format!("{layer} filter {filter}"))?;
        ensure!(run.trace.len() == STEPS + 1, "{layer} filter {filter}: trace of {}", run.trace.len());
        ensure!(run.is_monotone(MONOTONE_TOL), "{layer} filter {filter}: trace decreases at eta {}", run.eta);
        let gain = run.trace[STEPS] - run.trace[0];
        ensure!(gain > 0.0, "{layer} filter {filter}: activation did not rise ({gain:e})");
        etas.push(format!("{layer}/{filter} eta {}", run.eta));
    }
    Ok(format!("{FILTERS} filters non-decreasing over {STEPS} steps: {}", etas.join(", ")))
}
