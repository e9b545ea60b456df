use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use tempfile::TempDir;
use vocalis_core::data::{load_split, LabeledClip};
use vocalis_core::pipeline::{Pipeline, PipelineConfig, CHECKPOINT, TARGET_MANIFEST};
use vocalis_core::train::{evaluate, train_target, LayerSelector, RunRecord, TransferMode, TransferPlan};
use vocalis_core::{DatasetManifest, Model, Split, Step, Task};

const SOURCE_BUDGET: Duration = Duration::from_secs(600);
const SOURCE_MIN_F: f64 = 0.95;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const MARGIN: f64 = 0.01;

/// The default toy work dir after `train-source`, shared by criteria 6 and 7.
struct SourceRun {
    _dir: TempDir,
    pipeline: Pipeline,
    took: Duration,
}

static SOURCE: Mutex<Option<SourceRun>> = Mutex::new(None);

fn with_source<T>(f: impl FnOnce(&SourceRun) -> Result<T>) -> Result<T> {
    let mut slot = SOURCE.lock().unwrap_or_else(|p| p.into_inner());
    if slot.is_none() {
        let dir = tempfile::tempdir()?;
        let mut config = PipelineConfig::default();
        config.paths.work_dir = dir.path().join("work");
        let pipeline = Pipeline::new(config, Vec::new());
        let start = Instant::now();
        pipeline.toy()?;
        pipeline.synth()?;
        pipeline.features()?;
        pipeline.train_source()?;
        *slot = Some(SourceRun {
            _dir: dir,
            pipeline,
            took: start.elapsed(),
        });
    }
    f(slot.as_ref().expect("filled above"))
}

fn clips(p: &Pipeline, manifest: &Path, task: Task, split: Split) -> Result<Vec<LabeledClip>> {
    let m = DatasetManifest::load(manifest)?;
    let cache = p.work().join(Step::Features.dir());
    Ok(load_split(&m, task, split, &p.config.stft, Some(&cache))?)
}

fn source_model(p: &Pipeline) -> Result<Model> {
    let ckpt = p.work().join(Step::TrainSource.dir()).join(CHECKPOINT);
    Ok(Model::load(&ckpt, p.config.model.clone())?)
}

pub fn source_task() -> Result<String> {
    with_source(|run| {
        let p = &run.pipeline;
        let test = clips(p, &p.work().join(vocalis_core::pipeline::SOURCE_MANIFEST), Task::Source, Split::Test)?;
        let (report, _) = evaluate(&source_model(p)?, &test)?;
        let record: RunRecord =
            serde_json::from_slice(&std::fs::read(p.work().join(Step::TrainSource.dir()).join("run.json"))?)?;
        let f = report.overall.f;
        let mixtures = DatasetManifest::load(&p.work().join(vocalis_core::pipeline::SOURCE_MANIFEST))?.entries.len();
        let detail = format!(
            "{mixtures} mixtures, {} epochs (best {}), test F {f:.4} on {} clips, {:.0} s",
            record.epochs.len(),
            record.best_epoch,
            test.len(),
            run.took.as_secs_f64()
        );
        ensure!(record.epochs.len() <= 20, "{} epochs exceeds 20", record.epochs.len());
        ensure!(f >= SOURCE_MIN_F, "test F {f:.4} < {SOURCE_MIN_F}; {detail}");
        ensure!(run.took < SOURCE_BUDGET, "took {:?}; {detail}", run.took);
        Ok(detail)
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

pub fn transfer_vs_scratch() -> Result<String> {
    with_source(|run| {
        let p = &run.pipeline;
        let manifest = p.work().join(TARGET_MANIFEST);
        let (train, val, test) = (
            clips(p, &manifest, Task::Target, Split::Train)?,
            clips(p, &manifest, Task::Target, Split::Validation)?,
            clips(p, &manifest, Task::Target, Split::Test)?,
        );
        let songs = train.len() + val.len() + test.len();
        let source = source_model(p)?;
        let plan = TransferPlan::new(vec![LayerSelector::L1], TransferMode::FineTune)?;
        let (mut tr, mut sc) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let cfg = vocalis_core::TrainConfig {
                seed,
                ..p.config.train.target.clone()
            };
            let f = |plan: Option<&TransferPlan>| -> Result<f64> {
                let src = plan.map(|_| &source);
                let out = train_target(&train, &val, &p.config.model, src, plan, &cfg)?;
                Ok(evaluate(&out.model, &test)?.0.overall.f)
            };
            tr.push(f(Some(&plan)).with_context(|| format!("transfer, seed {seed}"))?);
            sc.push(f(None).with_context(|| format!("scratch, seed {seed}"))?);
        }
        let (mt, ms) = (median(tr.clone()), median(sc.clone()));
        let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ");
        let detail = format!(
            "{songs} songs, test F median l1/finetune {mt:.4} [{}] vs scratch {ms:.4} [{}]",
            fmt(&tr),
            fmt(&sc)
        );
        ensure!(mt >= ms - MARGIN, "transfer median below scratch by more than {MARGIN}; {detail}");
        Ok(detail)
    })
}

const SMALL: &str = r#"
seed = 23

[toy]
speakers = 6
clips_per_speaker = 3
music_clips = 3
singers = 5
songs_per_singer = 2
song_s = 2.0

[synth.splits]
kind = "fractions"
validation = 0.2
test = 0.2

[train.source]
max_epochs = 2
blocks_per_clip = 8

[train.target]
max_epochs = 2
blocks_per_clip = 8

[viz]
filters = [0, 3]
steps = 20
export_samples = 50
"#;

fn files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let path = e?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn run_small(dir: &Path) -> Result<PathBuf> {
    let work = dir.join("work");
    let config = PipelineConfig::parse(SMALL, &[format!("paths.work_dir={}", toml::Value::String(work.display().to_string()))])?;
    Pipeline::new(config, Vec::new()).run_all()?;
    Ok(work)
}

pub fn determinism() -> Result<String> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let (wa, wb) = (run_small(a.path())?, run_small(b.path())?);
    let (fa, fb) = (files(&wa)?, files(&wb)?);
    ensure!(fa == fb, "file sets differ: {} vs {} files", fa.len(), fb.len());
    let mut timed = 0;
    for rel in &fa {
        let (x, y) = (std::fs::read(wa.join(rel))?, std::fs::read(wb.join(rel))?);
        if rel.file_name().is_some_and(|n| n == "run.json") {
            let (rx, ry): (RunRecord, RunRecord) = (serde_json::from_slice(&x)?, serde_json::from_slice(&y)?);
            ensure!(rx.without_timing() == ry.without_timing(), "{} differs beyond timing", rel.display());
            timed += 1;
        } else if rel.as_path() == Path::new(TARGET_MANIFEST) {
            let strip = |bytes: &[u8], root: &Path| String::from_utf8_lossy(bytes).replace(&root.display().to_string(), "");
            ensure!(strip(&x, a.path()) == strip(&y, b.path()), "target manifest differs beyond its root");
        } else {
            ensure!(x == y, "{} differs", rel.display());
        }
    }
    let checkpoints = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "vckp")).count();
    if checkpoints != 2 {
        return Err(anyhow!("expected 2 checkpoints, found {checkpoints}"));
    }
    Ok(format!(
        "{} files identical across two runs ({checkpoints} checkpoints, {timed} run records compared without wall times)",
        fa.len()
    ))
}
