//! Dataset manifests (JSON lines) and the source-corpus builder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{detect_endpoints, mix_at_snr, SynthError, VadConfig};
use crate::audio::{load_audio, write_wav, PIPELINE_RATE};
use crate::features::StftConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| SynthError::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Source,
    Target,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Source => "source",
            Task::Target => "target",
        })
    }
}

/// One clip. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio: PathBuf,
    pub labels: PathBuf,
    pub split: Split,
    pub task: Task,
    /// Speaker or singer; never shared between splits.
    pub group: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub music_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self, SynthError> {
        let m = Self {
            entries,
            root: root.into(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks id uniqueness and that no group spans two splits.
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ids = BTreeSet::new();
        let mut groups: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(SynthError::DuplicateId(e.id.clone()));
            }
            match groups.get(e.group.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(SynthError::SplitLeakage {
                        group: e.group.clone(),
                        a: s,
                        b: e.split,
                    })
                }
                _ => {
                    groups.insert(&e.group, e.split);
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), SynthError> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| SynthError::Manifest(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let f = std::fs::File::open(path).map_err(|e| {
            SynthError::Manifest(format!("cannot open manifest {}: {e}", path.display()))
        })?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                SynthError::Manifest(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            entries.push(e);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(entries, root)
    }

    /// Concatenates manifests that share a root.
    pub fn merged(parts: &[&DatasetManifest]) -> Result<Self, SynthError> {
        let root = parts.first().map(|m| m.root.clone()).unwrap_or_default();
        let mut entries = Vec::new();
        for m in parts {
            for e in &m.entries {
                let mut e = e.clone();
                e.audio = m.resolve(&e.audio);
                e.labels = m.resolve(&e.labels);
                entries.push(e);
            }
        }
        Self::new(entries, root)
    }
}

/// How clips are assigned to splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SplitPolicy {
    /// Use `train/`, `validation/` and `test/` subdirectories of the input.
    Directories,
    /// Shuffle groups with the seed and cut by fraction.
    Fractions { validation: f64, test: f64 },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Fractions {
            validation: 0.1,
            test: 0.1,
        }
    }
}

/// Speaker or singer identifier: the file stem up to the first `_`.
pub fn group_of(stem: &str) -> &str {
    stem.split('_').next().unwrap_or(stem)
}

pub(crate) fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    let rd = std::fs::read_dir(dir).map_err(|e| {
        SynthError::Manifest(format!("cannot read directory {}: {e}", dir.display()))
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    Ok(out)
}

pub(crate) fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Lists `(path, split)` pairs under `dir` according to the policy.
pub fn assign_splits(dir: &Path, policy: &SplitPolicy, seed: u64) -> Result<Vec<(PathBuf, Split)>, SynthError> {
    let mut out = Vec::new();
    match policy {
        SplitPolicy::Directories => {
            for s in Split::ALL {
                let sub = dir.join(s.as_str());
                if sub.is_dir() {
                    out.extend(wav_files(&sub)?.into_iter().map(|p| (p, s)));
                }
            }
        }
        SplitPolicy::Fractions { validation, test } => {
            if !(*validation >= 0.0 && *test >= 0.0 && validation + test < 1.0) {
                return Err(SynthError::Config(format!(
                    "split fractions validation={validation} test={test} leave no training data"
                )));
            }
            let files = wav_files(dir)?;
            let mut groups: Vec<String> = files
                .iter()
                .map(|p| group_of(&stem(p)).to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = groups.len();
            let n_test = (test * n as f64).round() as usize;
            let n_val = (validation * n as f64).round() as usize;
            let mut by_group = BTreeMap::new();
            for (i, g) in groups.into_iter().enumerate() {
                let s = if i < n_test {
                    Split::Test
                } else if i < n_test + n_val {
                    Split::Validation
                } else {
                    Split::Train
                };
                by_group.insert(g, s);
            }
            for p in files {
                let s = by_group[group_of(&stem(&p))];
                out.push((p, s));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub snr_db: f64,
    pub splits: SplitPolicy,
    pub seed: u64,
    pub vad: VadConfig,
    pub stft: StftConfig,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            snr_db: 0.0,
            splits: SplitPolicy::default(),
            seed: 0,
            vad: VadConfig::default(),
            stft: StftConfig::default(),
        }
    }
}

/// Mixes every speech clip with a seeded random music clip, writes
/// `audio/<id>.wav`, `labels/<id>.csv` and `manifest.jsonl` under `out_dir`.
pub fn build_manifest(
    speech_dir: &Path,
    music_dir: &Path,
    out_dir: &Path,
    opts: &SynthOptions,
) -> Result<DatasetManifest, SynthError> {
    let speech = assign_splits(speech_dir, &opts.splits, opts.seed)?;
    if speech.is_empty() {
        return Err(SynthError::EmptyCorpus(speech_dir.display().to_string()));
    }
    let music = wav_files(music_dir)?;
    if music.is_empty() {
        return Err(SynthError::EmptyCorpus(music_dir.display().to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draws: Vec<(usize, f64)> = (0..speech.len())
        .map(|_| (rng.gen_range(0..music.len()), rng.gen()))
        .collect();
    // Ids and group/split consistency are checked before any audio work.
    let entries = speech
        .iter()
        .zip(&draws)
        .map(|((path, split), &(mi, _))| {
            let id = stem(path);
            ManifestEntry {
                group: group_of(&id).to_string(),
                audio: PathBuf::from("audio").join(format!("{id}.wav")),
                labels: PathBuf::from("labels").join(format!("{id}.csv")),
                split: *split,
                task: Task::Source,
                snr_db: Some(opts.snr_db),
                music_id: Some(stem(&music[mi])),
                id,
            }
        })
        .collect();
    let manifest = DatasetManifest::new(entries, out_dir)?;
    let geom = opts.stft.geometry(PIPELINE_RATE);
    manifest
        .entries
        .par_iter()
        .zip(&speech)
        .zip(&draws)
        .try_for_each(|((entry, (speech_path, _)), &(mi, u))| -> Result<(), SynthError> {
            let sp = load_audio(speech_path, PIPELINE_RATE)?;
            let mu = load_audio(&music[mi], PIPELINE_RATE)?;
            let labels = detect_endpoints(&sp, &opts.vad)?;
            let offset = if mu.len() > sp.len() {
                ((mu.len() - sp.len()) as f64 * u) as usize
            } else {
                0
            };
            let mix = mix_at_snr(&sp, &mu, &labels, geom, opts.snr_db, offset)
                .map_err(|e| e.context(&entry.id))?;
            write_wav(&manifest.resolve(&entry.audio), &mix.mixture)?;
            mix.labels
                .save(&manifest.resolve(&entry.labels))
                .map_err(|e| SynthError::Manifest(e.to_string()))?;
            Ok(())
        })?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Indexes a labeled song corpus: every `<name>.wav` needs a sibling
/// `<name>.csv` with frame labels. Nothing is copied.
pub fn index_labeled_corpus(dir: &Path, policy: &SplitPolicy, seed: u64) -> Result<DatasetManifest, SynthError> {
    let files = assign_splits(dir, policy, seed)?;
    if files.is_empty() {
        return Err(SynthError::EmptyCorpus(dir.display().to_string()));
    }
    let mut entries = Vec::new();
    for (p, split) in files {
        let lab = p.with_extension("csv");
        if !lab.is_file() {
            return Err(SynthError::Manifest(format!(
                "missing label file {} for {}",
                lab.display(),
                p.display()
            )));
        }
        let id = stem(&p);
        entries.push(ManifestEntry {
            group: group_of(&id).to_string(),
            id,
            audio: std::path::absolute(&p)?,
            labels: std::path::absolute(&lab)?,
            split,
            task: Task::Target,
            snr_db: None,
            music_id: None,
        });
    }
    DatasetManifest::new(entries, dir)
}
