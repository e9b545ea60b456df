//! Per-frame on/off labels and their CSV form (`frame_index,label`).

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("label file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("label track has {labels} frames, spectrogram has {frames}")]
    Misaligned { labels: usize, frames: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One boolean per spectrogram frame; `true` is on (voice present).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FrameLabelTrack {
    labels: Vec<bool>,
}

impl FrameLabelTrack {
    pub fn new(labels: Vec<bool>) -> Self {
        Self { labels }
    }

    pub fn all(value: bool, frames: usize) -> Self {
        Self {
            labels: vec![value; frames],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn get(&self, t: usize) -> bool {
        self.labels[t]
    }

    pub fn on_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn off_count(&self) -> usize {
        self.len() - self.on_count()
    }

    pub fn check_aligned(&self, frames: usize) -> Result<(), LabelError> {
        if self.len() != frames {
            return Err(LabelError::Misaligned {
                labels: self.len(),
                frames,
            });
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LabelError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["frame_index", "label"])?;
        for (i, &l) in self.labels.iter().enumerate() {
            out.write_record([i.to_string(), u8::from(l).to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, path_hint: &str) -> Result<Self, LabelError> {
        let parse_err = |reason: String| LabelError::Parse {
            path: path_hint.to_string(),
            reason,
        };
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["frame_index", "label"] {
            return Err(parse_err(format!("unexpected header {:?}", headers)));
        }
        let mut labels = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let idx: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {row}: bad frame index {:?}", &rec[0])))?;
            if idx != row {
                return Err(parse_err(format!("row {row}: frame index {idx} out of sequence")));
            }
            let l = match rec[1].trim() {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(format!("row {row}: label {other:?} is not 0 or 1"))),
            };
            labels.push(l);
        }
        Ok(Self { labels })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabelError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LabelError> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f, &path.display().to_string())
    }
}

impl From<Vec<bool>> for FrameLabelTrack {
    fn from(labels: Vec<bool>) -> Self {
        Self::new(labels)
    }
}

impl FromIterator<bool> for FrameLabelTrack {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}
