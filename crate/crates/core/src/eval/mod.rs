//! Frame-level precision, recall and F-score; per-song and pooled reports.

pub mod musdb;

use std::fmt::Write as _;
use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::FrameLabelTrack;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction has {pred} frames, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("{0}")]
    Musdb(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Frame counts with on (vocal) as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n_tp: u64,
    pub n_fp: u64,
    pub n_fn: u64,
    pub n_tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.n_tp + self.n_fp + self.n_fn + self.n_tn
    }

    /// Truth-on frames.
    pub fn on_frames(&self) -> u64 {
        self.n_tp + self.n_fn
    }

    pub fn off_frames(&self) -> u64 {
        self.n_fp + self.n_tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            n_tp: self.n_tp + o.n_tp,
            n_fp: self.n_fp + o.n_fp,
            n_fn: self.n_fn + o.n_fn,
            n_tn: self.n_tn + o.n_tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn score(pred: &FrameLabelTrack, truth: &FrameLabelTrack) -> Result<ConfusionCounts, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p, t) {
            (true, true) => c.n_tp += 1,
            (true, false) => c.n_fp += 1,
            (false, true) => c.n_fn += 1,
            (false, false) => c.n_tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `P = tp/(tp+fp)`, `R = tp/(tp+fn)`, `F = 2PR/(P+R)`.
///
/// Empty denominators: with no predicted positives, `P` is 1 when there
/// was also nothing to find and 0 otherwise; `R` mirrors this.
/// With nothing to find and nothing predicted all three are 1.
pub fn prf(c: &ConfusionCounts) -> Prf {
    let (tp, fp, fn_) = (c.n_tp as f64, c.n_fp as f64, c.n_fn as f64);
    if c.n_tp + c.n_fp + c.n_fn == 0 {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        };
    }
    let precision = if c.n_tp + c.n_fp == 0 {
        if c.n_tp + c.n_fn == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp / (tp + fp)
    };
    let recall = if c.n_tp + c.n_fn == 0 {
        if c.n_tp + c.n_fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        tp / (tp + fn_)
    };
    Prf {
        precision,
        recall,
        f: f_score(precision, recall),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongRow {
    pub id: String,
    pub off_frames: u64,
    pub on_frames: u64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl SongRow {
    pub fn new(id: impl Into<String>, counts: ConfusionCounts) -> Self {
        let m = prf(&counts);
        Self {
            id: id.into(),
            off_frames: counts.off_frames(),
            on_frames: counts.on_frames(),
            counts,
            precision: m.precision,
            recall: m.recall,
            f: m.f,
        }
    }
}

/// One row per song plus an Overall row computed from pooled counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SongRow>,
    pub overall: SongRow,
}

impl EvalReport {
    pub fn new(rows: Vec<SongRow>) -> Self {
        let pooled = rows.iter().map(|r| r.counts).sum();
        Self {
            overall: SongRow::new("Overall", pooled),
            rows,
        }
    }

    pub fn to_text(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .chain([7, 4])
            .max()
            .unwrap_or(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>10}  {:>10}  {:>6}  {:>6}  {:>6}", "song", "off frames", "on frames", "P", "R", "F");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{:<w$}  {:>10}  {:>10}  {:>6.3}  {:>6.3}  {:>6.3}",
                r.id, r.off_frames, r.on_frames, r.precision, r.recall, r.f
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["song", "off_frames", "on_frames", "tp", "fp", "fn", "tn", "precision", "recall", "f"])?;
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let c = r.counts;
            out.write_record([
                r.id.clone(),
                r.off_frames.to_string(),
                r.on_frames.to_string(),
                c.n_tp.to_string(),
                c.n_fp.to_string(),
                c.n_fn.to_string(),
                c.n_tn.to_string(),
                format!("{:.6}", r.precision),
                format!("{:.6}", r.recall),
                format!("{:.6}", r.f),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(dir.join("report.csv"), buf)?;
        Ok(())
    }
}

/// `frame_index,truth,pred` per frame.
pub fn write_timeline<W: Write>(w: W, truth: &FrameLabelTrack, pred: &FrameLabelTrack) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame_index", "truth", "pred"])?;
    for (i, (&t, &p)) in truth.labels().iter().zip(pred.labels()).enumerate() {
        out.write_record([i.to_string(), u8::from(t).to_string(), u8::from(p).to_string()])?;
    }
    out.flush()?;
    Ok(())
}
