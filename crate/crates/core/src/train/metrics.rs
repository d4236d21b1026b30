use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::datagen::{LV, MYO, RV};

use super::TrainError;

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
///
/// Panics if the masks differ in length.
pub fn dice(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dice: masks differ in size");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Dice of one class between two class maps.
pub fn class_dice(pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>, class: u8) -> f64 {
    let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let t: Vec<bool> = truth.iter().map(|&v| v == class).collect();
    dice(&p, &t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassDice {
    pub lv: f64,
    pub myo: f64,
    pub rv: f64,
}

impl ClassDice {
    pub fn mean(&self) -> f64 {
        (self.lv + self.myo + self.rv) / 3.0
    }
}

/// Per-sample Dice of the three foreground classes, averaged over samples.
#[derive(Debug, Clone, Default)]
pub struct DiceAccumulator {
    sums: [f64; 3],
    count: usize,
}

impl DiceAccumulator {
    pub fn add(&mut self, pred: ArrayView2<'_, u8>, truth: ArrayView2<'_, u8>) {
        for (i, c) in [LV, MYO, RV].into_iter().enumerate() {
            self.sums[i] += class_dice(pred, truth, c);
        }
        self.count += 1;
    }

    pub fn finish(&self) -> Option<ClassDice> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            ClassDice { lv: self.sums[0] / n, myo: self.sums[1] / n, rv: self.sums[2] / n }
        })
    }
}

/// Summary of a model on one data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub accuracy: f64,
    pub orientation_loss: f64,
    pub segmentation_loss: Option<f64>,
    pub dice: Option<ClassDice>,
    pub mean_dice: Option<f64>,
}

impl Evaluation {
    pub fn integral_loss(&self) -> f64 {
        self.orientation_loss + self.segmentation_loss.unwrap_or(0.0)
    }
}

/// One row of the loss curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_mean_dice: Option<f64>,
    pub seconds: f64,
}

/// Append-only metric log, mirrored to `metrics.csv` and `metrics.jsonl`
/// when a directory is set.
#[derive(Debug, Default)]
pub struct RunLog {
    dir: Option<PathBuf>,
    records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        RunLog::default()
    }

    pub fn to_dir(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        for name in ["metrics.csv", "metrics.jsonl"] {
            let p = dir.join(name);
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| TrainError::io(&p, e))?;
            }
        }
        Ok(RunLog { dir: Some(dir.to_path_buf()), records: Vec::new() })
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<(), TrainError> {
        log::info!(
            "{} epoch {}: train {:.4} val {:.4} acc {} dice {} ({:.1}s)",
            rec.stage,
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            rec.val_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            rec.val_mean_dice.map_or("-".into(), |d| format!("{d:.4}")),
            rec.seconds
        );
        if let Some(dir) = &self.dir {
            let csv_path = dir.join("metrics.csv");
            let fresh = !csv_path.exists();
            let file = open_append(&csv_path)?;
            let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
            w.serialize(&rec).map_err(|e| TrainError::Log(e.to_string()))?;
            w.flush().map_err(|e| TrainError::io(&csv_path, e))?;

            let jl_path = dir.join("metrics.jsonl");
            let mut f = open_append(&jl_path)?;
            let line = serde_json::to_string(&rec).map_err(|e| TrainError::Log(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| TrainError::io(&jl_path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

fn open_append(path: &Path) -> Result<File, TrainError> {
    OpenOptions::new().create(true).append(true).open(path).map_err(|e| TrainError::io(path, e))
}
