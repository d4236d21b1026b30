//! Losses, metrics, and the training schedules: single-stage training of the
//! simplified network, the three-stage multi-task schedule, and two-phase
//! transfer to a new modality.

mod fit;
pub mod losses;
pub mod metrics;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Sample;
use crate::nets::{MultiTaskConfig, NetError, SimpleCnnConfig};
use crate::preprocess::PreprocConfig;
use crate::tensor::{Adam, Optimizer, Sgd, TensorError};

pub use fit::{
    evaluate, train_multitask, train_simple, transfer, FreezeReport, MultiTaskOutcome, TrainOutcome, TransferOutcome,
};
pub use losses::{integral_loss, integral_loss_value, orientation_loss, orientation_loss_value, seg_target, segmentation_loss};
pub use metrics::{class_dice, dice, ClassDice, DiceAccumulator, EpochRecord, Evaluation, RunLog};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("expected {expected} classes, got {got}")]
    ClassCount { expected: usize, got: usize },
    #[error("probabilities in row {row} sum to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("{stage}, step {step}: {detail}")]
    Diverged { stage: String, step: usize, detail: String },
    #[error("{stage}: frozen parameters received gradient {max_abs}")]
    FreezeViolation { stage: String, max_abs: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("metric log: {0}")]
    Log(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn build(&self, lr_scale: f64) -> Box<dyn Optimizer<f32>> {
        let lr = self.learning_rate * lr_scale;
        match self.kind {
            OptimizerKind::Adam => {
                let mut a = Adam::new(lr);
                a.beta1 = self.beta1;
                a.beta2 = self.beta2;
                a.eps = self.eps;
                Box::new(a)
            }
            OptimizerKind::Sgd => Box::new(Sgd { lr }),
        }
    }
}

/// Epoch budgets of the three multi-task stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageEpochs {
    pub segmentation: usize,
    pub orientation: usize,
    pub joint: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs { segmentation: 20, orientation: 10, joint: 6 }
    }
}

/// Epoch budgets of the two transfer phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferEpochs {
    pub head: usize,
    pub finetune: usize,
}

impl Default for TransferEpochs {
    fn default() -> Self {
        TransferEpochs { head: 4, finetune: 12 }
    }
}

/// Class weights `w_i` of the segmentation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegWeights {
    #[default]
    Uniform,
    /// Inverse pixel frequency over the training labels, scaled to mean 1.
    InverseFrequency,
    Custom([f64; 4]),
}

impl SegWeights {
    pub fn resolve(&self, samples: &[Sample]) -> Result<[f64; 4], TrainError> {
        let w = match self {
            SegWeights::Uniform => [1.0; 4],
            SegWeights::Custom(w) => *w,
            SegWeights::InverseFrequency => {
                let mut counts = [0usize; 4];
                for s in samples {
                    for &v in s.seg.iter().flatten() {
                        counts[(v as usize).min(3)] += 1;
                    }
                }
                let total: usize = counts.iter().sum();
                if total == 0 {
                    return Err(TrainError::Data("inverse-frequency weights need segmentation labels".into()));
                }
                let inv = counts.map(|c| total as f64 / c.max(1) as f64);
                let mean = inv.iter().sum::<f64>() / 4.0;
                inv.map(|v| v / mean)
            }
        };
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(TrainError::Config(format!("segmentation weights must be positive, got {w:?}")));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Epochs of simplified-network training.
    pub epochs: usize,
    /// Epochs without validation improvement before a stage stops; 0 disables.
    pub patience: usize,
    pub stages: StageEpochs,
    /// Learning-rate multiplier of the joint multi-task stage.
    pub joint_lr_scale: f64,
    pub transfer: TransferEpochs,
    pub seg_weights: SegWeights,
    pub simple: SimpleCnnConfig,
    pub multitask: MultiTaskConfig,
    pub preprocess: PreprocConfig,
    /// Wall-clock cap on a whole training call; the best model so far is kept.
    pub time_limit_secs: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            epochs: 12,
            patience: 4,
            stages: StageEpochs::default(),
            joint_lr_scale: 0.3,
            transfer: TransferEpochs::default(),
            seg_weights: SegWeights::Uniform,
            simple: SimpleCnnConfig::default(),
            multitask: MultiTaskConfig::default(),
            preprocess: PreprocConfig::default(),
            time_limit_secs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.epochs == 0 || self.stages.segmentation == 0 || self.stages.orientation == 0 || self.stages.joint == 0 {
            return bad("epoch counts must be positive");
        }
        if self.transfer.head == 0 {
            return bad("transfer needs at least one head epoch");
        }
        if !(self.optimizer.learning_rate > 0.0) || !(self.joint_lr_scale > 0.0) {
            return bad("learning rates must be positive");
        }
        if let SegWeights::Custom(w) = &self.seg_weights {
            if w.iter().any(|&v| !(v > 0.0)) {
                return bad("segmentation weights must be positive");
            }
        }
        self.preprocess.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
