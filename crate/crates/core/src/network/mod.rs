//! A small encoder/decoder network built from NPTC convolutions.
//!
//! Encoder: an NPTC stem at level 0, then per level a strided NPTC convolution from the
//! previous level followed by residual blocks. Classification pools the last level and
//! applies an MLP head; segmentation walks back up with nearest-neighbour upsampling,
//! skip concatenation and an MLP per level.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, Differentiable, FnFragment, ForwardPass, GradCheckReport, ModelFragment, FD_STEP};
pub use loss::{cross_entropy, softmax};
pub use model::{CloudGeometry, Model, ParamInfo, Tape};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{
    augment_features, base_features, evaluate, evaluate_with_voting, predict, predict_augmented, predict_with_voting,
    train, write_metrics_csv, Augmentation, EpochMetrics, Sample, TrainConfig, TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{NptcError, Result};
use crate::operator::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Classification { classes: usize },
    Segmentation { parts: usize },
}

impl Task {
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Segmentation { parts } => parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Level sizes as fractions of the input cloud; the first entry is 1.
    pub ratios: Vec<f64>,
    pub widths: Vec<usize>,
    /// Residual blocks per level.
    pub blocks: Vec<usize>,
    pub kernels: Vec<KernelSpec>,
    pub task: Task,
    pub input_channels: usize,
}

impl NetworkConfig {
    /// Three levels (512/128/32 points on a 512-point cloud), widths 32/64/128.
    pub fn desk(task: Task) -> Self {
        Self {
            ratios: vec![1.0, 0.25, 0.0625],
            widths: vec![32, 64, 128],
            blocks: vec![1, 1, 1],
            kernels: vec![KernelSpec::default(); 3],
            task,
            input_channels: 3,
        }
    }

    pub fn levels(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.ratios.len();
        let bad = |m: String| Err(NptcError::Config(m));
        if l == 0 {
            return bad("network needs at least one level".into());
        }
        if self.widths.len() != l || self.blocks.len() != l || self.kernels.len() != l {
            return bad(format!(
                "ratios, widths, blocks and kernels must all have {l} entries"
            ));
        }
        if (self.ratios[0] - 1.0).abs() > 1e-12 {
            return bad("the first level ratio must be 1".into());
        }
        for (i, (&w, &b)) in self.widths.iter().zip(&self.blocks).enumerate() {
            if w == 0 {
                return bad(format!("level {i} has zero width"));
            }
            if b > 0 && w % 2 != 0 {
                return bad(format!(
                    "level {i} width {w} must be even for its residual blocks"
                ));
            }
        }
        for k in &self.kernels {
            k.validate().map_err(|e| NptcError::Config(e.to_string()))?;
        }
        if self.task.outputs() == 0 || self.input_channels == 0 {
            return bad("task outputs and input channels must be positive".into());
        }
        Ok(())
    }
}
