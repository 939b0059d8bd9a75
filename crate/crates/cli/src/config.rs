use std::path::{Path, PathBuf};

use nptc::eikonal::{Axis, Side};
use nptc::network::{NetworkConfig, Task, TrainConfig};
use nptc::operator::KernelSpec;
use nptc::pipeline::PipelineConfig;
use nptc::synthetic::DatasetSpec;
use nptc::NptcError;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Which dataset entries an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSeed {
    pub axis: Axis,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpsConfig {
    /// Number of samples for the `fps` stage; `None` keeps the whole cloud.
    pub n: Option<usize>,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub c_out: usize,
    pub weight_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub voting_rounds: usize,
    pub voting_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub points: usize,
    pub channels: usize,
    pub taps_per_axis: usize,
    pub levels: usize,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub band: Option<PathBuf>,
    pub rho: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub fps: Option<PathBuf>,
    pub operator: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// Every tunable of every stage. Flags fill it first, then a `--config` file is merged on
/// top key by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Settings for single-cloud stages (`voxelize`, `distance`, `frames`).
    pub pipeline: PipelineConfig,
    /// Overrides the point seed policy with a plane-edge seed set in `distance`.
    pub plane_seed: Option<PlaneSeed>,
    /// Settings used when preparing dataset clouds for `train` and `eval`.
    pub dataset_pipeline: PipelineConfig,
    pub kernel: KernelSpec,
    pub fps: FpsConfig,
    pub conv: ConvConfig,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
    pub paths: Paths,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            plane_seed: None,
            dataset_pipeline: PipelineConfig::dataset_default(),
            kernel: KernelSpec::default(),
            fps: FpsConfig { n: None, start: 0 },
            conv: ConvConfig {
                c_out: 8,
                weight_seed: 0,
            },
            dataset: DatasetSpec::default(),
            // zero classes: inferred from the dataset by `train`
            network: NetworkConfig::desk(Task::Classification { classes: 0 }),
            train: TrainConfig::default(),
            eval: EvalConfig {
                split: Split::Test,
                voting_rounds: 1,
                voting_seed: 0,
            },
            gradcheck: GradCheckConfig {
                points: 64,
                channels: 8,
                taps_per_axis: 3,
                levels: 2,
                seeds: (0..5).collect(),
                tolerance: 1e-4,
            },
            paths: Paths::default(),
            threads: None,
        }
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn config_error(path: &Path, e: serde_json::Error) -> NptcError {
    NptcError::Config(format!("{}: {e}", path.display()))
}

impl RunConfig {
    /// Overlays the JSON file at `path` onto `self`. Unknown keys are rejected by name.
    pub fn overlay_file(&self, path: &Path) -> nptc::Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            NptcError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let top: Value = serde_json::from_str(&text).map_err(|e| NptcError::Parse {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        if !top.is_object() {
            return Err(NptcError::Config(format!(
                "{}: top level must be an object",
                path.display()
            )));
        }
        let mut base = serde_json::to_value(self).expect("config serializes");
        merge(&mut base, top);
        serde_json::from_value(base).map_err(|e| config_error(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
