//! Per-cloud preprocessing: band, distance, frames, hierarchy and operators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eikonal::{fast_marching, interpolate_to_points, select_seed, GridScalarField, PointScalarField, SeedPolicy, SeedSet};
use crate::error::{argument, NptcError, Result};
use crate::frames::{build_frame_field, FrameField, NormalPolicy, DEFAULT_K};
use crate::geometry_io::{normalize_to_unit_cube, NeighborIndex, PointCloud};
use crate::hierarchy::build_hierarchy;
use crate::narrowband::{voxelize_with_index, NarrowBand, DEFAULT_RESOLUTION};
use crate::network::{CloudGeometry, NetworkConfig, Sample};
use crate::operator::{build_operator, KernelSpec};
use crate::synthetic::{SyntheticDataset, NORMALIZE_MARGIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// Two voxel spacings.
    Auto,
    /// A multiple of the voxel spacing.
    Cells(f64),
    /// Absolute width in normalized units.
    Fixed(f64),
}

impl EpsilonPolicy {
    pub fn resolve(self, resolution: usize) -> f64 {
        let h = 1.0 / resolution as f64;
        match self {
            EpsilonPolicy::Auto => 2.0 * h,
            EpsilonPolicy::Cells(c) => c * h,
            EpsilonPolicy::Fixed(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub resolution: usize,
    pub epsilon: EpsilonPolicy,
    pub seed_policy: SeedPolicy,
    /// Neighbourhood size for PCA normals and the gradient fit.
    pub k: usize,
    /// `None` uses stored normals when the cloud has them and PCA normals otherwise.
    pub normal_policy: Option<NormalPolicy>,
    /// How many times to widen the band by `epsilon_growth` when it comes out disconnected.
    pub epsilon_retries: usize,
    pub epsilon_growth: f64,
    pub fps_start: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            epsilon: EpsilonPolicy::Auto,
            seed_policy: SeedPolicy::default(),
            k: DEFAULT_K,
            normal_policy: None,
            epsilon_retries: 0,
            epsilon_growth: 1.5,
            fps_start: 0,
        }
    }
}

impl PipelineConfig {
    /// Settings for sparse 512-point training clouds: a 32^3 grid, a 3-cell band, and up
    /// to three widenings if the band still breaks apart.
    pub fn dataset_default() -> Self {
        Self {
            resolution: 32,
            epsilon: EpsilonPolicy::Cells(3.0),
            epsilon_retries: 3,
            ..Self::default()
        }
    }
}

/// Everything computed for one cloud up to the frame field.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub index: NeighborIndex,
    pub band: NarrowBand,
    pub seeds: SeedSet,
    pub field: GridScalarField,
    pub rho: PointScalarField,
    pub frames: FrameField,
}

fn prepare_once(cloud: &PointCloud, index: &NeighborIndex, cfg: &PipelineConfig, epsilon: f64) -> Result<PreparedCloud> {
    let band = voxelize_with_index(cloud, index, cfg.resolution, epsilon)?;
    let seeds = select_seed(cloud, &band, cfg.seed_policy)?;
    let field = fast_marching(&band, &seeds)?;
    let rho = interpolate_to_points(&field, &band, cloud)?;
    let policy = cfg.normal_policy.unwrap_or(if cloud.normals().is_some() {
        NormalPolicy::UseInput
    } else {
        NormalPolicy::LpcaCentroidOriented
    });
    let frames = build_frame_field(cloud, index, &rho, seeds.seed_point(), cfg.k, policy)?;
    Ok(PreparedCloud {
        cloud: cloud.clone(),
        index: index.clone(),
        band,
        seeds,
        field,
        rho,
        frames,
    })
}

/// Normalizes the cloud if needed, then runs voxelization, fast marching, interpolation
/// and frame construction.
pub fn prepare_cloud(cloud: &PointCloud, cfg: &PipelineConfig) -> Result<PreparedCloud> {
    let cloud = if cloud.is_normalized() {
        cloud.clone()
    } else {
        normalize_to_unit_cube(cloud, NORMALIZE_MARGIN)?
    };
    if !(cfg.epsilon_growth > 1.0) {
        return Err(argument("epsilon growth must exceed 1"));
    }
    let index = NeighborIndex::new(&cloud);
    let mut epsilon = cfg.epsilon.resolve(cfg.resolution);
    let mut attempt = 0;
    loop {
        match prepare_once(&cloud, &index, cfg, epsilon) {
            Err(NptcError::DisconnectedBand(msg)) if attempt < cfg.epsilon_retries => {
                log::warn!("band disconnected at epsilon {epsilon:.5} ({msg}); widening");
                epsilon *= cfg.epsilon_growth;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Builds the FPS hierarchy and, per level, the same-level and strided operators.
/// Every level uses the base frame field restricted to its points.
pub fn build_geometry(
    cloud: &PointCloud,
    frames: &FrameField,
    ratios: &[f64],
    kernels: &[KernelSpec],
    fps_start: usize,
) -> Result<CloudGeometry> {
    if kernels.len() != ratios.len() {
        return Err(argument("one kernel spec per hierarchy level is required"));
    }
    let hierarchy = build_hierarchy(cloud, ratios, fps_start)?;
    let mut clouds = Vec::with_capacity(hierarchy.depth());
    let mut level_ops = Vec::with_capacity(hierarchy.depth());
    let mut down_ops = Vec::with_capacity(hierarchy.depth().saturating_sub(1));
    for l in 0..hierarchy.depth() {
        let idx = hierarchy.level(l);
        let sub = cloud.subset(idx)?;
        let index = NeighborIndex::new(&sub);
        let fr = frames.subset(idx);
        let all: Vec<usize> = (0..sub.len()).collect();
        level_ops.push(build_operator(&sub, &index, &fr, &all, &kernels[l])?);
        if l > 0 {
            let (prev, pindex, pfr): &(PointCloud, NeighborIndex, FrameField) = &clouds[l - 1];
            down_ops.push(build_operator(prev, pindex, pfr, &hierarchy.positions_in_parent(l), &kernels[l])?);
        }
        clouds.push((sub, index, fr));
    }
    Ok(CloudGeometry {
        hierarchy,
        level_ops,
        down_ops,
    })
}

/// Preprocesses every dataset cloud into a training sample.
pub fn prepare_samples(ds: &SyntheticDataset, pcfg: &PipelineConfig, ncfg: &NetworkConfig) -> Result<Vec<Sample>> {
    ds.entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let name = format!("cloud_{i:04}");
            let prepared = prepare_cloud(&e.cloud, pcfg).map_err(|err| match err {
                NptcError::DisconnectedBand(m) => NptcError::DisconnectedBand(format!("{name}: {m}")),
                other => other,
            })?;
            let geometry = build_geometry(&prepared.cloud, &prepared.frames, &ncfg.ratios, &ncfg.kernels, pcfg.fps_start)?;
            Ok(Sample {
                name,
                points: prepared.cloud.points().to_vec(),
                geometry: Some(geometry),
                label: e.label,
                part_labels: Some(e.parts.clone()),
            })
        })
        .collect()
}
