//! Voxel narrow band around a normalized point cloud.
//!
//! The unit cube is split into `M^3` cells of edge `h = 1/M`. A cell is active when its
//! centre lies within `epsilon` of the nearest cloud point, or when it contains a point.
//! Candidates are the point-containing cells dilated by `ceil(epsilon / h) + 1` rings, so
//! the full lattice is never scanned; each candidate's distance comes from an exact
//! nearest-neighbour query.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::geometry_io::{NeighborIndex, PointCloud, Vec3};

pub type VoxelIndex = [usize; 3];

/// Default lattice resolution.
pub const DEFAULT_RESOLUTION: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelGrid {
    resolution: usize,
}

impl VoxelGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 || resolution > 1024 {
            return Err(argument(format!("resolution {resolution} outside 1..=1024")));
        }
        Ok(Self { resolution })
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    #[inline]
    pub fn center(&self, v: VoxelIndex) -> Vec3 {
        let h = self.spacing();
        Vec3::new(
            (v[0] as f64 + 0.5) * h,
            (v[1] as f64 + 0.5) * h,
            (v[2] as f64 + 0.5) * h,
        )
    }

    /// `floor(x * M)` per axis, clamped into `[0, M - 1]`.
    #[inline]
    pub fn containing_voxel(&self, x: &Vec3) -> VoxelIndex {
        let m = self.resolution;
        let cell = |c: f64| {
            let f = (c * m as f64).floor();
            if f <= 0.0 {
                0
            } else {
                (f as usize).min(m - 1)
            }
        };
        [cell(x.x), cell(x.y), cell(x.z)]
    }

    #[inline]
    pub fn linear(&self, v: VoxelIndex) -> usize {
        let m = self.resolution;
        (v[0] * m + v[1]) * m + v[2]
    }

    #[inline]
    pub fn unlinear(&self, l: usize) -> VoxelIndex {
        let m = self.resolution;
        [l / (m * m), (l / m) % m, l % m]
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.resolution.pow(3)
    }
}

/// Active voxels of the band, stored in ascending linear order.
#[derive(Debug, Clone)]
pub struct NarrowBand {
    grid: VoxelGrid,
    epsilon: f64,
    voxels: Vec<VoxelIndex>,
    dist_to_cloud: Vec<f64>,
    occupied: Vec<bool>,
    // dense lattice -> active slot, u32::MAX when inactive
    slot_of: Vec<u32>,
}

const INACTIVE: u32 = u32::MAX;

impl NarrowBand {
    #[inline]
    pub fn grid(&self) -> VoxelGrid {
        self.grid
    }

    #[inline]
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[VoxelIndex] {
        &self.voxels
    }

    #[inline]
    pub fn voxel(&self, slot: usize) -> VoxelIndex {
        self.voxels[slot]
    }

    pub fn distances(&self) -> &[f64] {
        &self.dist_to_cloud
    }

    /// Whether the active voxel at `slot` contains at least one cloud point.
    #[inline]
    pub fn is_occupied(&self, slot: usize) -> bool {
        self.occupied[slot]
    }

    /// Active slot of a voxel, if active.
    #[inline]
    pub fn slot(&self, v: VoxelIndex) -> Option<usize> {
        let s = self.slot_of[self.grid.linear(v)];
        (s != INACTIVE).then_some(s as usize)
    }

    /// Slot of the neighbour of `v` offset by `delta` along `axis`, if inside the lattice and active.
    #[inline]
    pub fn neighbor_slot(&self, v: VoxelIndex, axis: usize, delta: isize) -> Option<usize> {
        let c = v[axis] as isize + delta;
        if c < 0 || c >= self.grid.resolution as isize {
            return None;
        }
        let mut n = v;
        n[axis] = c as usize;
        self.slot(n)
    }

    /// Active-voxel count divided by `M^2`; bounded for clouds sampled from smooth surfaces.
    pub fn area_constant(&self) -> f64 {
        self.len() as f64 / (self.grid.resolution as f64).powi(2)
    }

    /// Writes `i j k dist` per active voxel.
    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        for (v, d) in self.voxels.iter().zip(&self.dist_to_cloud) {
            writeln!(w, "{} {} {} {}", v[0], v[1], v[2], d)?;
        }
        Ok(())
    }

    pub fn export_text(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_text(f)?;
        Ok(())
    }

    /// Rebuilds a band from its stored parts (the inverse of reading `voxels`,
    /// `distances` and occupancy back from a cache).
    pub fn from_parts(
        grid: VoxelGrid,
        epsilon: f64,
        voxels: Vec<VoxelIndex>,
        dist_to_cloud: Vec<f64>,
        occupied: Vec<bool>,
    ) -> Result<Self> {
        if voxels.len() != dist_to_cloud.len() || voxels.len() != occupied.len() {
            return Err(argument("narrow band parts have inconsistent lengths"));
        }
        let mut slot_of = vec![INACTIVE; grid.cell_count()];
        let mut prev = None;
        for (s, v) in voxels.iter().enumerate() {
            if v.iter().any(|&c| c >= grid.resolution) {
                return Err(argument(format!("voxel {v:?} outside the lattice")));
            }
            let l = grid.linear(*v);
            if prev.is_some_and(|p| p >= l) {
                return Err(argument("narrow band voxels must be strictly increasing"));
            }
            prev = Some(l);
            slot_of[l] = s as u32;
        }
        Ok(Self {
            grid,
            epsilon,
            voxels,
            dist_to_cloud,
            occupied,
            slot_of,
        })
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupied
    }
}

/// Builds the narrow band of a normalized cloud.
pub fn voxelize_narrowband(cloud: &PointCloud, resolution: usize, epsilon: f64) -> Result<NarrowBand> {
    let index = NeighborIndex::new(cloud);
    voxelize_with_index(cloud, &index, resolution, epsilon)
}

pub fn voxelize_with_index(
    cloud: &PointCloud,
    index: &NeighborIndex,
    resolution: usize,
    epsilon: f64,
) -> Result<NarrowBand> {
    let grid = VoxelGrid::new(resolution)?;
    let h = grid.spacing();
    if !(epsilon.is_finite() && epsilon >= 0.5 * h) {
        return Err(argument(format!(
            "epsilon {epsilon} is below half a cell ({})",
            0.5 * h
        )));
    }
    if !cloud.is_normalized() {
        return Err(argument("cloud must be normalized into the unit cube"));
    }
    let m = resolution;
    let mut occupied_mask = vec![false; grid.cell_count()];
    let mut seeds = Vec::new();
    for p in cloud.points() {
        let l = grid.linear(grid.containing_voxel(p));
        if !occupied_mask[l] {
            occupied_mask[l] = true;
            seeds.push(l);
        }
    }

    let rings = (epsilon / h).ceil() as isize + 1;
    let mut candidate = vec![false; grid.cell_count()];
    for &l in &seeds {
        let v = grid.unlinear(l);
        let lo = |c: usize| (c as isize - rings).max(0) as usize;
        let hi = |c: usize| ((c as isize + rings) as usize).min(m - 1);
        for i in lo(v[0])..=hi(v[0]) {
            for j in lo(v[1])..=hi(v[1]) {
                let base = (i * m + j) * m;
                candidate[base + lo(v[2])..=base + hi(v[2])].fill(true);
            }
        }
    }
    let candidates: Vec<usize> = candidate
        .iter()
        .enumerate()
        .filter_map(|(l, &c)| c.then_some(l))
        .collect();
    drop(candidate);

    let kept: Vec<(usize, f64)> = candidates
        .par_iter()
        .filter_map(|&l| {
            let (_, d) = index.nearest(&grid.center(grid.unlinear(l)));
            (d < epsilon || occupied_mask[l]).then_some((l, d))
        })
        .collect();

    let mut slot_of = vec![INACTIVE; grid.cell_count()];
    let mut voxels = Vec::with_capacity(kept.len());
    let mut dist_to_cloud = Vec::with_capacity(kept.len());
    let mut occupied = Vec::with_capacity(kept.len());
    for (s, &(l, d)) in kept.iter().enumerate() {
        slot_of[l] = s as u32;
        voxels.push(grid.unlinear(l));
        dist_to_cloud.push(d);
        occupied.push(occupied_mask[l]);
    }
    let band = NarrowBand {
        grid,
        epsilon,
        voxels,
        dist_to_cloud,
        occupied,
        slot_of,
    };
    log::debug!(
        "narrow band: {} active voxels at M={m}, eps={epsilon:.5}, active/M^2 = {:.3}",
        band.len(),
        band.area_constant()
    );
    Ok(band)
}

/// Jaccard similarity `|A ∩ B| / |A ∪ B|` of two bands' active sets.
pub fn jaccard(a: &NarrowBand, b: &NarrowBand) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    let la: Vec<usize> = a.voxels.iter().map(|v| a.grid.linear(*v)).collect();
    let lb: Vec<usize> = b.voxels.iter().map(|v| b.grid.linear(*v)).collect();
    while i < la.len() && j < lb.len() {
        match la[i].cmp(&lb[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = la.len() + lb.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
