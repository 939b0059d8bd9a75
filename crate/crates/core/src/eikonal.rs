//! Distance from a seed set inside the narrow band: `|grad rho| = 1`, `rho = 0` on the seeds.
//!
//! Solved by first-order upwind fast marching over the 6-neighbourhood of active voxels,
//! then carried onto the cloud by trilinear interpolation.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, NptcError, Result};
use crate::geometry_io::PointCloud;
use crate::narrowband::{NarrowBand, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s {
            "x" | "X" => Some(Axis::X),
            "y" | "Y" => Some(Axis::Y),
            "z" | "Z" => Some(Axis::Z),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Low,
    High,
}

/// How the seed point is picked from the cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedPolicy {
    FixedIndex(usize),
    /// Point with the smallest coordinate along the axis (lowest index on ties).
    MinCoordinate(Axis),
}

impl Default for SeedPolicy {
    fn default() -> Self {
        SeedPolicy::MinCoordinate(Axis::Z)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedProvenance {
    SinglePoint(usize),
    PlaneEdge(Axis, Side),
    Explicit,
}

/// Active-band slots where `rho = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    slots: Vec<usize>,
    provenance: SeedProvenance,
}

impl SeedSet {
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn provenance(&self) -> &SeedProvenance {
        &self.provenance
    }

    /// Cloud point the seed was taken from, if it came from a single point.
    pub fn seed_point(&self) -> Option<usize> {
        match self.provenance {
            SeedProvenance::SinglePoint(i) => Some(i),
            _ => None,
        }
    }

    /// Every active voxel on the band's extreme layer along `axis` (lowest or highest index).
    pub fn plane_edge(band: &NarrowBand, axis: Axis, side: Side) -> Result<SeedSet> {
        let a = axis.index();
        let coords = band.voxels().iter().map(|v| v[a]);
        let target = match side {
            Side::Low => coords.min(),
            Side::High => coords.max(),
        }
        .ok_or_else(|| argument("narrow band is empty"))?;
        let slots = band
            .voxels()
            .iter()
            .enumerate()
            .filter_map(|(s, v)| (v[a] == target).then_some(s))
            .collect();
        Ok(SeedSet {
            slots,
            provenance: SeedProvenance::PlaneEdge(axis, side),
        })
    }

    pub fn explicit(band: &NarrowBand, voxels: &[VoxelIndex]) -> Result<SeedSet> {
        if voxels.is_empty() {
            return Err(argument("seed set must not be empty"));
        }
        let slots = voxels
            .iter()
            .map(|v| {
                band.slot(*v)
                    .ok_or_else(|| argument(format!("seed voxel {v:?} is not active")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeedSet {
            slots,
            provenance: SeedProvenance::Explicit,
        })
    }
}

/// Picks the seed point by `policy` and returns its containing voxel as a singleton seed.
pub fn select_seed(cloud: &PointCloud, band: &NarrowBand, policy: SeedPolicy) -> Result<SeedSet> {
    let point = match policy {
        SeedPolicy::FixedIndex(i) => {
            if i >= cloud.len() {
                return Err(argument(format!(
                    "seed index {i} out of range for {} points",
                    cloud.len()
                )));
            }
            i
        }
        SeedPolicy::MinCoordinate(axis) => {
            let a = axis.index();
            let mut best = 0;
            for (i, p) in cloud.points().iter().enumerate() {
                if p[a] < cloud.point(best)[a] {
                    best = i;
                }
            }
            best
        }
    };
    let voxel = band.grid().containing_voxel(&cloud.point(point));
    let slot = band.slot(voxel).ok_or_else(|| {
        NptcError::Internal(format!(
            "voxel {voxel:?} of seed point {point} is not in the narrow band"
        ))
    })?;
    Ok(SeedSet {
        slots: vec![slot],
        provenance: SeedProvenance::SinglePoint(point),
    })
}

/// Fast-marching solution on the active voxels. Unreached voxels hold `+inf`.
#[derive(Debug, Clone)]
pub struct GridScalarField {
    values: Vec<f64>,
    accepted: Vec<bool>,
    order: Vec<u32>,
}

impl GridScalarField {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, slot: usize) -> f64 {
        self.values[slot]
    }

    #[inline]
    pub fn is_accepted(&self, slot: usize) -> bool {
        self.accepted[slot]
    }

    /// Slots in the order they were frozen.
    pub fn acceptance_order(&self) -> &[u32] {
        &self.order
    }

    pub fn unreached_count(&self) -> usize {
        self.accepted.iter().filter(|a| !**a).count()
    }

    /// Rebuilds a field from stored per-slot values (`+inf` marks unreached).
    pub fn from_values(values: Vec<f64>) -> Self {
        let accepted: Vec<bool> = values.iter().map(|v| v.is_finite()).collect();
        let mut order: Vec<u32> = (0..values.len() as u32)
            .filter(|&s| accepted[s as usize])
            .collect();
        order.sort_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]).then(a.cmp(&b)));
        Self {
            values,
            accepted,
            order,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Trial {
    value: f64,
    slot: u32,
}

impl Eq for Trial {}

impl Ord for Trial {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (value, slot)
        other
            .value
            .total_cmp(&self.value)
            .then(other.slot.cmp(&self.slot))
    }
}

impl PartialOrd for Trial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves `sum_i max(0, (rho - a_i) / h)^2 = 1` for the upwind neighbour values `a`
/// (`+inf` entries are ignored). Returns `+inf` when no neighbour is known.
pub fn upwind_update(mut a: [f64; 3], h: f64) -> f64 {
    a.sort_by(f64::total_cmp);
    if !a[0].is_finite() {
        return f64::INFINITY;
    }
    let mut rho = a[0] + h;
    let mut sum = a[0];
    let mut sum_sq = a[0] * a[0];
    for n in 2..=3 {
        let next = a[n - 1];
        if !(next.is_finite() && rho > next) {
            break;
        }
        sum += next;
        sum_sq += next * next;
        let nf = n as f64;
        // n rho^2 - 2 sum rho + sum_sq - h^2 = 0
        let disc = sum * sum - nf * (sum_sq - h * h);
        rho = (sum + disc.max(0.0).sqrt()) / nf;
    }
    rho
}

pub fn fast_marching(band: &NarrowBand, seeds: &SeedSet) -> Result<GridScalarField> {
    let initial: Vec<(usize, f64)> = seeds.slots.iter().map(|&s| (s, 0.0)).collect();
    fast_marching_from(band, &initial)
}

/// Fast marching from prescribed initial values `(slot, rho)`.
pub fn fast_marching_from(band: &NarrowBand, initial: &[(usize, f64)]) -> Result<GridScalarField> {
    let n = band.len();
    if initial.is_empty() {
        return Err(argument("seed set must not be empty"));
    }
    let h = band.grid().spacing();
    let mut values = vec![f64::INFINITY; n];
    let mut accepted = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    for &(s, v0) in initial {
        if s >= n {
            return Err(argument(format!("seed slot {s} is not active")));
        }
        if !(v0 >= 0.0 && v0.is_finite()) {
            return Err(argument(format!("initial value {v0} must be finite and non-negative")));
        }
        if v0 < values[s] {
            values[s] = v0;
            heap.push(Trial { value: v0, slot: s as u32 });
        }
    }

    while let Some(Trial { value, slot }) = heap.pop() {
        let s = slot as usize;
        if accepted[s] || value > values[s] {
            continue;
        }
        accepted[s] = true;
        order.push(slot);
        let v = band.voxel(s);
        for axis in 0..3 {
            for delta in [-1isize, 1] {
                let Some(t) = band.neighbor_slot(v, axis, delta) else {
                    continue;
                };
                if accepted[t] {
                    continue;
                }
                let candidate = upwind_update(upwind_minima(band, &values, &accepted, t), h);
                if candidate < values[t] {
                    values[t] = candidate;
                    heap.push(Trial {
                        value: candidate,
                        slot: t as u32,
                    });
                }
            }
        }
    }

    let field = GridScalarField {
        values,
        accepted,
        order,
    };
    if let Some(s) = (0..n).find(|&s| band.is_occupied(s) && !field.accepted[s]) {
        return Err(NptcError::DisconnectedBand(format!(
            "voxel {:?} holds cloud points but is not connected to the seed through the band \
             ({} active voxels unreached)",
            band.voxel(s),
            field.unreached_count()
        )));
    }
    Ok(field)
}

fn upwind_minima(band: &NarrowBand, values: &[f64], accepted: &[bool], slot: usize) -> [f64; 3] {
    let v = band.voxel(slot);
    let mut a = [f64::INFINITY; 3];
    for (axis, out) in a.iter_mut().enumerate() {
        for delta in [-1isize, 1] {
            if let Some(t) = band.neighbor_slot(v, axis, delta) {
                if accepted[t] && values[t] < *out {
                    *out = values[t];
                }
            }
        }
    }
    a
}

/// `rho` carried onto the cloud points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointScalarField {
    pub values: Vec<f64>,
    pub out_of_band: Vec<bool>,
}

impl PointScalarField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Trilinear interpolation from the 8 surrounding voxel centres, using only accepted
/// active voxels and renormalizing their weights.
pub fn interpolate_to_points(
    field: &GridScalarField,
    band: &NarrowBand,
    cloud: &PointCloud,
) -> Result<PointScalarField> {
    if field.values.len() != band.len() {
        return Err(argument("field does not belong to this narrow band"));
    }
    let grid = band.grid();
    let m = grid.resolution() as isize;
    let results: Vec<Result<(f64, bool)>> = cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let home = grid.containing_voxel(p);
            let home_slot = band.slot(home).filter(|&s| field.accepted[s]);
            let Some(home_slot) = home_slot else {
                return Err(NptcError::DisconnectedBand(format!(
                    "point {i} lies in voxel {home:?} which has no distance value"
                )));
            };
            let mut base = [0isize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let g = p[a] * m as f64 - 0.5;
                let f = g.floor();
                base[a] = f as isize;
                frac[a] = g - f;
            }
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut v = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    let c = base[a] + bit as isize;
                    if c < 0 || c >= m {
                        inside = false;
                        break;
                    }
                    v[a] = c as usize;
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                }
                if !inside || w == 0.0 {
                    continue;
                }
                if let Some(s) = band.slot(v).filter(|&s| field.accepted[s]) {
                    acc += w * field.values[s];
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                Ok((acc / wsum, false))
            } else {
                Ok((field.values[home_slot], true))
            }
        })
        .collect();
    let mut values = Vec::with_capacity(cloud.len());
    let mut out_of_band = Vec::with_capacity(cloud.len());
    for r in results {
        let (v, o) = r?;
        values.push(v);
        out_of_band.push(o);
    }
    Ok(PointScalarField {
        values,
        out_of_band,
    })
}
