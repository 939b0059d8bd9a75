//! Tangent frames `(u1, u2, n)` per point.
//!
//! `n` comes from the input normals or from local PCA, `u1` is the least-squares
//! gradient of `rho` projected onto the tangent plane, and `u2 = u1 x n`.

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eikonal::PointScalarField;
use crate::error::{argument, NptcError, Result};
use crate::geometry_io::{NeighborIndex, PointCloud, Vec3};

/// Default neighbourhood size for both PCA and the gradient fit.
pub const DEFAULT_K: usize = 16;
/// Projected gradients shorter than this mark the point singular.
pub const SINGULAR_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalBasis {
    /// Eigenvector of the largest covariance eigenvalue.
    pub t1: Vec3,
    pub t2: Vec3,
    /// Eigenvector of the smallest eigenvalue.
    pub normal: Vec3,
    pub degenerate: bool,
}

/// Flips `v` so its first component with magnitude above `1e-12` is positive.
fn canonical_sign(v: Vec3) -> Vec3 {
    for c in v.iter() {
        if c.abs() > 1e-12 {
            return if *c < 0.0 { -v } else { v };
        }
    }
    v
}

/// Local PCA over each point's `k` nearest neighbours (the point included).
pub fn lpca_basis(cloud: &PointCloud, index: &NeighborIndex, k: usize) -> Result<Vec<LocalBasis>> {
    if k < 4 {
        return Err(argument(format!("k = {k} must be at least 4")));
    }
    if k > cloud.len() {
        return Err(argument(format!("k = {k} exceeds the {} points", cloud.len())));
    }
    cloud
        .points()
        .par_iter()
        .map(|x| {
            let nbrs = index.k_nearest(x, k)?;
            let pts: Vec<Vec3> = nbrs.iter().map(|&j| cloud.point(j)).collect();
            Ok(basis_of(&pts))
        })
        .collect()
}

fn basis_of(pts: &[Vec3]) -> LocalBasis {
    let c: Vec3 = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - c;
        cov += d * d.transpose();
    }
    if !(cov.trace() > 1e-30) {
        return LocalBasis {
            t1: Vec3::x(),
            t2: Vec3::y(),
            normal: Vec3::z(),
            degenerate: true,
        };
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let col = |i: usize| canonical_sign(eig.eigenvectors.column(order[i]).into_owned().normalize());
    LocalBasis {
        t1: col(0),
        t2: col(1),
        normal: col(2),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEstimate {
    pub gradient: Vec3,
    pub rank_deficient: bool,
}

/// Least-squares `grad rho` from the `k - 1` nearest other points, with a Tikhonov term
/// `lambda = 1e-8 * (mean |x_k - x|)^2`.
pub fn ls_gradient(
    cloud: &PointCloud,
    index: &NeighborIndex,
    rho: &PointScalarField,
    k: usize,
) -> Result<Vec<GradientEstimate>> {
    if k < 4 {
        return Err(argument(format!("k = {k} must be at least 4")));
    }
    if k > cloud.len() {
        return Err(argument(format!("k = {k} exceeds the {} points", cloud.len())));
    }
    if rho.len() != cloud.len() {
        return Err(argument("rho has a different length than the cloud"));
    }
    cloud
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let nbrs = index.k_nearest(x, k)?;
            let others = nbrs.into_iter().filter(|&j| j != i).take(k - 1);
            let mut ata = Matrix3::zeros();
            let mut atb = Vec3::zeros();
            let mut mean_len = 0.0;
            let mut count = 0usize;
            for j in others {
                if rho.out_of_band[j] {
                    return Err(NptcError::DisconnectedBand(format!(
                        "neighbour {j} of point {i} has no distance value"
                    )));
                }
                let d = cloud.point(j) - x;
                let b = rho.values[j] - rho.values[i];
                ata += d * d.transpose();
                atb += d * b;
                mean_len += d.norm();
                count += 1;
            }
            mean_len /= count.max(1) as f64;
            let lambda = 1e-8 * mean_len * mean_len;
            let eig = ata.symmetric_eigenvalues();
            let (lo, hi) = (eig.min(), eig.max());
            let rank_deficient = !(lo > 1e-9 * hi);
            let system = ata + Matrix3::identity() * lambda;
            let gradient = match system.cholesky() {
                Some(ch) if lambda > 0.0 || !rank_deficient => ch.solve(&atb),
                _ => Vec3::zeros(),
            };
            Ok(GradientEstimate {
                gradient,
                rank_deficient,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalPolicy {
    /// Normals stored with the cloud.
    UseInput,
    /// PCA normals flipped to point away from the cloud centroid.
    LpcaCentroidOriented,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentFrame {
    pub u1: Vec3,
    pub u2: Vec3,
    pub n: Vec3,
    pub singular: bool,
}

impl TangentFrame {
    /// Orthonormality within `tol` on all pairwise products and norms.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let unit = |v: &Vec3| (v.norm() - 1.0).abs() <= tol;
        unit(&self.u1)
            && unit(&self.u2)
            && unit(&self.n)
            && self.u1.dot(&self.u2).abs() <= tol
            && self.u1.dot(&self.n).abs() <= tol
            && self.u2.dot(&self.n).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameField {
    frames: Vec<TangentFrame>,
    seed_point: Option<usize>,
    singular_count: usize,
}

impl FrameField {
    pub fn new(frames: Vec<TangentFrame>, seed_point: Option<usize>) -> Self {
        let singular_count = frames.iter().filter(|f| f.singular).count();
        Self {
            frames,
            seed_point,
            singular_count,
        }
    }

    pub fn frames(&self) -> &[TangentFrame] {
        &self.frames
    }

    #[inline]
    pub fn frame(&self, i: usize) -> &TangentFrame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn seed_point(&self) -> Option<usize> {
        self.seed_point
    }

    pub fn singular_count(&self) -> usize {
        self.singular_count
    }

    /// Frames of the given points, re-indexed `0..indices.len()`.
    pub fn subset(&self, indices: &[usize]) -> FrameField {
        let seed = self
            .seed_point
            .and_then(|s| indices.iter().position(|&i| i == s));
        FrameField::new(indices.iter().map(|&i| self.frames[i]).collect(), seed)
    }

    /// FNV-1a over the bit patterns of all frame vectors; identifies the field an
    /// operator was built from.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for f in &self.frames {
            for v in [f.u1, f.u2, f.n] {
                for c in v.iter() {
                    eat(c.to_bits());
                }
            }
            eat(f.singular as u64);
        }
        h
    }
}

/// Any unit vector perpendicular to `n`, preferring the projection of `hint`.
fn tangent_from(hint: Vec3, n: Vec3) -> Vec3 {
    let p = hint - n * hint.dot(&n);
    if p.norm() > 1e-9 {
        return p.normalize();
    }
    let axis = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    (axis - n * axis.dot(&n)).normalize()
}

/// Assembles the frame field from `rho`.
///
/// The seed point and any point whose projected gradient is shorter than
/// [`SINGULAR_THRESHOLD`] are singular; they fall back to the PCA principal direction.
pub fn build_frame_field(
    cloud: &PointCloud,
    index: &NeighborIndex,
    rho: &PointScalarField,
    seed_point: Option<usize>,
    k: usize,
    policy: NormalPolicy,
) -> Result<FrameField> {
    if rho.out_of_band.iter().any(|&o| o) {
        return Err(NptcError::DisconnectedBand(
            "distance field has points outside the band".into(),
        ));
    }
    let basis = lpca_basis(cloud, index, k)?;
    let normals: Vec<(Vec3, bool)> = match policy {
        NormalPolicy::UseInput => {
            let n = cloud
                .normals()
                .ok_or_else(|| argument("normal policy use-input needs a cloud with normals"))?;
            n.iter().map(|n| (*n, false)).collect()
        }
        NormalPolicy::LpcaCentroidOriented => {
            let c = cloud.centroid();
            basis
                .iter()
                .zip(cloud.points())
                .map(|(b, x)| {
                    let n = if b.normal.dot(&(x - c)) < -1e-12 {
                        -b.normal
                    } else {
                        b.normal
                    };
                    (n, b.degenerate)
                })
                .collect()
        }
    };
    let grads = ls_gradient(cloud, index, rho, k)?;
    let frames = (0..cloud.len())
        .map(|i| {
            let (n, degenerate) = normals[i];
            let g = grads[i].gradient;
            let proj = g - n * g.dot(&n);
            let singular = degenerate || Some(i) == seed_point || proj.norm() < SINGULAR_THRESHOLD;
            let u1 = if singular {
                tangent_from(basis[i].t1, n)
            } else {
                proj.normalize()
            };
            let u2 = u1.cross(&n).normalize();
            TangentFrame {
                u1,
                u2,
                n,
                singular,
            }
        })
        .collect();
    Ok(FrameField::new(frames, seed_point))
}
