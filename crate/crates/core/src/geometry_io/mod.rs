//! Point clouds, unit-cube normalization, file I/O and exact k-NN queries.

mod io;
mod knn;

pub use io::{
    export_ply_with_colors, export_ply_with_scalars, load_cloud, scalar_colormap, write_ply,
    write_xyz, CloudFormat,
};
pub use knn::{brute_force_k_nearest, NeighborIndex};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{argument, NptcError, Result};

pub type Vec3 = Vector3<f64>;

/// Affine map from normalized coordinates back to raw coordinates:
/// `raw = scale * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Default for SourceTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl SourceTransform {
    pub const IDENTITY: SourceTransform = SourceTransform {
        scale: 1.0,
        offset: [0.0; 3],
    };

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        p * self.scale + Vec3::from(self.offset)
    }

    /// `self ∘ inner`: first `inner`, then `self`.
    fn compose(&self, inner: &SourceTransform) -> SourceTransform {
        let off = self.apply(&Vec3::from(inner.offset));
        SourceTransform {
            scale: self.scale * inner.scale,
            offset: off.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    source_transform: SourceTransform,
}

const NORMAL_TOLERANCE: f64 = 1e-6;

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(NptcError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(argument(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            normals: None,
            source_transform: SourceTransform::IDENTITY,
        })
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        cloud.set_normals(normals)?;
        Ok(cloud)
    }

    pub fn set_normals(&mut self, normals: Vec<Vec3>) -> Result<()> {
        if normals.len() != self.points.len() {
            return Err(argument(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals
            .iter()
            .position(|n| (n.norm() - 1.0).abs() > NORMAL_TOLERANCE)
        {
            return Err(argument(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(())
    }

    pub fn from_parts(
        points: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
        source_transform: SourceTransform,
    ) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if let Some(n) = normals {
            cloud.set_normals(n)?;
        }
        cloud.source_transform = source_transform;
        Ok(cloud)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    #[inline]
    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn source_transform(&self) -> SourceTransform {
        self.source_transform
    }

    /// Maps every point back to raw coordinates.
    pub fn raw_points(&self) -> Vec<Vec3> {
        self.points
            .iter()
            .map(|p| self.source_transform.apply(p))
            .collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c)))
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Sub-cloud made of the given point indices (normals and transform carried over).
    pub fn subset(&self, indices: &[usize]) -> Result<PointCloud> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        PointCloud::from_parts(points, normals, self.source_transform)
    }

    /// Replaces point coordinates, keeping normals and transform.
    pub fn with_points(&self, points: Vec<Vec3>) -> Result<PointCloud> {
        if points.len() != self.points.len() {
            return Err(argument("point count changed"));
        }
        PointCloud::from_parts(points, self.normals.clone(), self.source_transform)
    }
}

/// Isotropically scales and translates the cloud so its bounding box is centred in
/// `[margin, 1 - margin]^3` with the longest axis spanning exactly `1 - 2 * margin`.
///
/// A cloud whose points all coincide is moved to the cube centre with scale 1.
pub fn normalize_to_unit_cube(cloud: &PointCloud, margin: f64) -> Result<PointCloud> {
    if !(0.0..0.5).contains(&margin) {
        return Err(argument(format!("margin {margin} outside [0, 0.5)")));
    }
    let (lo, hi) = cloud.bounding_box();
    let center = (lo + hi) * 0.5;
    let extent = (hi - lo).max();
    let scale = if extent > 0.0 {
        (1.0 - 2.0 * margin) / extent
    } else {
        1.0
    };
    let half = Vec3::repeat(0.5);
    let points: Vec<Vec3> = cloud
        .points
        .iter()
        .map(|p| ((p - center) * scale + half).map(|c| c.clamp(0.0, 1.0)))
        .collect();
    // normalized -> previous coordinates, then previous -> raw
    let inverse = SourceTransform {
        scale: 1.0 / scale,
        offset: (center - half / scale).into(),
    };
    Ok(PointCloud {
        points,
        normals: cloud.normals.clone(),
        source_transform: cloud.source_transform.compose(&inverse),
    })
}
