//! Labelled point clouds sampled from parametric surfaces.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, NptcError, Result};
use crate::geometry_io::{load_cloud, normalize_to_unit_cube, write_xyz, CloudFormat, PointCloud, Vec3};

pub const NORMALIZE_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Torus,
    CubeSurface,
    Plane,
}

impl ShapeFamily {
    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Torus => "torus",
            ShapeFamily::CubeSurface => "cube-surface",
            ShapeFamily::Plane => "plane",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ShapeFamily::Sphere,
            ShapeFamily::Torus,
            ShapeFamily::CubeSurface,
            ShapeFamily::Plane,
        ]
        .into_iter()
        .find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeParams {
    pub sphere_radius: f64,
    pub torus_major: f64,
    pub torus_minor: f64,
    /// Half the edge length of the cube.
    pub cube_half: f64,
    /// Half the side of the square plane patch.
    pub plane_half: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            sphere_radius: 0.5,
            torus_major: 0.3,
            torus_minor: 0.1,
            cube_half: 0.5,
            plane_half: 0.5,
        }
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sphere_radius,
            self.torus_major,
            self.torus_minor,
            self.cube_half,
            self.plane_half,
        ];
        if all.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(argument("shape sizes must be positive"));
        }
        if self.torus_major <= self.torus_minor {
            return Err(argument("torus needs major radius > minor radius"));
        }
        Ok(())
    }
}

/// Surface samples in shape coordinates (centred at the origin, not normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSample {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Two parts per family: sphere and cube upper/lower half (z > 0), torus outer/inner
    /// half of the tube (cos of the tube angle > 0), plane x > 0.
    pub parts: Vec<usize>,
}

/// Area-uniform samples with analytic normals.
pub fn sample_surface(family: ShapeFamily, n: usize, params: &ShapeParams, rng: &mut impl Rng) -> Result<SurfaceSample> {
    if n < 16 {
        return Err(argument(format!("need at least 16 points, got {n}")));
    }
    params.validate()?;
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut parts = Vec::with_capacity(n);
    while points.len() < n {
        match family {
            ShapeFamily::Sphere => {
                let g = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let len = g.norm();
                if len < 1e-12 {
                    continue;
                }
                let u = g / len;
                points.push(u * params.sphere_radius);
                normals.push(u);
                parts.push(usize::from(u.z > 0.0));
            }
            ShapeFamily::Torus => {
                let (big, r) = (params.torus_major, params.torus_minor);
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                // the area element is proportional to R + r cos v
                if rng.random_range(0.0..big + r) > big + r * v.cos() {
                    continue;
                }
                let ring = big + r * v.cos();
                let (su, cu) = u.sin_cos();
                points.push(Vec3::new(ring * cu, ring * su, r * v.sin()));
                normals.push(Vec3::new(v.cos() * cu, v.cos() * su, v.sin()));
                parts.push(usize::from(v.cos() > 0.0));
            }
            ShapeFamily::CubeSurface => {
                let a = params.cube_half;
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = Vec3::new(rng.random_range(-a..a), rng.random_range(-a..a), rng.random_range(-a..a));
                p[axis] = sign * a;
                let mut nrm = Vec3::zeros();
                nrm[axis] = sign;
                parts.push(usize::from(p.z > 0.0));
                points.push(p);
                normals.push(nrm);
            }
            ShapeFamily::Plane => {
                let a = params.plane_half;
                let p = Vec3::new(rng.random_range(-a..a), rng.random_range(-a..a), 0.0);
                parts.push(usize::from(p.x > 0.0));
                points.push(p);
                normals.push(Vec3::z());
            }
        }
    }
    Ok(SurfaceSample { points, normals, parts })
}

pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if q.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

/// A normalized labelled cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub parts: Vec<usize>,
}

/// Samples a surface, optionally rotates it, and normalizes it into the unit cube.
pub fn sample_shape(
    family: ShapeFamily,
    n: usize,
    params: &ShapeParams,
    rotation: Option<UnitQuaternion<f64>>,
    rng: &mut impl Rng,
) -> Result<LabeledCloud> {
    let s = sample_surface(family, n, params, rng)?;
    let (points, normals) = match rotation {
        Some(q) => (
            s.points.iter().map(|p| q * p).collect(),
            s.normals.iter().map(|v| q * v).collect(),
        ),
        None => (s.points, s.normals),
    };
    let cloud = normalize_to_unit_cube(&PointCloud::with_normals(points, normals)?, NORMALIZE_MARGIN)?;
    Ok(LabeledCloud { cloud, parts: s.parts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// One class per family, in this order.
    pub families: Vec<ShapeFamily>,
    pub clouds_per_class: usize,
    pub points_per_cloud: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Apply an independent random rotation to every cloud.
    pub rotate: bool,
    pub params: ShapeParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            families: vec![ShapeFamily::Sphere, ShapeFamily::Torus, ShapeFamily::CubeSurface],
            clouds_per_class: 100,
            points_per_cloud: 512,
            seed: 0,
            test_fraction: 0.2,
            rotate: true,
            params: ShapeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub cloud: PointCloud,
    pub label: usize,
    pub parts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub entries: Vec<DatasetEntry>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Generates `clouds_per_class` clouds per family. Cloud `i` draws from stream `i` of the
/// seed, so the result does not depend on thread scheduling. The split is stratified:
/// each class contributes `round((1 - test_fraction) * clouds_per_class)` training clouds.
pub fn make_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    if spec.families.is_empty() || spec.clouds_per_class == 0 {
        return Err(argument("dataset needs at least one family and one cloud per class"));
    }
    if !(0.0..=1.0).contains(&spec.test_fraction) {
        return Err(argument("test fraction must lie in [0, 1]"));
    }
    let per = spec.clouds_per_class;
    let total = per * spec.families.len();
    let entries = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let label = i / per;
            let rotation = spec.rotate.then(|| random_rotation(&mut rng));
            let s = sample_shape(spec.families[label], spec.points_per_cloud, &spec.params, rotation, &mut rng)?;
            Ok(DatasetEntry {
                cloud: s.cloud,
                label,
                parts: s.parts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_train = ((1.0 - spec.test_fraction) * per as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..spec.families.len() {
        let mut idx: Vec<usize> = (c * per..(c + 1) * per).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        entries,
        train,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    parts_file: String,
    label: usize,
    class_name: String,
    split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes `cloud_NNNN.xyz` (with normals), `cloud_NNNN.parts` and `manifest.json`.
pub fn write_dataset(dir: &Path, ds: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let test: std::collections::HashSet<usize> = ds.test.iter().copied().collect();
    let mut entries = Vec::with_capacity(ds.entries.len());
    for (i, e) in ds.entries.iter().enumerate() {
        let file = format!("cloud_{i:04}.xyz");
        let parts_file = format!("cloud_{i:04}.parts");
        write_xyz(&dir.join(&file), &e.cloud)?;
        let parts: String = e.parts.iter().map(|p| format!("{p}\n")).collect();
        std::fs::write(dir.join(&parts_file), parts)?;
        entries.push(ManifestEntry {
            file,
            parts_file,
            label: e.label,
            class_name: ds.spec.families[e.label].name().to_string(),
            split: if test.contains(&i) { "test" } else { "train" }.to_string(),
        });
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NptcError::Internal(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| NptcError::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, m) in manifest.entries.iter().enumerate() {
        let cloud = load_cloud(&dir.join(&m.file), CloudFormat::XyzText)?;
        let parts_path = dir.join(&m.parts_file);
        let parts = std::fs::read_to_string(&parts_path)?
            .lines()
            .enumerate()
            .map(|(ln, l)| {
                l.trim().parse::<usize>().map_err(|_| NptcError::Parse {
                    line: ln + 1,
                    message: format!("{}: bad part label", parts_path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() != cloud.len() {
            return Err(NptcError::Parse {
                line: 0,
                message: format!("{}: {} labels for {} points", parts_path.display(), parts.len(), cloud.len()),
            });
        }
        match m.split.as_str() {
            "train" => train.push(i),
            "test" => test.push(i),
            other => {
                return Err(NptcError::Parse {
                    line: 0,
                    message: format!("{}: unknown split {other}", path.display()),
                })
            }
        }
        entries.push(DatasetEntry {
            cloud,
            label: m.label,
            parts,
        });
    }
    Ok(SyntheticDataset {
        spec: manifest.spec,
        entries,
        train,
        test,
    })
}
