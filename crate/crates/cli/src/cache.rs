//! Per-cloud geometry caches (hierarchy plus operators) for dataset training.
//!
//! Little-endian layout:
//!
//! ```text
//! "NPTCGEOM" | version u32 | upstream hash [u8; 32]
//! | hierarchy JSON length u32 | hierarchy JSON
//! | level operator count u32 | per operator: length u32 | operator cache bytes
//! | strided operator count u32 | per operator: length u32 | operator cache bytes
//! ```

use std::path::{Path, PathBuf};

use nptc::geometry_io::normalize_to_unit_cube;
use nptc::hierarchy::PointHierarchy;
use nptc::network::{CloudGeometry, NetworkConfig, Sample};
use nptc::operator::NptcOperator;
use nptc::pipeline::{build_geometry, prepare_cloud, PipelineConfig};
use nptc::synthetic::{SyntheticDataset, NORMALIZE_MARGIN};
use nptc::NptcError;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::artifact::{read_cached, sha256_bytes};

const MAGIC: &[u8; 8] = b"NPTCGEOM";
const VERSION: u32 = 1;

fn corrupt(path: &Path, m: &str) -> NptcError {
    NptcError::CacheMiss(format!("{}: {m}", path.display()))
}

pub fn encode_geometry(geom: &CloudGeometry, upstream: &[u8; 32]) -> Vec<u8> {
    let mut buf = Vec::new();
    let put = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(MAGIC);
    put(&mut buf, VERSION);
    buf.extend_from_slice(upstream);
    let h = serde_json::to_vec(&geom.hierarchy).expect("hierarchy serializes");
    put(&mut buf, h.len() as u32);
    buf.extend_from_slice(&h);
    for ops in [&geom.level_ops, &geom.down_ops] {
        put(&mut buf, ops.len() as u32);
        for op in ops {
            let bytes = op.encode(upstream);
            put(&mut buf, bytes.len() as u32);
            buf.extend_from_slice(&bytes);
        }
    }
    buf
}

/// Decodes a geometry cache and checks it was built from `upstream`.
pub fn decode_geometry(bytes: &[u8], upstream: &[u8; 32], path: &Path) -> nptc::Result<CloudGeometry> {
    let mut rest = bytes;
    let mut take = |n: usize| -> nptc::Result<&[u8]> {
        if rest.len() < n {
            return Err(corrupt(path, "truncated geometry cache"));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(corrupt(path, "not a geometry cache"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    if u32_of(take(4)?) != VERSION {
        return Err(corrupt(path, "unsupported geometry cache version"));
    }
    if take(32)? != upstream {
        return Err(corrupt(path, "geometry cache was built from a different cloud or config"));
    }
    let len = u32_of(take(4)?) as usize;
    let hierarchy: PointHierarchy = serde_json::from_slice(take(len)?)
        .map_err(|e| corrupt(path, &format!("bad hierarchy: {e}")))?;
    let mut lists = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = u32_of(take(4)?) as usize;
        let mut ops = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_of(take(4)?) as usize;
            let (op, hash) = NptcOperator::decode(take(len)?)?;
            if &hash != upstream {
                return Err(corrupt(path, "operator hash does not match its cache"));
            }
            ops.push(op);
        }
        lists.push(ops);
    }
    if !rest.is_empty() {
        return Err(corrupt(path, "trailing bytes in geometry cache"));
    }
    let down_ops = lists.pop().expect("two lists");
    let level_ops = lists.pop().expect("two lists");
    Ok(CloudGeometry {
        hierarchy,
        level_ops,
        down_ops,
    })
}

/// Cache key: the cloud file's hash plus every setting that shapes the geometry.
pub fn geometry_key(cloud_bytes: &[u8], pcfg: &PipelineConfig, ncfg: &NetworkConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(sha256_bytes(cloud_bytes));
    h.update(serde_json::to_vec(pcfg).expect("config serializes"));
    h.update(serde_json::to_vec(&ncfg.ratios).expect("ratios serialize"));
    h.update(serde_json::to_vec(&ncfg.kernels).expect("kernels serialize"));
    h.finalize().into()
}

/// Builds training samples for a dataset written by `gen-data`, reusing cached geometry
/// under `cache_dir` and writing any that is missing.
pub fn dataset_samples(
    data_dir: &Path,
    ds: &SyntheticDataset,
    pcfg: &PipelineConfig,
    ncfg: &NetworkConfig,
    cache_dir: &Path,
) -> nptc::Result<Vec<Sample>> {
    std::fs::create_dir_all(cache_dir)?;
    ds.entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let name = format!("cloud_{i:04}");
            let bytes = read_cached(&data_dir.join(format!("{name}.xyz")))?;
            let key = geometry_key(&bytes, pcfg, ncfg);
            let path: PathBuf = cache_dir.join(format!("{}.geom", hex::encode(key)));
            let cloud = if e.cloud.is_normalized() {
                e.cloud.clone()
            } else {
                normalize_to_unit_cube(&e.cloud, NORMALIZE_MARGIN)?
            };
            let cached = std::fs::read(&path).ok().and_then(|b| decode_geometry(&b, &key, &path).ok());
            let geometry = match cached {
                Some(g) => g,
                None => {
                    let prepared = prepare_cloud(&cloud, pcfg).map_err(|err| match err {
                        NptcError::DisconnectedBand(m) => NptcError::DisconnectedBand(format!("{name}: {m}")),
                        other => other,
                    })?;
                    let g = build_geometry(&prepared.cloud, &prepared.frames, &ncfg.ratios, &ncfg.kernels, pcfg.fps_start)?;
                    std::fs::write(&path, encode_geometry(&g, &key))?;
                    g
                }
            };
            Ok(Sample {
                name,
                points: cloud.points().to_vec(),
                geometry: Some(geometry),
                label: e.label,
                part_labels: Some(e.parts.clone()),
            })
        })
        .collect()
}
