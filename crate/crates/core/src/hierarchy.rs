//! Farthest point sampling and nested point levels.

use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, Result};
use crate::geometry_io::{NeighborIndex, PointCloud, Vec3};
use crate::tensor::{Real, Tensor2};

/// Greedy farthest point sampling of `n` points from `subset`, starting at `start`.
///
/// Each step appends the unselected point whose distance to the selection is largest;
/// ties go to the lowest point index.
pub fn farthest_point_sampling(
    cloud: &PointCloud,
    subset: &[usize],
    n: usize,
    start: usize,
) -> Result<Vec<usize>> {
    fps_points(cloud.points(), subset, n, start)
}

fn fps_points(points: &[Vec3], subset: &[usize], n: usize, start: usize) -> Result<Vec<usize>> {
    if n > subset.len() {
        return Err(argument(format!(
            "cannot sample {n} points from a subset of {}",
            subset.len()
        )));
    }
    let Some(start_pos) = subset.iter().position(|&i| i == start) else {
        return Err(argument(format!("start point {start} is not in the subset")));
    };
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut min_d2 = vec![f64::INFINITY; subset.len()];
    let mut taken = vec![false; subset.len()];
    let mut picked = Vec::with_capacity(n);
    let mut current = start_pos;
    loop {
        taken[current] = true;
        picked.push(subset[current]);
        if picked.len() == n {
            break;
        }
        let c = points[subset[current]];
        let mut best: Option<(f64, usize)> = None;
        for (pos, &i) in subset.iter().enumerate() {
            if taken[pos] {
                continue;
            }
            let d2 = (points[i] - c).norm_squared();
            if d2 < min_d2[pos] {
                min_d2[pos] = d2;
            }
            let d = min_d2[pos];
            let better = match best {
                None => true,
                Some((bd, bpos)) => d > bd || (d == bd && i < subset[bpos]),
            };
            if better {
                best = Some((d, pos));
            }
        }
        current = best.expect("unselected points remain").1;
    }
    Ok(picked)
}

/// Nested FPS levels over a base cloud. Level 0 is every point in index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointHierarchy {
    levels: Vec<Vec<usize>>,
    /// `coarse_maps[i - 1][j]`: position in `levels[i]` of the point nearest to
    /// `levels[i - 1][j]` (ties: lowest position).
    coarse_maps: Vec<Vec<usize>>,
}

impl PointHierarchy {
    pub fn levels(&self) -> &[Vec<usize>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &[usize] {
        &self.levels[i]
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Nearest-coarse map from level `i - 1` into level `i`.
    pub fn coarse_map(&self, i: usize) -> &[usize] {
        &self.coarse_maps[i - 1]
    }

    /// Positions of level `i`'s points inside the level `i - 1` list.
    pub fn positions_in_parent(&self, i: usize) -> Vec<usize> {
        let parent = &self.levels[i - 1];
        let mut pos_of = std::collections::HashMap::with_capacity(parent.len());
        for (p, &idx) in parent.iter().enumerate() {
            pos_of.insert(idx, p);
        }
        self.levels[i].iter().map(|idx| pos_of[idx]).collect()
    }
}

/// Level sizes `round(ratio * N)`; `ratios[0]` must be 1 and sizes strictly decreasing.
pub fn level_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || (ratios[0] - 1.0).abs() > 1e-12 {
        return Err(argument("hierarchy ratios must start with 1"));
    }
    let sizes: Vec<usize> = ratios
        .iter()
        .map(|r| (r * n as f64).round() as usize)
        .collect();
    for w in sizes.windows(2) {
        if w[1] >= w[0] {
            return Err(argument(format!(
                "level sizes {sizes:?} are not strictly decreasing"
            )));
        }
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(argument(format!("level sizes {sizes:?} include an empty level")));
    }
    Ok(sizes)
}

pub fn build_hierarchy(cloud: &PointCloud, ratios: &[f64], start: usize) -> Result<PointHierarchy> {
    let sizes = level_sizes(cloud.len(), ratios)?;
    if start >= cloud.len() {
        return Err(argument(format!("start point {start} out of range")));
    }
    let mut levels = vec![(0..cloud.len()).collect::<Vec<_>>()];
    let mut coarse_maps = Vec::new();
    for &size in &sizes[1..] {
        let prev = levels.last().expect("level 0 exists");
        let next = farthest_point_sampling(cloud, prev, size, start)?;
        let coarse_pts: Vec<Vec3> = next.iter().map(|&i| cloud.point(i)).collect();
        let index = NeighborIndex::from_points(&coarse_pts);
        let map = prev
            .iter()
            .map(|&i| index.nearest(&cloud.point(i)).0)
            .collect();
        coarse_maps.push(map);
        levels.push(next);
    }
    Ok(PointHierarchy {
        levels,
        coarse_maps,
    })
}

/// Copies each level-`level` feature row onto the level-`level - 1` points it is nearest to.
pub fn upsample_nn<T: Real>(
    coarse: &Tensor2<T>,
    hierarchy: &PointHierarchy,
    level: usize,
) -> Result<Tensor2<T>> {
    if level == 0 || level >= hierarchy.depth() {
        return Err(argument(format!("no level {level} to upsample from")));
    }
    if coarse.rows() != hierarchy.levels[level].len() {
        return Err(shape(format!(
            "coarse features have {} rows, level {level} has {} points",
            coarse.rows(),
            hierarchy.levels[level].len()
        )));
    }
    Ok(coarse.select_rows(hierarchy.coarse_map(level)))
}
