use std::cmp::Ordering;

use super::{PointCloud, Vec3};
use crate::error::{argument, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Static k-d tree over a cloud's points.
///
/// Every query returns exactly what sorting all points by squared Euclidean
/// distance would, with ties broken by the lowest point index.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    perm: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist2: f64,
    index: u32,
}

impl Candidate {
    #[inline]
    fn cmp_key(&self, other: &Candidate) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

#[inline]
fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl NeighborIndex {
    pub fn new(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        let mut index = NeighborIndex {
            points: points.to_vec(),
            perm: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build(0, points.len());
        }
        index
    }

    fn build(&mut self, start: usize, end: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.perm[start..end] {
            let p = &self.points[i as usize];
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        if hi[axis] <= lo[axis] {
            // all coincident
            self.nodes.push(Node::Leaf {
                start: start as u32,
                end: end as u32,
            });
            return id;
        }
        let mid = (start + end) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis].total_cmp(&points[b as usize][axis])
        });
        let value = self.points[self.perm[mid] as usize][axis];
        self.nodes.push(Node::Split {
            axis: axis as u8,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id as usize]
        {
            *l = left;
            *r = right;
        }
        id
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    /// The `k` closest points to `query`, ascending by distance (ties: lowest index).
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Result<Vec<usize>> {
        Ok(self
            .k_nearest_with_distances(query, k)?
            .into_iter()
            .map(|(i, _)| i)
            .collect())
    }

    /// Like [`k_nearest`](Self::k_nearest) but also returns squared distances.
    pub fn k_nearest_with_distances(&self, query: &Vec3, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.len() {
            return Err(argument(format!(
                "k = {k} must be in 1..={} for this cloud",
                self.len()
            )));
        }
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        self.search(0, query, k, &mut best);
        Ok(best
            .into_iter()
            .map(|c| (c.index as usize, c.dist2))
            .collect())
    }

    /// Nearest point index and its Euclidean distance.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        assert!(!self.is_empty());
        let mut best = Vec::with_capacity(2);
        self.search(0, query, 1, &mut best);
        (best[0].index as usize, best[0].dist2.sqrt())
    }

    fn search(&self, node: u32, query: &Vec3, k: usize, best: &mut Vec<Candidate>) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start as usize..end as usize] {
                    let cand = Candidate {
                        dist2: dist2(&self.points[i as usize], query),
                        index: i,
                    };
                    if best.len() == k {
                        if cand.cmp_key(&best[k - 1]) != Ordering::Less {
                            continue;
                        }
                        best.pop();
                    }
                    let pos = best
                        .binary_search_by(|c| c.cmp_key(&cand))
                        .unwrap_or_else(|e| e);
                    best.insert(pos, cand);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[axis as usize] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, best);
                // `<=` keeps equidistant points with lower indices reachable.
                if best.len() < k || diff * diff <= best[k - 1].dist2 {
                    self.search(far, query, k, best);
                }
            }
        }
    }
}

/// Reference answer for [`NeighborIndex::k_nearest`]: full sort by (distance, index).
pub fn brute_force_k_nearest(points: &[Vec3], query: &Vec3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}
