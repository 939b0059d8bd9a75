//! The NPTC operator as a gather table.
//!
//! For an output point `x` with frame `(u1, u2)` the kernel is a `K x K` grid of taps
//!
//! ```text
//! v_pq = x + (p - c) * delta * u1 + (q - c) * delta * u2,    c = (K - 1) / 2
//! ```
//!
//! and each tap reads the feature of the input point nearest to `v_pq`. Taps are stored
//! row-major over `(p, q)`. Applying the operator is then a gather followed by a dense
//! contraction with a `K^2 x C_in x C_out` weight tensor.
//!
//! Taps that land outside the cloud's support snap to the nearest existing point, so a
//! row may repeat source indices. The corner taps of the square reach beyond the radius
//! `(K - 1) / 2 * delta` and are not masked.

use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, shape, NptcError, Result};
use crate::frames::FrameField;
use crate::geometry_io::{NeighborIndex, PointCloud};
use crate::tensor::{Real, Tensor2};

/// Spacing between neighbouring taps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum TapSpacing {
    Fixed(f64),
    /// `alpha` times the mean distance from each input point to its 8th nearest neighbour.
    Auto { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub taps_per_axis: usize,
    pub spacing: TapSpacing,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            taps_per_axis: 3,
            spacing: TapSpacing::Auto { alpha: 1.0 },
        }
    }
}

impl KernelSpec {
    pub fn new(taps_per_axis: usize, spacing: TapSpacing) -> Result<Self> {
        let spec = Self {
            taps_per_axis,
            spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps_per_axis == 0 || self.taps_per_axis % 2 == 0 {
            return Err(argument(format!(
                "kernel size {} must be odd and positive",
                self.taps_per_axis
            )));
        }
        let ok = match self.spacing {
            TapSpacing::Fixed(d) => d.is_finite() && d > 0.0,
            TapSpacing::Auto { alpha } => alpha.is_finite() && alpha > 0.0,
        };
        if !ok {
            return Err(argument("tap spacing must be positive"));
        }
        Ok(())
    }

    #[inline]
    pub fn taps(&self) -> usize {
        self.taps_per_axis * self.taps_per_axis
    }
}

/// Mean distance to the 8th nearest neighbour (fewer if the cloud is smaller).
pub fn mean_neighbor_spacing(index: &NeighborIndex) -> f64 {
    let n = index.len();
    let kth = 8.min(n.saturating_sub(1));
    if kth == 0 {
        return 0.0;
    }
    let total: f64 = index
        .points()
        .par_iter()
        .map(|p| {
            let nn = index
                .k_nearest_with_distances(p, kth + 1)
                .expect("k within cloud size");
            nn[kth].1.sqrt()
        })
        .sum();
    total / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct NptcOperator {
    input_len: usize,
    out_indices: Vec<u32>,
    taps: Vec<u32>,
    taps_per_axis: usize,
    delta: f64,
    frame_fingerprint: u64,
}

pub fn build_operator(
    in_cloud: &PointCloud,
    in_index: &NeighborIndex,
    frames: &FrameField,
    out_indices: &[usize],
    spec: &KernelSpec,
) -> Result<NptcOperator> {
    spec.validate()?;
    let n = in_cloud.len();
    if frames.len() != n || in_index.len() != n {
        return Err(argument("frames and index must be built on the input cloud"));
    }
    if out_indices.is_empty() {
        return Err(argument("operator needs at least one output point"));
    }
    if let Some(&bad) = out_indices.iter().find(|&&i| i >= n) {
        return Err(argument(format!("output index {bad} out of range for {n} points")));
    }
    let delta = match spec.spacing {
        TapSpacing::Fixed(d) => d,
        TapSpacing::Auto { alpha } => {
            let s = alpha * mean_neighbor_spacing(in_index);
            // a lone point has no spacing; the value never matters for K = 1
            if s > 0.0 {
                s
            } else {
                1.0
            }
        }
    };
    let k = spec.taps_per_axis;
    let c = (k / 2) as f64;
    let rows: Vec<Vec<u32>> = out_indices
        .par_iter()
        .map(|&i| {
            let x = in_cloud.point(i);
            let f = frames.frame(i);
            let mut row = Vec::with_capacity(k * k);
            for p in 0..k {
                for q in 0..k {
                    if p == k / 2 && q == k / 2 {
                        row.push(i as u32);
                        continue;
                    }
                    let v = x + f.u1 * ((p as f64 - c) * delta) + f.u2 * ((q as f64 - c) * delta);
                    row.push(in_index.nearest(&v).0 as u32);
                }
            }
            row
        })
        .collect();
    Ok(NptcOperator {
        input_len: n,
        out_indices: out_indices.iter().map(|&i| i as u32).collect(),
        taps: rows.concat(),
        taps_per_axis: k,
        delta,
        frame_fingerprint: frames.fingerprint(),
    })
}

const MAGIC: &[u8; 4] = b"NPTC";
const VERSION: u32 = 1;

impl NptcOperator {
    /// Builds an operator directly from a tap table (row-major, `|out| x K^2`).
    pub fn from_table(
        input_len: usize,
        out_indices: Vec<u32>,
        taps: Vec<u32>,
        taps_per_axis: usize,
        delta: f64,
    ) -> Result<Self> {
        let k2 = taps_per_axis * taps_per_axis;
        if taps_per_axis % 2 == 0 || taps.len() != out_indices.len() * k2 {
            return Err(shape("tap table does not match |out| x K^2"));
        }
        if taps
            .iter()
            .chain(&out_indices)
            .any(|&t| t as usize >= input_len)
        {
            return Err(argument("tap index out of range"));
        }
        Ok(Self {
            input_len,
            out_indices,
            taps,
            taps_per_axis,
            delta,
            frame_fingerprint: 0,
        })
    }

    #[inline]
    pub fn input_len(&self) -> usize {
        self.input_len
    }

    #[inline]
    pub fn output_len(&self) -> usize {
        self.out_indices.len()
    }

    pub fn out_indices(&self) -> &[u32] {
        &self.out_indices
    }

    #[inline]
    pub fn taps_per_axis(&self) -> usize {
        self.taps_per_axis
    }

    #[inline]
    pub fn taps_per_row(&self) -> usize {
        self.taps_per_axis * self.taps_per_axis
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn frame_fingerprint(&self) -> u64 {
        self.frame_fingerprint
    }

    pub fn table(&self) -> &[u32] {
        &self.taps
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        let k2 = self.taps_per_row();
        &self.taps[i * k2..(i + 1) * k2]
    }

    fn check_weights(&self, weights: &[impl Copy], c_in: usize, c_out: usize) -> Result<()> {
        if weights.len() != self.taps_per_row() * c_in * c_out {
            return Err(shape(format!(
                "weights have {} entries, expected {} x {c_in} x {c_out}",
                weights.len(),
                self.taps_per_row()
            )));
        }
        Ok(())
    }

    /// `out[i, co] = sum_pq sum_ci w[pq, ci, co] * f[taps[i, pq], ci]`.
    pub fn apply<T: Real>(
        &self,
        weights: &[T],
        features: &Tensor2<T>,
        c_out: usize,
    ) -> Result<Tensor2<T>> {
        let c_in = features.cols();
        if features.rows() != self.input_len {
            return Err(shape(format!(
                "features have {} rows, operator expects {}",
                features.rows(),
                self.input_len
            )));
        }
        self.check_weights(weights, c_in, c_out)?;
        let k2 = self.taps_per_row();
        let mut out = Tensor2::zeros(self.output_len(), c_out);
        let gather_row = |i: usize, y: &mut [T]| {
            for (pq, &src) in self.row(i).iter().enumerate() {
                let x = features.row(src as usize);
                let w = &weights[pq * c_in * c_out..(pq + 1) * c_in * c_out];
                for (ci, &xv) in x.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    let wr = &w[ci * c_out..(ci + 1) * c_out];
                    for (yo, &wv) in y.iter_mut().zip(wr) {
                        *yo += xv * wv;
                    }
                }
            }
        };
        if c_out == 0 {
            return Ok(out);
        }
        if self.output_len() * k2 * c_in * c_out >= 1 << 20 {
            out.data_mut()
                .par_chunks_mut(c_out)
                .enumerate()
                .for_each(|(i, y)| gather_row(i, y));
        } else {
            for (i, y) in out.data_mut().chunks_mut(c_out).enumerate() {
                gather_row(i, y);
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`apply`](Self::apply) in both the features and the weights.
    /// Accumulation order is fixed (output rows ascending), so results are reproducible.
    pub fn apply_adjoint<T: Real>(
        &self,
        weights: &[T],
        features: &Tensor2<T>,
        out_grad: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, Vec<T>)> {
        let c_in = features.cols();
        let c_out = out_grad.cols();
        if features.rows() != self.input_len || out_grad.rows() != self.output_len() {
            return Err(shape(format!(
                "adjoint shapes: features {:?}, out_grad {:?}, operator {} -> {}",
                features.shape(),
                out_grad.shape(),
                self.input_len,
                self.output_len()
            )));
        }
        self.check_weights(weights, c_in, c_out)?;
        let mut feat_grad = Tensor2::zeros(self.input_len, c_in);
        let mut w_grad = vec![T::zero(); weights.len()];
        let block = c_in * c_out;
        for i in 0..self.output_len() {
            let g = out_grad.row(i);
            if g.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for (pq, &src) in self.row(i).iter().enumerate() {
                let src = src as usize;
                let w = &weights[pq * block..(pq + 1) * block];
                let wg = &mut w_grad[pq * block..(pq + 1) * block];
                let x = features.row(src);
                for ci in 0..c_in {
                    let wr = &w[ci * c_out..(ci + 1) * c_out];
                    let mut acc = T::zero();
                    for (&wv, &gv) in wr.iter().zip(g) {
                        acc += wv * gv;
                    }
                    feat_grad.data_mut()[src * c_in + ci] += acc;
                    let xv = x[ci];
                    if xv != T::zero() {
                        for (d, &gv) in wg[ci * c_out..(ci + 1) * c_out].iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
        Ok((feat_grad, w_grad))
    }

    /// Little-endian cache encoding:
    ///
    /// ```text
    /// "NPTC" | version u32 | N u32 | |out| u32 | K u32 | delta f64
    /// | taps u32 x (|out| * K^2), row-major
    /// | out_indices u32 x |out| | upstream hash [u8; 32]
    /// ```
    pub fn encode(&self, upstream_hash: &[u8; 32]) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 4 * (self.taps.len() + self.out_indices.len()) + 32);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.input_len as u32).to_le_bytes());
        buf.extend_from_slice(&(self.out_indices.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.taps_per_axis as u32).to_le_bytes());
        buf.extend_from_slice(&self.delta.to_le_bytes());
        for t in &self.taps {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for o in &self.out_indices {
            buf.extend_from_slice(&o.to_le_bytes());
        }
        buf.extend_from_slice(upstream_hash);
        buf
    }

    /// Inverse of [`encode`](Self::encode); returns the operator and the upstream hash.
    pub fn decode(mut bytes: &[u8]) -> Result<(NptcOperator, [u8; 32])> {
        let corrupt = |m: &str| NptcError::CacheMiss(format!("operator cache: {m}"));
        let u32_at = |r: &mut &[u8]| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        let mut magic = [0u8; 4];
        bytes.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32_at(&mut bytes)?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let n = u32_at(&mut bytes)? as usize;
        let n_out = u32_at(&mut bytes)? as usize;
        let k = u32_at(&mut bytes)? as usize;
        let mut d = [0u8; 8];
        bytes.read_exact(&mut d).map_err(|_| corrupt("truncated"))?;
        let delta = f64::from_le_bytes(d);
        let expected = 4 * (n_out * k * k + n_out) + 32;
        if bytes.len() != expected {
            return Err(corrupt("length does not match header"));
        }
        let taps = (0..n_out * k * k)
            .map(|_| u32_at(&mut bytes))
            .collect::<Result<Vec<_>>>()?;
        let out = (0..n_out)
            .map(|_| u32_at(&mut bytes))
            .collect::<Result<Vec<_>>>()?;
        let mut hash = [0u8; 32];
        hash.copy_from_slice(bytes);
        let op = NptcOperator::from_table(n, out, taps, k, delta)?;
        Ok((op, hash))
    }
}
