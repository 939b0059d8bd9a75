use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat, conv, conv_backward, global_max_pool, global_max_pool_backward, linear,
    linear_backward, relu_backward, relu_in_place, residual_block_backward,
    residual_block_forward, scatter_rows, split_cols, ResidualParams, ResidualTape,
};
use super::{NetworkConfig, Task};
use crate::error::{shape, NptcError, Result};
use crate::hierarchy::PointHierarchy;
use crate::operator::NptcOperator;
use crate::tensor::{Real, Tensor2};

/// Precomputed per-cloud geometry the network runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGeometry {
    pub hierarchy: PointHierarchy,
    /// `level_ops[l]` maps level `l` onto itself.
    pub level_ops: Vec<NptcOperator>,
    /// `down_ops[l - 1]` maps level `l - 1` onto the level `l` points.
    pub down_ops: Vec<NptcOperator>,
}

impl CloudGeometry {
    pub fn level_size(&self, l: usize) -> usize {
        self.hierarchy.level(l).len()
    }

    fn check(&self, config: &NetworkConfig) -> Result<()> {
        let levels = config.levels();
        if self.hierarchy.depth() != levels
            || self.level_ops.len() != levels
            || self.down_ops.len() + 1 != levels
        {
            return Err(NptcError::Config(format!(
                "geometry has {} levels, network expects {levels}",
                self.hierarchy.depth()
            )));
        }
        for l in 0..levels {
            let k = config.kernels[l].taps_per_axis;
            let op = &self.level_ops[l];
            let n = self.level_size(l);
            if op.taps_per_axis() != k || op.input_len() != n || op.output_len() != n {
                return Err(shape(format!("level {l} operator does not match the network")));
            }
            if l > 0 {
                let d = &self.down_ops[l - 1];
                if d.taps_per_axis() != k
                    || d.input_len() != self.level_size(l - 1)
                    || d.output_len() != n
                {
                    return Err(shape(format!("strided operator into level {l} does not match")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    reduce: Lin,
    conv: Lin,
    expand: Lin,
}

impl Block {
    fn params<'a, T>(&self, p: &'a [Vec<T>]) -> ResidualParams<'a, T> {
        ResidualParams {
            reduce: (&p[self.reduce.w], &p[self.reduce.b]),
            conv: (&p[self.conv.w], &p[self.conv.b]),
            expand: (&p[self.expand.w], &p[self.expand.b]),
        }
    }
}

#[derive(Debug, Clone)]
struct Arch {
    stem: Lin,
    downs: Vec<Lin>,
    blocks: Vec<Vec<Block>>,
    decoder: Vec<Lin>,
    head: Vec<Lin>,
}

struct Builder {
    infos: Vec<ParamInfo>,
    fan_in: Vec<usize>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.infos.push(ParamInfo { name, shape });
        self.fan_in.push(fan_in);
        self.infos.len() - 1
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) -> Lin {
        Lin {
            w: self.push(format!("{name}.w"), vec![cin, cout], cin),
            b: self.push(format!("{name}.b"), vec![cout], 0),
        }
    }

    fn conv(&mut self, name: &str, taps: usize, cin: usize, cout: usize) -> Lin {
        Lin {
            w: self.push(format!("{name}.w"), vec![taps, cin, cout], taps * cin),
            b: self.push(format!("{name}.b"), vec![cout], 0),
        }
    }
}

fn build_arch(cfg: &NetworkConfig) -> (Arch, Builder) {
    let mut b = Builder {
        infos: Vec::new(),
        fan_in: Vec::new(),
    };
    let w = &cfg.widths;
    let stem = b.conv("stem", cfg.kernels[0].taps(), cfg.input_channels, w[0]);
    let mut downs = Vec::new();
    let mut blocks = Vec::new();
    for l in 0..cfg.levels() {
        if l > 0 {
            downs.push(b.conv(&format!("down{l}"), cfg.kernels[l].taps(), w[l - 1], w[l]));
        }
        let half = w[l] / 2;
        blocks.push(
            (0..cfg.blocks[l])
                .map(|j| Block {
                    reduce: b.linear(&format!("level{l}.block{j}.reduce"), w[l], half),
                    conv: b.conv(&format!("level{l}.block{j}.conv"), cfg.kernels[l].taps(), half, half),
                    expand: b.linear(&format!("level{l}.block{j}.expand"), half, w[l]),
                })
                .collect(),
        );
    }
    let mut decoder = Vec::new();
    let head = match cfg.task {
        Task::Classification { classes } => {
            let c = *w.last().expect("at least one level");
            let hidden = (c / 2).max(1);
            vec![b.linear("head0", c, hidden), b.linear("head1", hidden, classes)]
        }
        Task::Segmentation { parts } => {
            for l in 1..cfg.levels() {
                decoder.push(b.linear(&format!("up{l}"), w[l] + w[l - 1], w[l - 1]));
            }
            vec![b.linear("head0", w[0], w[0]), b.linear("head1", w[0], parts)]
        }
    };
    (
        Arch {
            stem,
            downs,
            blocks,
            decoder,
            head,
        },
        b,
    )
}

struct LevelTape<T> {
    input: Tensor2<T>,
    blocks: Vec<ResidualTape<T>>,
    out: Tensor2<T>,
}

struct DecoderTape<T> {
    cat: Tensor2<T>,
    out: Tensor2<T>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
pub struct Tape<T> {
    features: Tensor2<T>,
    levels: Vec<LevelTape<T>>,
    argmax: Vec<usize>,
    decoder: Vec<DecoderTape<T>>,
    head_inputs: Vec<Tensor2<T>>,
}

impl<T: Real> Tape<T> {
    /// Hash of every ReLU on/off pattern and max-pool argmax: equal signatures mean the
    /// network is the same affine map around both inputs.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut mask = |t: &Tensor2<T>| {
            for v in t.data() {
                (*v > T::zero()).hash(&mut h);
            }
        };
        for lt in &self.levels {
            mask(&lt.input);
            for b in &lt.blocks {
                mask(&b.a);
                mask(&b.c);
            }
        }
        for d in &self.decoder {
            mask(&d.out);
        }
        for t in self.head_inputs.iter().skip(1) {
            mask(t);
        }
        self.argmax.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: NetworkConfig,
    infos: Vec<ParamInfo>,
    params: Vec<Vec<T>>,
    arch: Arch,
}

impl<T: Real> Model<T> {
    /// Weights uniform in `+-sqrt(6 / fan_in)`, biases zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (arch, b) = build_arch(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .infos
            .iter()
            .zip(&b.fan_in)
            .map(|(info, &fan_in)| {
                let n: usize = info.shape.iter().product();
                if fan_in == 0 {
                    vec![T::zero(); n]
                } else {
                    let a = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| T::from_f64(rng.random_range(-a..a))).collect()
                }
            })
            .collect();
        Ok(Self {
            config,
            infos: b.infos,
            params,
            arch,
        })
    }

    /// Builds a model around existing parameters, checking names and shapes.
    pub fn from_params(config: NetworkConfig, named: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if named.len() != m.infos.len() {
            return Err(NptcError::Config(format!(
                "expected {} parameter blobs, found {}",
                m.infos.len(),
                named.len()
            )));
        }
        for ((name, shape, data), (info, slot)) in named.into_iter().zip(m.infos.iter().zip(&mut m.params)) {
            if name != info.name || shape != info.shape || data.len() != slot.len() {
                return Err(NptcError::Config(format!(
                    "parameter {name} {shape:?} does not match expected {} {:?}",
                    info.name, info.shape
                )));
            }
            *slot = data;
        }
        Ok(m)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            infos: self.infos.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|&v| U::from_f64(v.as_f64())).collect())
                .collect(),
            arch: self.arch.clone(),
        }
    }

    pub fn zero_grads(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.len()]).collect()
    }

    pub fn forward(&self, geom: &CloudGeometry, features: &Tensor2<T>) -> Result<(Tensor2<T>, Tape<T>)> {
        self.forward_with(&self.params, geom, features)
    }

    /// Forward pass with an explicit parameter set (same layout as [`params`](Self::params)).
    pub fn forward_with(
        &self,
        params: &[Vec<T>],
        geom: &CloudGeometry,
        features: &Tensor2<T>,
    ) -> Result<(Tensor2<T>, Tape<T>)> {
        geom.check(&self.config)?;
        if features.rows() != geom.level_size(0) || features.cols() != self.config.input_channels {
            return Err(shape(format!(
                "input features {:?}, expected {} x {}",
                features.shape(),
                geom.level_size(0),
                self.config.input_channels
            )));
        }
        let p = |i: usize| params[i].as_slice();
        let a = &self.arch;
        let mut levels: Vec<LevelTape<T>> = Vec::with_capacity(self.config.levels());
        for l in 0..self.config.levels() {
            let mut h = if l == 0 {
                conv(&geom.level_ops[0], features, p(a.stem.w), p(a.stem.b))?
            } else {
                let d = a.downs[l - 1];
                conv(&geom.down_ops[l - 1], &levels[l - 1].out, p(d.w), p(d.b))?
            };
            relu_in_place(&mut h);
            let input = h.clone();
            let mut blocks = Vec::with_capacity(a.blocks[l].len());
            for blk in &a.blocks[l] {
                let (y, bt) = residual_block_forward(&h, &geom.level_ops[l], &blk.params(params))?;
                blocks.push(bt);
                h = y;
            }
            levels.push(LevelTape {
                input,
                blocks,
                out: h,
            });
        }
        let mut argmax = Vec::new();
        let mut decoder = Vec::new();
        let mut head_in = match self.config.task {
            Task::Classification { .. } => {
                let (pooled, arg) = global_max_pool(&levels.last().expect("one level").out)?;
                argmax = arg;
                pooled
            }
            Task::Segmentation { .. } => {
                let mut cur = levels.last().expect("one level").out.clone();
                for l in (1..self.config.levels()).rev() {
                    let up = cur.select_rows(geom.hierarchy.coarse_map(l));
                    let cat = concat(&up, &levels[l - 1].out)?;
                    let d = a.decoder[l - 1];
                    let mut out = linear(&cat, p(d.w), p(d.b))?;
                    relu_in_place(&mut out);
                    cur = out.clone();
                    decoder.push(DecoderTape { cat, out });
                }
                cur
            }
        };
        let mut head_inputs = Vec::with_capacity(a.head.len());
        for (i, lin) in a.head.iter().enumerate() {
            let mut y = linear(&head_in, p(lin.w), p(lin.b))?;
            if i + 1 < a.head.len() {
                relu_in_place(&mut y);
            }
            head_inputs.push(std::mem::replace(&mut head_in, y));
        }
        Ok((
            head_in,
            Tape {
                features: features.clone(),
                levels,
                argmax,
                decoder,
                head_inputs,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input-feature gradient.
    pub fn backward(
        &self,
        geom: &CloudGeometry,
        tape: &Tape<T>,
        out_grad: &Tensor2<T>,
        grads: &mut [Vec<T>],
    ) -> Result<Tensor2<T>> {
        self.backward_with(&self.params, geom, tape, out_grad, grads)
    }

    pub fn backward_with(
        &self,
        params: &[Vec<T>],
        geom: &CloudGeometry,
        tape: &Tape<T>,
        out_grad: &Tensor2<T>,
        grads: &mut [Vec<T>],
    ) -> Result<Tensor2<T>> {
        let a = &self.arch;
        let levels = self.config.levels();
        let p = |i: usize| params[i].as_slice();
        let mut g = out_grad.clone();
        let last = a.head.len() - 1;
        for i in (0..a.head.len()).rev() {
            if i != last {
                g = relu_backward(&tape.head_inputs[i + 1], &g);
            }
            let lin = a.head[i];
            let (dw, db) = pair_mut(grads, lin.w, lin.b);
            g = linear_backward(&tape.head_inputs[i], p(lin.w), &g, dw, db);
        }
        let mut out_grads: Vec<Tensor2<T>> = (0..levels)
            .map(|l| Tensor2::zeros(tape.levels[l].out.rows(), tape.levels[l].out.cols()))
            .collect();
        match self.config.task {
            Task::Classification { .. } => {
                out_grads[levels - 1] =
                    global_max_pool_backward(tape.levels[levels - 1].out.rows(), &tape.argmax, &g);
            }
            Task::Segmentation { .. } => {
                // decoder tapes are stored from the coarsest transition down
                for (t, l) in (1..levels).rev().enumerate() {
                    let dt = &tape.decoder[t];
                    let gout = relu_backward(&dt.out, &g);
                    let d = a.decoder[l - 1];
                    let (dw, db) = pair_mut(grads, d.w, d.b);
                    let gcat = linear_backward(&dt.cat, p(d.w), &gout, dw, db);
                    let (gup, gskip) = split_cols(&gcat, self.config.widths[l]);
                    out_grads[l - 1].add_assign(&gskip)?;
                    g = scatter_rows(&gup, geom.hierarchy.coarse_map(l), geom.level_size(l));
                }
                out_grads[levels - 1].add_assign(&g)?;
            }
        }
        let mut input_grad = Tensor2::zeros(0, 0);
        for l in (0..levels).rev() {
            let lt = &tape.levels[l];
            let mut g = out_grads[l].clone();
            for (blk, bt) in a.blocks[l].iter().zip(&lt.blocks).rev() {
                // the six block parameters are allocated consecutively
                let first = blk.reduce.w;
                let [rw, rb, cw, cb, ew, eb] = &mut grads[first..first + 6] else {
                    unreachable!()
                };
                g = residual_block_backward(
                    &geom.level_ops[l],
                    &blk.params(params),
                    bt,
                    &g,
                    [rw, rb, cw, cb, ew, eb],
                )?;
            }
            let g = relu_backward(&lt.input, &g);
            if l == 0 {
                let (dw, db) = pair_mut(grads, a.stem.w, a.stem.b);
                input_grad = conv_backward(&geom.level_ops[0], &tape.features, p(a.stem.w), &g, dw, db)?;
            } else {
                let d = a.downs[l - 1];
                let (dw, db) = pair_mut(grads, d.w, d.b);
                let gin = conv_backward(&geom.down_ops[l - 1], &tape.levels[l - 1].out, p(d.w), &g, dw, db)?;
                out_grads[l - 1].add_assign(&gin)?;
            }
        }
        Ok(input_grad)
    }
}

fn pair_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}
