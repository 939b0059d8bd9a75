use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::{cross_entropy, softmax};
use super::model::{CloudGeometry, Model};
use super::optim::{Optimizer, OptimizerConfig};
use super::Task;
use crate::error::{argument, NptcError, Result};
use crate::geometry_io::Vec3;
use crate::tensor::Tensor2;

/// One labelled cloud with its precomputed geometry.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    /// Normalized level-0 coordinates.
    pub points: Vec<Vec3>,
    pub geometry: Option<CloudGeometry>,
    pub label: usize,
    pub part_labels: Option<Vec<usize>>,
}

impl Sample {
    fn geometry(&self) -> Result<&CloudGeometry> {
        self.geometry
            .as_ref()
            .ok_or_else(|| NptcError::CacheMiss(format!("no operators precomputed for cloud {}", self.name)))
    }

    fn targets(&self, task: Task) -> Result<Vec<usize>> {
        match task {
            Task::Classification { .. } => Ok(vec![self.label]),
            Task::Segmentation { .. } => self
                .part_labels
                .clone()
                .ok_or_else(|| argument(format!("cloud {} has no part labels", self.name))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Random rotation about the z axis.
    pub rotate: bool,
    pub scale: (f64, f64),
    pub jitter: f64,
}

impl Augmentation {
    pub fn none() -> Self {
        Self {
            rotate: false,
            scale: (1.0, 1.0),
            jitter: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.rotate && self.scale == (1.0, 1.0) && self.jitter == 0.0
    }
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            rotate: true,
            scale: (0.9, 1.1),
            jitter: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub voting_rounds: usize,
    /// Rescales the averaged minibatch gradient to this global L2 norm when it is larger.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::sgd(0.1),
            epochs: 20,
            batch_size: 8,
            augmentation: Augmentation::default(),
            seed: 0,
            voting_rounds: 1,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.voting_rounds == 0 {
            return Err(NptcError::Config("batch size and voting rounds must be at least 1".into()));
        }
        let (lo, hi) = self.augmentation.scale;
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(NptcError::Config("grad_clip must be positive".into()));
        }
        if !(lo > 0.0 && lo <= hi) || self.augmentation.jitter < 0.0 {
            return Err(NptcError::Config("invalid augmentation ranges".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy on the evaluation set (training set if none is given).
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
}

/// Level-0 coordinates minus their centroid.
pub fn base_features(points: &[Vec3]) -> Tensor2<f64> {
    let n = points.len().max(1) as f64;
    let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let data = points.iter().flat_map(|p| {
        let d = p - c;
        [d.x, d.y, d.z]
    });
    Tensor2::from_vec(points.len(), 3, data.collect()).expect("3 columns")
}

/// Rotated (about z), scaled and jittered centered coordinates.
pub fn augment_features(points: &[Vec3], aug: &Augmentation, rng: &mut impl Rng) -> Tensor2<f64> {
    let mut f = base_features(points);
    if aug.is_identity() {
        return f;
    }
    let theta = if aug.rotate {
        rng.random_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let s = if aug.scale.0 < aug.scale.1 {
        rng.random_range(aug.scale.0..aug.scale.1)
    } else {
        aug.scale.0
    };
    let (sin, cos) = theta.sin_cos();
    let normal = (aug.jitter > 0.0).then(|| Normal::new(0.0, aug.jitter).expect("positive sigma"));
    for r in 0..f.rows() {
        let row = f.row_mut(r);
        let (x, y) = (row[0], row[1]);
        row[0] = s * (cos * x - sin * y);
        row[1] = s * (sin * x + cos * y);
        row[2] *= s;
        if let Some(nd) = &normal {
            for v in row.iter_mut() {
                *v += nd.sample(rng);
            }
        }
    }
    f
}

fn forward_probs(model: &Model<f32>, sample: &Sample, features: &Tensor2<f64>) -> Result<Tensor2<f64>> {
    let (logits, _) = model.forward(sample.geometry()?, &features.cast())?;
    Ok(softmax(&logits.cast::<f64>()))
}

/// Class (or per-point part) probabilities on the clean cloud.
pub fn predict(model: &Model<f32>, sample: &Sample) -> Result<Tensor2<f64>> {
    forward_probs(model, sample, &base_features(&sample.points))
}

pub fn predict_augmented(
    model: &Model<f32>,
    sample: &Sample,
    aug: &Augmentation,
    rng: &mut impl Rng,
) -> Result<Tensor2<f64>> {
    forward_probs(model, sample, &augment_features(&sample.points, aug, rng))
}

/// Average of `n_a` augmented predictions; round `j` draws from stream `j` of `seed`.
pub fn predict_with_voting(
    model: &Model<f32>,
    sample: &Sample,
    n_a: usize,
    seed: u64,
    aug: &Augmentation,
) -> Result<Tensor2<f64>> {
    if n_a == 0 {
        return Err(argument("voting needs at least one round"));
    }
    let mut acc: Option<Tensor2<f64>> = None;
    for j in 0..n_a {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let p = predict_augmented(model, sample, aug, &mut rng)?;
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => a.add_assign(&p)?,
        }
    }
    let mut out = acc.expect("n_a >= 1");
    let inv = 1.0 / n_a as f64;
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of correct clouds (classification) or points (segmentation), with voting.
pub fn evaluate_with_voting(
    model: &Model<f32>,
    samples: &[Sample],
    n_a: usize,
    seed: u64,
    aug: &Augmentation,
) -> Result<f64> {
    let task = model.config().task;
    let (mut correct, mut total) = (0usize, 0usize);
    for s in samples {
        let probs = if n_a <= 1 {
            predict(model, s)?
        } else {
            predict_with_voting(model, s, n_a, seed, aug)?
        };
        let targets = s.targets(task)?;
        for (r, &t) in targets.iter().enumerate() {
            correct += usize::from(argmax(probs.row(r)) == t);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Plain (single clean pass) accuracy.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<f64> {
    evaluate_with_voting(model, samples, 1, 0, &Augmentation::none())
}

/// Minibatch training. Sample order and augmentation draw from `cfg.seed`, so two runs
/// with the same inputs produce identical metrics.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(argument("empty training set"));
    }
    let task = model.config().task;
    for s in train_set.iter().chain(eval_set) {
        s.geometry()?;
        s.targets(task)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zero_grads();
            for &i in batch {
                let s = &train_set[i];
                let geom = s.geometry()?;
                let feats = augment_features(&s.points, &cfg.augmentation, &mut rng).cast::<f32>();
                let (logits, tape) = model.forward(geom, &feats)?;
                let (loss, g) = cross_entropy(&logits, &s.targets(task)?)?;
                loss_sum += loss;
                model.backward(geom, &tape, &g, &mut grads)?;
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(clip) = cfg.grad_clip {
                let sq: f64 = grads.iter().flatten().map(|&g| (g as f64).powi(2)).sum();
                let norm = sq.sqrt() * scale;
                if norm > clip {
                    scale *= clip / norm;
                }
            }
            let scale = scale as f32;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            opt.step(model.params_mut(), &grads);
        }
        let accuracy = if eval_set.is_empty() {
            evaluate(model, train_set)?
        } else {
            evaluate(model, eval_set)?
        };
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            accuracy,
        };
        log::info!("epoch {epoch}: loss {:.5} accuracy {:.4}", m.loss, m.accuracy);
        metrics.push(m);
    }
    Ok(TrainOutcome { metrics })
}

pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,loss,accuracy")?;
    for m in metrics {
        writeln!(w, "{},{:.9},{:.6}", m.epoch, m.loss, m.accuracy)?;
    }
    w.flush()?;
    Ok(())
}
