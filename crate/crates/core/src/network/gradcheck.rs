//! Finite-difference verification of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{CloudGeometry, Model};
use crate::error::Result;
use crate::tensor::Tensor2;

pub const FD_STEP: f64 = 1e-5;

pub struct ForwardPass {
    pub output: Tensor2<f64>,
    /// Identifies the piecewise-linear region (ReLU masks, argmax choices) of the pass.
    pub signature: u64,
}

/// A double-precision computation with an analytic vector-Jacobian product.
pub trait Differentiable {
    fn forward(&self, params: &[Vec<f64>], input: &Tensor2<f64>) -> Result<ForwardPass>;

    /// Returns the input gradient and one gradient per parameter blob for `out_grad`.
    fn backward(
        &self,
        params: &[Vec<f64>],
        input: &Tensor2<f64>,
        out_grad: &Tensor2<f64>,
    ) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)>;
}

/// Adapts a pair of closures to [`Differentiable`].
pub struct FnFragment<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> Differentiable for FnFragment<F, B>
where
    F: Fn(&[Vec<f64>], &Tensor2<f64>) -> Result<ForwardPass>,
    B: Fn(&[Vec<f64>], &Tensor2<f64>, &Tensor2<f64>) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)>,
{
    fn forward(&self, params: &[Vec<f64>], input: &Tensor2<f64>) -> Result<ForwardPass> {
        (self.forward)(params, input)
    }

    fn backward(
        &self,
        params: &[Vec<f64>],
        input: &Tensor2<f64>,
        out_grad: &Tensor2<f64>,
    ) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)> {
        (self.backward)(params, input, out_grad)
    }
}

/// A whole model on fixed geometry, differentiated with respect to its input features.
pub struct ModelFragment<'a> {
    pub model: &'a Model<f64>,
    pub geometry: &'a CloudGeometry,
}

impl Differentiable for ModelFragment<'_> {
    fn forward(&self, params: &[Vec<f64>], input: &Tensor2<f64>) -> Result<ForwardPass> {
        let (output, tape) = self.model.forward_with(params, self.geometry, input)?;
        Ok(ForwardPass {
            output,
            signature: tape.signature(),
        })
    }

    fn backward(
        &self,
        params: &[Vec<f64>],
        input: &Tensor2<f64>,
        out_grad: &Tensor2<f64>,
    ) -> Result<(Tensor2<f64>, Vec<Vec<f64>>)> {
        let (_, tape) = self.model.forward_with(params, self.geometry, input)?;
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let gin = self
            .model
            .backward_with(params, self.geometry, &tape, out_grad, &mut grads)?;
        Ok((gin, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Entries whose `+-h` perturbations both leave the base piecewise-linear region.
    pub skipped: usize,
}

/// Compares analytic gradients of `L = <f(params, input), R>` (random `R`) with finite
/// differences on every parameter and input entry.
///
/// Central differences with step `1e-5` are used when both perturbed passes stay in the
/// base pass's piecewise-linear region; otherwise the one-sided difference on the side that
/// stays is used. Relative error is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check(
    fragment: &dyn Differentiable,
    params: &[Vec<f64>],
    input: &Tensor2<f64>,
    seed: u64,
) -> Result<GradCheckReport> {
    let base = fragment.forward(params, input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = base.output.shape();
    let probe = Tensor2::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let l0 = base.output.dot(&probe);
    let (gin, gparams) = fragment.backward(params, input, &probe)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut record = |analytic: f64, plus: &ForwardPass, minus: &ForwardPass| {
        let lp = plus.output.dot(&probe);
        let lm = minus.output.dot(&probe);
        let numeric = if plus.signature == base.signature && minus.signature == base.signature {
            (lp - lm) / (2.0 * FD_STEP)
        } else if plus.signature == base.signature {
            (lp - l0) / FD_STEP
        } else if minus.signature == base.signature {
            (l0 - lm) / FD_STEP
        } else {
            report.skipped += 1;
            return;
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-12);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_relative_error {
            report.max_relative_error = err;
        }
    };

    let mut p = params.to_vec();
    for b in 0..p.len() {
        for i in 0..p[b].len() {
            let orig = p[b][i];
            p[b][i] = orig + FD_STEP;
            let plus = fragment.forward(&p, input)?;
            p[b][i] = orig - FD_STEP;
            let minus = fragment.forward(&p, input)?;
            p[b][i] = orig;
            record(gparams[b][i], &plus, &minus);
        }
    }
    let mut x = input.clone();
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = fragment.forward(params, &x)?;
        x.data_mut()[i] = orig - FD_STEP;
        let minus = fragment.forward(params, &x)?;
        x.data_mut()[i] = orig;
        record(gin.data()[i], &plus, &minus);
    }
    Ok(report)
}
