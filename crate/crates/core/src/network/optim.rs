use serde::{Deserialize, Serialize};

use crate::error::{NptcError, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok && self.lr().is_finite() {
            Ok(())
        } else {
            Err(NptcError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u32,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Vec<T>]) -> Self {
        let zeros = |p: &[Vec<T>]| p.iter().map(|x| vec![T::zero(); x.len()]).collect();
        Self {
            config,
            m: zeros(params),
            v: zeros(params),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Vec<T>], grads: &[Vec<T>]) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                let lr = T::from_f64(lr);
                let mu = T::from_f64(momentum);
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    for ((pv, &gv), mv) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = mu * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let step = T::from_f64(lr * c2.sqrt() / c1);
                let (b1, b2, e) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps * c2.sqrt()));
                let one = T::one();
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (one - b1) * gv;
                        *vv = b2 * *vv + (one - b2) * gv * gv;
                        *pv -= step * *mv / (vv.sqrt() + e);
                    }
                }
            }
        }
    }
}
