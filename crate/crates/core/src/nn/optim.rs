//! Optimisers and step learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::graph::Param;
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam with the usual defaults, or plain gradient descent.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [Param<T>], lr: f64) -> Result<()> {
        self.step += 1;
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in values.iter_mut().zip(&grads) {
                        *v -= T::from_f64_lossy(lr * g.as_f64());
                    }
                }
                OptimizerKind::Adam => {
                    let (m, s) = (&mut self.m[pi], &mut self.v[pi]);
                    for k in 0..values.len() {
                        let g = grads[k].as_f64();
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                        s[k] = self.beta2 * s[k] + (1.0 - self.beta2) * g * g;
                        let update = lr * (m[k] / bc1) / ((s[k] / bc2).sqrt() + self.eps);
                        values[k] -= T::from_f64_lossy(update);
                    }
                }
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite {
                    layer: p.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// `lr(epoch) = lr0 * gamma^(epoch / step_epochs)` (integer division).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub lr0: f64,
    pub gamma: f64,
    pub step_epochs: usize,
    pub epochs: usize,
}

impl StepSchedule {
    /// Dense models: 1e-4, halved every 50 epochs, 250 epochs.
    pub fn dense() -> Self {
        StepSchedule {
            lr0: 1e-4,
            gamma: 0.5,
            step_epochs: 50,
            epochs: 250,
        }
    }

    /// Point models: 1e-3, times 0.7 every 50 epochs, 250 epochs.
    pub fn point() -> Self {
        StepSchedule {
            lr0: 1e-3,
            gamma: 0.7,
            step_epochs: 50,
            epochs: 250,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.gamma.powi((epoch / self.step_epochs.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "invalid schedule lr0={} gamma={}",
                self.lr0, self.gamma
            )));
        }
        if self.step_epochs == 0 || self.epochs == 0 {
            return Err(Error::Config("schedule step and epoch counts must be positive".into()));
        }
        Ok(())
    }
}
