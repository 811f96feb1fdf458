use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    SgdMomentum {
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// `(epoch, factor)`: from that (0-based) epoch on, the learning rate is
    /// multiplied by `factor`. Entries compound.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        OptimizerConfig {
            optimizer: OptimizerKind::adam(),
            lr,
            batch_size,
            epochs,
            seed,
            lr_schedule: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::Parameter(format!(
                        "invalid Adam constants beta1={beta1}, beta2={beta2}, eps={eps}"
                    )));
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Parameter(format!("momentum must be in [0, 1), got {momentum}")));
                }
            }
        }
        if let Some((e, f)) = self.lr_schedule.iter().find(|(_, f)| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Parameter(format!("schedule factor {f} at epoch {e} must be positive")));
        }
        Ok(())
    }

    /// Effective learning rate during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, f)| lr * f)
    }
}

/// Per-slot optimizer state; slots are the trainable tensors in a fixed order.
pub(crate) struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub(crate) fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: match kind {
                OptimizerKind::Adam { .. } => sizes.iter().map(|&n| vec![0.0; n]).collect(),
                OptimizerKind::SgdMomentum { .. } => Vec::new(),
            },
            step: 0,
        }
    }

    /// Starts a new update; must be called once before the slot updates of a step.
    pub(crate) fn begin_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn update(&mut self, slot: usize, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let c1 = 1.0 - math::powf(beta1, t);
                let c2 = 1.0 - math::powf(beta2, t);
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    params[i] -= lr * mh / (math::sqrt(vh) + eps);
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                let vel = &mut self.first[slot];
                for i in 0..params.len() {
                    vel[i] = momentum * vel[i] + grad[i];
                    params[i] -= lr * vel[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_compounds_from_its_epoch() {
        let mut c = OptimizerConfig::adam(0.01, 4, 3, 0);
        c.lr_schedule = vec![(1, 0.1)];
        assert_eq!(c.lr_at(0), 0.01);
        assert!((c.lr_at(1) - 0.001).abs() < 1e-18);
        assert!((c.lr_at(2) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = OptimizerConfig::adam(0.0, 4, 3, 0);
        assert!(c.validate().is_err());
        c.lr = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c.batch_size = 1;
        c.optimizer = OptimizerKind::SgdMomentum { momentum: 1.0 };
        assert!(c.validate().is_err());
        c.optimizer = OptimizerKind::SgdMomentum { momentum: 0.9 };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), &[2]);
        let mut p = [1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.5 }, &[1]);
        let mut p = [0.0];
        opt.begin_step();
        opt.update(0, &mut p, &[1.0], 1.0);
        opt.begin_step();
        opt.update(0, &mut p, &[1.0], 1.0);
        assert_eq!(p[0], -2.5);
    }
}
