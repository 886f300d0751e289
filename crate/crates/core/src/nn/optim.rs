use serde::{Deserialize, Serialize};

use super::{ParamSet, Scalar, Tensor};
use crate::{Error, Result};

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        // A decay of 1 or more shrinks every weight past zero each step.
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::Config(format!(
                "weight_decay must be in [0, 1), got {} (did you mean 1e-4?)",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    cfg: SgdConfig,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, params: &ParamSet<T>) -> Result<Self> {
        cfg.validate()?;
        let velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { cfg, velocity })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn velocity_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) {
        let lr = T::from_f64(self.cfg.lr);
        let mom = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let vals = p.value.data_mut();
            for ((x, vel), &g) in vals.iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = mom * *vel + g + wd * *x;
                *x -= lr * *vel;
            }
        }
    }
}
