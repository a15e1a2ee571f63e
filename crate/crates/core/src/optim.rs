//! Stochastic gradient descent with momentum and weight decay.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("negative weight decay {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
        })
    }

    /// Applies one step to every parameter using its accumulated gradient.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>, lr: f64) -> Result<()> {
        for p in params {
            sgd_step(
                &mut p.value,
                &p.grad,
                &mut p.velocity,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
        }
        Ok(())
    }
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
    }
    let g = grad.data();
    let v = velocity.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
    Ok(())
}
