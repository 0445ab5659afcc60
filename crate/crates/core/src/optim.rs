//! SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f32,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// `v <- momentum * v + g + wd * p; p <- p - lr * v`.
pub fn sgd_step(p: &mut Tensor, v: &mut Tensor, g: &Tensor, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::arg("sgd_step", format!("learning rate {lr} must be positive")));
    }
    p.expect_same_shape(g, "sgd_step")?;
    p.expect_same_shape(v, "sgd_step")?;
    if g.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Velocity buffers for a fixed parameter list.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: vec![],
        }
    }

    /// Applies one update with learning rate `lr`. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invariant(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        if let Some(i) = grads.iter().position(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let c = self.config;
        for ((p, v), g) in params.into_iter().zip(&mut self.velocity).zip(grads) {
            sgd_step(p, v, g, lr, c.momentum, c.weight_decay)?;
        }
        Ok(())
    }
}
