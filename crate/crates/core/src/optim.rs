//! SGD with classical or Nesterov momentum.

use serde::{Deserialize, Serialize};

use crate::error::{DmanError, Result};
use crate::tensor::Tensor;

/// Anything that exposes its trainable tensors as named blocks in a fixed order.
pub trait Parameterized {
    fn blocks(&self) -> Vec<(&'static str, &Tensor)>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            nesterov: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(DmanError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DmanError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Applies one update in place.
///
/// `v <- momentum * v - lr * g`, then `p <- p + v`, or with Nesterov
/// `p <- p + momentum * v - lr * g` using the updated `v`.
pub fn sgd_step(
    params: &mut [(&'static str, &mut Tensor)],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(DmanError::Input(format!(
            "sgd_step: {} parameter blocks, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (((name, p), g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(DmanError::Input(format!(
                "sgd_step: block `{name}` has shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(DmanError::NonFiniteGradient {
                block: name.to_string(),
                index,
                value,
            });
        }
    }
    let (lr, mu) = (cfg.lr, cfg.momentum);
    for (((_, p), g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
        for i in 0..pd.len() {
            vd[i] = mu * vd[i] - lr * gd[i];
            if cfg.nesterov {
                pd[i] += mu * vd[i] - lr * gd[i];
            } else {
                pd[i] += vd[i];
            }
        }
    }
    Ok(())
}

/// Owns velocity buffers for one parameter set.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new<P: Parameterized + ?Sized>(config: SgdConfig, model: &P) -> Self {
        let velocity = model
            .blocks()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self { config, velocity }
    }

    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P, grads: &[Tensor]) -> Result<()> {
        let mut blocks = model.blocks_mut();
        sgd_step(&mut blocks, grads, &mut self.velocity, &self.config)
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
