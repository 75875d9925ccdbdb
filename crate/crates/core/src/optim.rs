//! SGD, Adam and RMSprop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
    Rmsprop,
}

/// Hyperparameters. Unset fields take the conventional defaults
/// (`lr = 0.001`, `beta1 = 0.9`, `beta2 = 0.999`, `rho = 0.9`,
/// `eps = 1e-8`, `lambda = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Weight-decay coefficient, applied to weights only.
    #[serde(default)]
    pub lambda: f64,
    /// Optional global gradient-norm clip; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_rho() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            rho: default_rho(),
            eps: default_eps(),
            lambda: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && (0.0..1.0).contains(&self.rho)
            && self.eps > 0.0
            && self.lambda >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Param(format!("invalid optimizer hyperparameters: {self:?}")))
        }
    }
}

/// Optimizer with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<S = f64> {
    config: OptimizerConfig,
    /// First moments (adam) or mean squares (rmsprop).
    m: Vec<Tensor<S>>,
    /// Second moments (adam only).
    v: Vec<Tensor<S>>,
    steps: u64,
    initialized: bool,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
            initialized: false,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Allocates zeroed state buffers shaped like `params`.
    pub fn init(&mut self, params: &[&Param<S>]) {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        self.m = match self.config.kind {
            OptimizerKind::Sgd => Vec::new(),
            _ => zeros(),
        };
        self.v = match self.config.kind {
            OptimizerKind::Adam => zeros(),
            _ => Vec::new(),
        };
        self.steps = 0;
        self.initialized = true;
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<S>]) -> Result<()> {
        if !self.initialized {
            return Err(Error::Usage("optimizer state is not initialized".into()));
        }
        let buffers = match self.config.kind {
            OptimizerKind::Sgd => None,
            _ => Some(&self.m),
        };
        if let Some(m) = buffers {
            if m.len() != params.len()
                || m.iter().zip(params.iter()).any(|(b, p)| b.shape() != p.value.shape())
            {
                return Err(Error::shape(
                    "optimizer state does not match the parameter list",
                ));
            }
        }
        let clip = self.clip_scale(params);
        self.steps += 1;
        let c = &self.config;
        let lr = S::of(c.lr);
        match c.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let Param { value, grad, .. } = &mut **p;
                    for (w, &g) in value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * (g * clip);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (S::of(c.beta1), S::of(c.beta2), S::of(c.eps));
                let t = self.steps as i32;
                let bc1 = S::one() - b1.powi(t);
                let bc2 = S::one() - b2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    let Param { value, grad, .. } = &mut **p;
                    let it = value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &g), (m, v)) in it {
                        let g = g * clip;
                        *m = b1 * *m + (S::one() - b1) * g;
                        *v = b2 * *v + (S::one() - b2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Rmsprop => {
                let (rho, eps) = (S::of(c.rho), S::of(c.eps));
                for (p, ms) in params.iter_mut().zip(&mut self.m) {
                    let Param { value, grad, .. } = &mut **p;
                    let it = value.data_mut().iter_mut().zip(grad.data()).zip(ms.data_mut());
                    for ((w, &g), ms) in it {
                        let g = g * clip;
                        *ms = rho * *ms + (S::one() - rho) * g * g;
                        *w -= lr * g / (ms.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    fn clip_scale(&self, params: &[&mut Param<S>]) -> S {
        let Some(limit) = self.config.clip_norm else {
            return S::one();
        };
        let norm = params
            .iter()
            .map(|p| p.grad.sum_squares())
            .sum::<S>()
            .sqrt()
            .as_f64();
        if norm > limit {
            S::of(limit / norm)
        } else {
            S::one()
        }
    }
}
