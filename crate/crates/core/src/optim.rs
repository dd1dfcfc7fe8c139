//! Learnable parameters, damped-momentum SGD, and the cosine schedule.

use std::f64::consts::PI;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// Which network component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    /// 2D backbone.
    #[serde(rename = "theta_bck")]
    Backbone,
    /// 2D projection head.
    #[serde(rename = "theta_hd")]
    Head,
    /// 3D feature extractor.
    #[serde(rename = "omega_h")]
    Extractor3d,
    /// Domain-adaptation module.
    #[serde(rename = "lambda")]
    DomainAdapt,
    /// Shared classifier.
    #[serde(rename = "theta_d")]
    Classifier,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Backbone => "theta_bck",
            Role::Head => "theta_hd",
            Role::Extractor3d => "omega_h",
            Role::DomainAdapt => "lambda",
            Role::Classifier => "theta_d",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named tensor with its gradient accumulator and momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub role: Role,
    value: Rc<Tensor<T>>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, role: Role, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            role,
            value: Rc::new(value),
            grad,
            momentum,
            trainable: true,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor<T>> {
        self.value.clone()
    }

    /// Mutable access; copies only if a live graph still shares the value.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.value)
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        ensure!(
            value.shape() == self.value.shape(),
            Shape,
            "parameter {} expects {:?}, got {:?}",
            self.name,
            self.value.shape(),
            value.shape()
        );
        self.value = Rc::new(value);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Hyperparameters of one SGD step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub damping: f64,
    pub weight_decay: f64,
}

/// Damped heavy-ball SGD:
/// `g = grad + wd * p; buf = momentum * buf + (1 - damping) * g; p -= lr * buf`.
///
/// Frozen parameters are left untouched, including their buffers.
pub fn sgd_step<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    cfg: SgdConfig,
) -> Result<()> {
    for (label, v) in [
        ("lr", cfg.lr),
        ("momentum", cfg.momentum),
        ("damping", cfg.damping),
        ("weight_decay", cfg.weight_decay),
    ] {
        if !(v >= 0.0) {
            return Err(Error::Argument(format!("{label} must be non-negative, got {v}")));
        }
    }
    let lr = T::from_f64_lossy(cfg.lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let keep = T::from_f64_lossy(1.0 - cfg.damping);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for p in params {
        if !p.trainable {
            continue;
        }
        let grad = std::mem::replace(&mut p.grad, Tensor::zeros(&[0]));
        let mut buf = std::mem::replace(&mut p.momentum, Tensor::zeros(&[0]));
        {
            let value = p.value_mut();
            for ((w, &g), b) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(buf.data_mut())
            {
                let g = g + wd * *w;
                *b = mu * *b + keep * g;
                *w -= lr * *b;
            }
        }
        p.grad = grad;
        p.momentum = buf;
    }
    Ok(())
}

/// Cosine annealing from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    ensure!(total_steps > 0, Argument, "total_steps must be positive");
    ensure!(
        step <= total_steps,
        Argument,
        "step {} exceeds total {}",
        step,
        total_steps
    );
    Ok(lr0 * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}
