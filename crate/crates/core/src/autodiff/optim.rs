use serde::{Deserialize, Serialize};

use super::model::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball SGD; weight decay is added to the gradient before the momentum update:
/// `v <- momentum*v + (g + wd*w)`, `w <- w - lr*v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update using each parameter's populated `grad`.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Param>,
    {
        let mut params: Vec<&mut Param> = params.into_iter().filter(|p| p.tensor.requires_grad).collect();
        for p in &params {
            let grad = p
                .tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::contract(format!("parameter `{}` has no gradient", p.name)))?;
            if grad.len() != p.tensor.numel() {
                return Err(Error::dim("sgd_step", format!("gradient shape for `{}`", p.name)));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric { param: p.name.clone() });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.tensor.numel())
        {
            return Err(Error::dim("sgd_step", "velocity buffers do not mirror parameters"));
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.tensor.grad.take().expect("checked above");
            for ((w, v), g) in p.tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = momentum * *v + (g + weight_decay * *w);
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.eps > 0.0) {
            return Err(Error::config("eps", "Adam epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::config("beta", "Adam betas must lie in [0, 1)"));
        }
        Ok(AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, tensors: &mut [Tensor], grads: &[&[f64]]) -> Result<()> {
        if tensors.len() != grads.len() {
            return Err(Error::dim("adam_step", "one gradient per tensor required"));
        }
        for (t, g) in tensors.iter().zip(grads) {
            if t.numel() != g.len() {
                return Err(Error::dim("adam_step", format!("{} values vs {} gradients", t.numel(), g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    param: "adam target".into(),
                });
            }
        }
        if self.step == 0 {
            self.first = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != tensors.len() {
            return Err(Error::dim("adam_step", "moment buffers do not mirror tensors"));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((t, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((x, &gi), mi), vi) in t.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
