//! Adam with L2-coupled weight decay (the decay term is added to the
//! gradient before the moment updates).

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    settings: AdamSettings,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, settings: AdamSettings) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            settings,
            vars,
            first,
            second,
            steps: 0,
        })
    }

    pub fn settings(&self) -> &AdamSettings {
        &self.settings
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update. Variables without a gradient still receive the
    /// weight-decay contribution.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamSettings {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.settings;
        let t = self.steps as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for ((var, m), v) in self.vars.iter().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let theta = var.as_tensor();
            let mut g = match grads.get(theta) {
                Some(g) => g.clone(),
                None => theta.zeros_like()?,
            };
            if weight_decay != 0.0 {
                g = (g + (theta * weight_decay)?)?;
            }
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }
}
