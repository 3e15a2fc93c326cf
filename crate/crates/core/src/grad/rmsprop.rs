use serde::{Deserialize, Serialize};

use super::{GradError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_alpha() -> f64 {
    0.99
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            alpha: default_alpha(),
            eps: default_eps(),
        }
    }
}

/// RMSProp with per-element running mean of squared gradients:
/// `v <- a v + (1 - a) g^2`, `p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, shapes: &[Tensor]) -> Self {
        Self {
            config,
            square_avg: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn square_avg(&self) -> &[Tensor] {
        &self.square_avg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), GradError> {
        if params.len() != grads.len() || params.len() != self.square_avg.len() {
            return Err(GradError::shape(
                "rmsprop",
                &[params.len(), self.square_avg.len()],
                &[grads.len()],
            ));
        }
        let RmsPropConfig { lr, alpha, eps } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(GradError::shape("rmsprop", p.shape(), g.shape()));
            }
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = alpha * *vi + (1.0 - alpha) * gi * gi;
                *pi -= lr * gi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
