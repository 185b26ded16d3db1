//! First-order optimizers over flat parameter lists.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// SGD with Nesterov momentum.
    Sgd { lr: f64, momentum: f64 },
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn nesterov(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => *lr,
        }
    }

    pub fn build(&self) -> Optimizer {
        Optimizer {
            config: self.clone(),
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. `grads[i]` is the gradient of `params[i]`; `None` skips
    /// the parameter for this step. `lr_scale` multiplies the base rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr_scale: f64) {
        assert_eq!(params.len(), grads.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let lr = lr * lr_scale;
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let gj = g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { lr, momentum } => {
                let lr = lr * lr_scale;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let Some(g) = g else { continue };
                    let buf = &mut self.first[i];
                    for (j, x) in p.data_mut().iter_mut().enumerate() {
                        let gj = g.data()[j];
                        buf[j] = momentum * buf[j] + gj;
                        *x -= lr * (gj + momentum * buf[j]);
                    }
                }
            }
        }
    }
}
