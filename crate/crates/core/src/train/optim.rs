use serde::{Deserialize, Serialize};

use super::config::{OptimizerConfig, OptimizerKind};
use crate::model::ModelParams;

/// Optimizer state over the flattened parameter vector. Plain gradient
/// descent keeps no state; Adam keeps its moment estimates and step count,
/// all of which are checkpointed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let moments = if config.kind == OptimizerKind::Adam {
            num_params
        } else {
            0
        };
        Self {
            config,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// Applies one descent step of `grad` to `params`.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams) {
        let lr = self.config.learning_rate;
        self.t += 1;
        match self.config.kind {
            OptimizerKind::Sgd => params.axpy(-lr, grad),
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                let g = grad.flatten();
                let mut p = params.flatten();
                for i in 0..p.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
                params.assign_flat(&p);
            }
        }
    }
}
