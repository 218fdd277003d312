use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use crate::error::{Error, Result};

/// Named tensors, iterated in name order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Cosine learning-rate decay from `base_lr` at step 0 to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Plain SGD. Momentum, weight decay and clipping exist as knobs but are off
/// by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub schedule: CosineSchedule,
    pub step: u64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(skip)]
    velocity: ParamSet,
}

impl OptimizerState {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            schedule: CosineSchedule {
                base_lr,
                total_steps,
            },
            step: 0,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: None,
            velocity: ParamSet::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies `θ ← θ − lr(step)·g` to every parameter not in `frozen` and
    /// advances the step counter. Returns the learning rate used.
    pub fn sgd_step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        frozen: &BTreeSet<String>,
    ) -> Result<f64> {
        let lr = self.lr();
        for name in params.keys() {
            if frozen.contains(name) {
                continue;
            }
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("no gradient for parameter `{name}`")))?;
            if g.len() != params[name].len() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    lhs: params[name].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }

        let clip_scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .filter(|(k, _)| !frozen.contains(*k))
                    .flat_map(|(_, g)| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        for (name, param) in params.iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let g = &grads[name];
            if self.momentum == 0.0 && self.weight_decay == 0.0 {
                for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * clip_scale * gv;
                }
                continue;
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.rows(), param.cols()));
            for ((p, v), gv) in param
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(g.data())
            {
                let d = clip_scale * gv + self.weight_decay * *p;
                *v = self.momentum * *v + d;
                *p -= lr * *v;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
