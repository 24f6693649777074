//! AdamW and a reduce-on-plateau learning-rate schedule.

use std::collections::BTreeMap;

use boxseg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataio::OptimizerState;
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Decoupled weight decay Adam. Parameters without a gradient in a step
/// are left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, state: OptimizerState::default() }
    }

    pub fn with_state(cfg: AdamWConfig, state: OptimizerState) -> Self {
        Self { cfg, state }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !p.trainable {
                continue;
            }
            let shape = g.shape().to_vec();
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                let mi = c.beta1 * md[i] as f64 + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * vd[i] as f64 + (1.0 - c.beta2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let mut wi = *w as f64;
                wi -= lr * c.weight_decay * wi;
                wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                *w = wi as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_min: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { factor: 0.5, patience: 5, min_delta: 1e-4, lr_min: 1e-6 }
    }
}

/// Multiplies the rate by `factor` once more than `patience` consecutive
/// observations fail to improve on the best by `min_delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub cfg: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad: usize,
}

impl Plateau {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Self {
        Self { cfg, lr, best: None, bad: 0 }
    }

    /// Feeds one validation loss and returns the rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b - self.cfg.min_delta => self.bad += 1,
            _ => {
                self.best = Some(loss);
                self.bad = 0;
            }
        }
        if self.bad > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.lr_min);
            self.bad = 0;
        }
        self.lr
    }
}
