//! AdamW with an optional cosine learning-rate schedule.

use candle_core::{Result, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate to zero over `total` steps.
    Cosine { total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, schedule: Schedule::Constant, clip: Some(1.0) }
    }
}

pub struct Optim {
    inner: AdamW,
    vars: Vec<Var>,
    cfg: OptimConfig,
    step: usize,
}

impl Optim {
    pub fn new(vars: Vec<Var>, cfg: OptimConfig) -> Result<Self> {
        let params = ParamsAdamW { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
        Ok(Self { inner: AdamW::new(vars.clone(), params)?, vars, cfg, step: 0 })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.lr,
            Schedule::Cosine { total } => {
                let u = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * self.cfg.lr * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Backpropagates `loss` and applies one update; returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if let Some(max) = self.cfg.clip {
            if norm > max {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.inner.set_learning_rate(self.lr_at(self.step));
        self.inner.step(&grads)?;
        self.step += 1;
        Ok(norm)
    }
}
