//! AdamW with cosine learning-rate decay.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            min_lr_ratio: 0.01,
            warmup_steps: 60,
        }
    }
}

/// Peak-scaled learning rate at `step` of `total` (warmup, then cosine).
pub fn cosine_lr(peak: f64, step: usize, total: usize, cfg: &AdamConfig) -> f64 {
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = peak * cfg.min_lr_ratio;
    floor + 0.5 * (peak - floor) * (1.0 + (PI * t).cos())
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Optimizer state for an ordered list of parameter tensors.
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        let slots = params
            .iter()
            .map(|t| Slot {
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
                decay: t.ndim() >= 2,
            })
            .collect();
        Adam { cfg, slots, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `lrs[i]` is the learning rate of parameter `i`, and a
    /// zero rate leaves both the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} slots, got {} params, {} grads, {} rates",
                self.slots.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        self.begin_step();
        for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, gr, lrs[i])?;
        }
        Ok(())
    }

    /// Advance the step counter; follow with one [`Adam::update`] per slot.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, p: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let c = self.cfg;
        let len = self.slots.len();
        let slot = self.slots.get_mut(slot).ok_or(Error::Index {
            op: "adam",
            index: slot,
            len,
        })?;
        if grad.numel() != p.numel() || slot.m.len() != p.numel() {
            return Err(Error::shape("adam", p.shape(), grad.shape()));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let wd = if slot.decay { c.weight_decay } else { 0.0 };
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(&mut slot.m).zip(&mut slot.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *w -= lr * (update + wd * *w);
        }
        Ok(())
    }
}
