//! AdamW with decoupled weight decay, linear-warmup + cosine-decay learning rate, and global
//! gradient-norm clipping.

use super::{round_slice, Precision, Tensor};
use crate::{Error, Result};

/// Piecewise schedule: lr(t) = peak·(t+1)/warmup for t < warmup, then cosine from peak to
/// min over the remaining steps, hitting min exactly at the final step. Steps at or past
/// `total_steps` clamp to `min_lr`.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if step + 1 >= self.total_steps {
            return self.min_lr;
        }
        let decay_steps = self.total_steps - self.warmup_steps;
        let progress = if decay_steps > 1 {
            (step - self.warmup_steps) as f64 / (decay_steps - 1) as f64
        } else {
            1.0
        };
        let lr = self.min_lr
            + 0.5 * (self.peak_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos());
        lr.max(self.min_lr)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

struct Slot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Decoupled decay applies to matrices and conv kernels only (rank >= 2); biases,
    /// gains, mask tokens and other vectors are exempt.
    decay: bool,
}

/// AdamW over a fixed, ordered parameter list. Moments are addressed positionally and
/// verified by name, so the caller must pass parameters in registration order every step.
///
/// A parameter whose gradient entry is `None` for a step is left completely untouched
/// (no moment decay, no weight decay): freezing or ablating a subgraph therefore cannot
/// move its parameters.
pub struct AdamW {
    cfg: OptimizerConfig,
    slots: Vec<Slot>,
    steps_done: u64,
    precision: Precision,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &[(String, &Tensor)], precision: Precision) -> AdamW {
        let slots = params
            .iter()
            .map(|(name, t)| Slot {
                name: name.clone(),
                m: vec![0.0; t.len()],
                v: vec![0.0; t.len()],
                decay: t.rank() >= 2,
            })
            .collect();
        AdamW { cfg, slots, steps_done: 0, precision }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    /// Learning rate the next `apply` call will use.
    pub fn next_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.steps_done)
    }

    /// One update. `params` must align with the registration order; `grads[i] = None` skips
    /// parameter i entirely. Returns the learning rate used. Non-finite gradients abort,
    /// naming the parameter.
    pub fn apply(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Vec<f64>>],
    ) -> Result<f64> {
        if params.len() != self.slots.len() || grads.len() != self.slots.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params / {} grads vs {} slots", params.len(), grads.len(), self.slots.len()),
            ));
        }
        let lr = self.cfg.schedule.lr_at(self.steps_done);
        self.steps_done += 1;
        let t = self.steps_done as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((slot, (name, tensor)), grad) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads)
        {
            if slot.name != *name {
                return Err(Error::shape(
                    "adamw",
                    format!("parameter order changed: expected {}, got {name}", slot.name),
                ));
            }
            let Some(g) = grad else { continue };
            if g.len() != slot.m.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient for {name} has {} values, parameter has {}", g.len(), slot.m.len()),
                ));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let wd = if slot.decay { self.cfg.weight_decay } else { 0.0 };
            let data = tensor.data_mut();
            for i in 0..g.len() {
                slot.m[i] = self.cfg.beta1 * slot.m[i] + (1.0 - self.cfg.beta1) * g[i];
                slot.v[i] = self.cfg.beta2 * slot.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + wd * data[i]);
            }
            round_slice(self.precision, data);
            round_slice(self.precision, &mut slot.m);
            round_slice(self.precision, &mut slot.v);
        }
        Ok(lr)
    }

    /// Moments and step counter as named tensors, for checkpointing.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2 + 1);
        out.push((
            "opt.steps_done".to_string(),
            Tensor::new(&[1], vec![self.steps_done as f64]).expect("scalar"),
        ));
        for slot in &self.slots {
            out.push((
                format!("opt.m.{}", slot.name),
                Tensor::new(&[slot.m.len()], slot.m.clone()).expect("moment"),
            ));
            out.push((
                format!("opt.v.{}", slot.name),
                Tensor::new(&[slot.v.len()], slot.v.clone()).expect("moment"),
            ));
        }
        out
    }

    /// Restores moments and step counter written by [`AdamW::state_tensors`].
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("optimizer state missing tensor {name}")))
        };
        self.steps_done = find("opt.steps_done")?.item() as u64;
        for slot in &mut self.slots {
            let m = find(&format!("opt.m.{}", slot.name))?;
            let v = find(&format!("opt.v.{}", slot.name))?;
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(Error::Format(format!(
                    "optimizer moments for {} have {} values, expected {}",
                    slot.name,
                    m.len(),
                    slot.m.len()
                )));
            }
            slot.m.copy_from_slice(m.data());
            slot.v.copy_from_slice(v.data());
        }
        Ok(())
    }
}

/// Scales all gradients so the global L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
