//! AdamW with decoupled weight decay and a linear warmup schedule.
//!
//! Moments live in plain vectors and the update runs as one fused scalar
//! loop per parameter; the only tensor traffic is one gradient read and one
//! parameter write per step.

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_iters: 500,
        }
    }
}

/// Learning rate at a 1-based iteration: linear ramp over `warmup_iters`,
/// constant afterwards. With warmup 500 and base 3e-4, iteration 250 yields
/// exactly 1.5e-4.
pub fn warmup_lr(base: f64, warmup_iters: usize, iter: usize) -> f64 {
    if warmup_iters == 0 {
        base
    } else {
        base * (iter as f64 / warmup_iters as f64).min(1.0)
    }
}

struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step_t: usize,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let slots = ps
            .params()
            .iter()
            .map(|p| {
                let n = p.var.elem_count();
                Slot {
                    m: vec![0f32; n],
                    v: vec![0f32; n],
                }
            })
            .collect();
        Ok(Self {
            cfg,
            step_t: 0,
            slots,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_t
    }

    /// One update with the given learning rate. Decay applies only to
    /// parameters registered with `decay = true`.
    pub fn step(&mut self, lr: f64, ps: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step_t += 1;
        let t = self.step_t as i32;
        let inv_bc1 = (1.0 - self.cfg.beta1.powi(t)).recip() as f32;
        let inv_bc2 = (1.0 - self.cfg.beta2.powi(t)).recip() as f32;
        let b1 = self.cfg.beta1 as f32;
        let b2 = self.cfg.beta2 as f32;
        let eps = self.cfg.eps as f32;
        let lr32 = lr as f32;
        for (entry, slot) in ps.params().iter().zip(self.slots.iter_mut()) {
            let Some(g) = grads.get(entry.var.as_tensor()) else {
                continue;
            };
            let g = g.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
            let mut p = entry.var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let decay = if entry.decay {
                1.0 - lr32 * self.cfg.weight_decay as f32
            } else {
                1.0
            };
            for i in 0..p.len() {
                let m = b1 * slot.m[i] + (1.0 - b1) * g[i];
                let v = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                slot.m[i] = m;
                slot.v[i] = v;
                let update = (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps);
                p[i] = p[i] * decay - lr32 * update;
            }
            let dims = entry.var.dims().to_vec();
            entry
                .var
                .set(&Tensor::from_vec(p, dims, entry.var.device())?)?;
        }
        Ok(())
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state_tensors(&self, ps: &ParamStore) -> Vec<(String, Tensor)> {
        let dev = ps.device();
        let mut out = Vec::new();
        for (entry, slot) in ps.params().iter().zip(self.slots.iter()) {
            let n = slot.m.len();
            out.push((
                format!("opt.m.{}", entry.name),
                Tensor::from_vec(slot.m.clone(), n, dev).expect("moment tensor"),
            ));
            out.push((
                format!("opt.v.{}", entry.name),
                Tensor::from_vec(slot.v.clone(), n, dev).expect("moment tensor"),
            ));
        }
        out
    }

    pub fn restore_state(
        &mut self,
        ps: &ParamStore,
        step_t: usize,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<()> {
        self.step_t = step_t;
        for (entry, slot) in ps.params().iter().zip(self.slots.iter_mut()) {
            if let Some(m) = lookup(&format!("opt.m.{}", entry.name)) {
                slot.m = m.flatten_all()?.to_vec1::<f32>()?;
            }
            if let Some(v) = lookup(&format!("opt.v.{}", entry.name)) {
                slot.v = v.flatten_all()?.to_vec1::<f32>()?;
            }
        }
        Ok(())
    }
}
