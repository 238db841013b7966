use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Default)]
pub(crate) struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Constant-with-warmup schedule: `lr * min(1, step / warmup)`.
pub fn warmup_lr(lr: f64, step: u64, warmup: u64) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * (step as f64 / warmup as f64).min(1.0)
    }
}

/// Linear warmup to `lr`, then cosine decay to `lr * floor` at `total`.
pub fn cosine_lr(lr: f64, step: u64, warmup: u64, total: u64, floor: f64) -> f64 {
    if step < warmup {
        return warmup_lr(lr, step, warmup);
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg }
    }

    /// Applies one decoupled-weight-decay Adam update to every parameter in
    /// `grads`. A non-finite gradient aborts before anything is modified.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), DiffError> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGradient(name.clone()));
            }
            let p = store.get(name).ok_or_else(|| DiffError::UnresolvedParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch { op: "adamw", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        store.opt.step += 1;
        let t = store.opt.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads.iter() {
            let m = store.opt.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
            }
            let v = store.opt.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            }
            let m = store.opt.m[name].data().to_vec();
            let v = store.opt.v[name].data().to_vec();
            let p = store.params.get_mut(name).expect("checked above");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(&m).zip(&v) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        Ok(())
    }
}
