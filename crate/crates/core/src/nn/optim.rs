//! AdamW with decoupled weight decay and a per-phase cosine schedule.
//!
//! Moment tensors are keyed by parameter position; when the classification
//! head grows rows mid-stream, the stored moments grow with it (new rows get
//! zero moments, old rows keep theirs) so expansion never perturbs the
//! optimizer state of previously learned classes.

use crate::error::{Error, Result};
use crate::nn::Param;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
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

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn slot(&mut self, idx: usize, shape: (usize, usize)) {
        while self.m.len() <= idx {
            self.m.push(Array2::zeros((0, 0)));
            self.v.push(Array2::zeros((0, 0)));
        }
        if self.m[idx].dim() != shape {
            let mut m = Array2::zeros(shape);
            let mut v = Array2::zeros(shape);
            let old = self.m[idx].dim();
            if old.1 == shape.1 && old.0 <= shape.0 && old.0 > 0 {
                // Grown rows (head expansion): keep existing moments.
                m.slice_mut(ndarray::s![..old.0, ..]).assign(&self.m[idx]);
                v.slice_mut(ndarray::s![..old.0, ..]).assign(&self.v[idx]);
            }
            self.m[idx] = m;
            self.v[idx] = v;
        }
    }

    /// One update over `params` at learning rate `lr`. `grad_scale`
    /// multiplies accumulated gradients (1/k under k-fold accumulation).
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64, grad_scale: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            self.slot(i, p.value.dim());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, pg), (mv, vv)) in p
                .value
                .iter_mut()
                .zip(p.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = pg * grad_scale;
                *mv = b1 * *mv + (1.0 - b1) * g;
                *vv = b2 * *vv + (1.0 - b2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let mut update = mhat / (vhat.sqrt() + self.cfg.eps);
                if p.decay {
                    update += self.cfg.weight_decay * *pv;
                }
                *pv -= lr * update;
            }
        }
    }

    /// Flatten optimizer state for checkpointing.
    pub fn export_state(&self) -> OptimizerState {
        let pack = |ts: &[Array2<f64>]| {
            ts.iter()
                .map(|a| (a.nrows(), a.ncols(), a.iter().cloned().collect::<Vec<f64>>()))
                .collect()
        };
        OptimizerState { t: self.t, m: pack(&self.m), v: pack(&self.v) }
    }

    pub fn import_state(&mut self, state: OptimizerState) -> Result<()> {
        let unpack = |ts: Vec<(usize, usize, Vec<f64>)>| -> Result<Vec<Array2<f64>>> {
            ts.into_iter()
                .map(|(r, c, data)| {
                    Array2::from_shape_vec((r, c), data)
                        .map_err(|e| Error::Serde(format!("bad optimizer tensor: {e}")))
                })
                .collect()
        };
        self.t = state.t;
        self.m = unpack(state.m)?;
        self.v = unpack(state.v)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    m: Vec<(usize, usize, Vec<f64>)>,
    v: Vec<(usize, usize, Vec<f64>)>,
}

/// Cosine decay from `base` toward zero over `total` updates; `step` counts
/// from 0. A single-update phase trains at full rate.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = (step.min(total - 1)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
