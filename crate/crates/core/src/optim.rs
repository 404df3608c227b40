//! Adam with bias correction and a linear warm-up / linear decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate ramps linearly to `base_lr` over the first
/// `warmup_frac * total_steps` steps, then decays linearly to zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl LinearSchedule {
    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_frac).ceil() as usize).min(self.total_steps)
    }

    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: usize) -> f64 {
        let warm = self.warmup_steps();
        if self.total_steps == 0 {
            return 0.0;
        }
        let t = t.clamp(1, self.total_steps);
        if t <= warm {
            self.base_lr * t as f64 / warm as f64
        } else {
            let remaining = (self.total_steps - t) as f64;
            self.base_lr * remaining / (self.total_steps - warm) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
///
/// Every gradient is checked before any parameter is touched, so a NaN
/// aborts the step with the parameters and state unchanged.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Vec<f64>>], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if state.lr.is_nan() || state.lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {} must be non-negative", state.lr)));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
            if !crate::tensor::all_finite(g) {
                return Err(Error::NonFinite("adam_step gradient"));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let data = p.data_mut();
        for i in 0..data.len() {
            let gi = g.as_ref().map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
