//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// First and second moments for each parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One AdamW update of every tensor in `params`. Weight decay applies
    /// where `decay[i]` is set.
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Tensor],
        decay: &[bool],
        lr: f64,
        cfg: &AdamWConfig,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || decay.len() != params.len() {
            return Err(Error::dim("adamw_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        self.t += 1;
        for (i, p) in params.into_iter().enumerate() {
            let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
            adamw_step(p, &grads[i], &mut self.m[i], &mut self.v[i], lr, &AdamWConfig { weight_decay: wd, ..*cfg }, self.t)?;
        }
        Ok(())
    }
}

/// `w ← w − lr·wd·w − lr·m̂/(√v̂ + eps)` with bias-corrected moments at step `t ≥ 1`.
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f64,
    cfg: &AdamWConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Parameter("adam step count starts at 1".into()));
    }
    if param.shape() != grad.shape() || param.shape() != m.shape() || param.shape() != v.shape() {
        return Err(Error::dim(
            "adamw_step",
            format!("param {:?}, grad {:?}, moments {:?}/{:?}", param.shape(), grad.shape(), m.shape(), v.shape()),
        ));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (w, g, m, v) = (param.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] = w[i] - lr * cfg.weight_decay * w[i] - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// `0.5·base_lr·(1 + cos(π·t/T))`, decaying to zero at `t = T`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Schedule { step, total });
    }
    if total == 0 {
        return Ok(base_lr);
    }
    Ok(0.5 * base_lr * (1.0 + (PI * step as f64 / total as f64).cos()))
}
