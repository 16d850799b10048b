//! AdamW with decoupled weight decay and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update of a flat parameter block. `t` is the 1-based step count
/// used for bias correction.
pub fn adamw_step<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: T,
    cfg: &AdamWConfig,
) -> Result<()> {
    if theta.len() != grad.len() || m.len() != grad.len() || v.len() != grad.len() {
        return Err(Error::Shape("optimizer state does not match parameter".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    if t == 0 {
        return Err(Error::Invalid("optimizer step count starts at 1".into()));
    }
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let c1 = one - b1.powi(t as i32);
    let c2 = one - b2.powi(t as i32);
    let eps = T::lit(cfg.eps);
    let decay = one - lr * T::lit(cfg.weight_decay);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (one - b1) * grad[i];
        v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        theta[i] = theta[i] * decay - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// `peak · ½(1 + cos(π t / T))`.
pub fn cosine_lr<T: Scalar>(t: usize, total: usize, peak: T) -> Result<T> {
    if total == 0 {
        return Err(Error::Invalid("cosine schedule needs at least one step".into()));
    }
    if t > total {
        return Err(Error::Invalid(format!("step {t} beyond schedule length {total}")));
    }
    if t == total {
        return Ok(T::zero());
    }
    let frac = T::lit(t as f64 / total as f64);
    Ok(peak * T::lit(0.5) * (T::one() + (T::PI() * frac).cos()))
}

/// AdamW state for every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Frozen parameters and parameters without a gradient
    /// are skipped entirely (no weight decay either). A non-finite gradient
    /// anywhere aborts the whole step before anything is written.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::Diverged(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.step += 1;
        let ids: Vec<_> = (0..params.len()).collect();
        for (i, g) in ids.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            let p = params.get_mut(crate::params::ParamId::at(i));
            if p.frozen {
                continue;
            }
            adamw_step(
                p.value.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr,
                &self.cfg,
            )?;
        }
        Ok(())
    }
}
