//! Functional optimizers: every step returns fresh parameters and leaves its
//! inputs untouched.

use crate::error::Result;
use crate::tensor::{Float, Tensor};

use super::params::ParamSet;

/// `params - lr * grads`.
pub fn sgd_step<T: Float>(params: &ParamSet<T>, grads: &ParamSet<T>, lr: T) -> Result<ParamSet<T>> {
    params.zip_with(grads, |p, g| p - lr * g)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay (decay applied to the
/// parameters before the moment-based step).
pub fn adamw_step<T: Float>(
    state: &AdamState<T>,
    params: &ParamSet<T>,
    grads: &ParamSet<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<(AdamState<T>, ParamSet<T>)> {
    params.check_aligned(grads)?;
    params.check_aligned(&state.m)?;
    let step = state.step + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let lit = T::lit;
    let decay = lit(1.0 - lr * cfg.weight_decay);

    let mut new_m = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    let mut new_p = Vec::with_capacity(params.len());
    for (((p, g), m), v) in params.tensors().zip(grads.tensors()).zip(state.m.tensors()).zip(state.v.tensors()) {
        let m1: Vec<T> = m.data().iter().zip(g.data()).map(|(&m, &g)| lit(b1) * m + lit(1.0 - b1) * g).collect();
        let v1: Vec<T> = v.data().iter().zip(g.data()).map(|(&v, &g)| lit(b2) * v + lit(1.0 - b2) * g * g).collect();
        let p1: Vec<T> = p
            .data()
            .iter()
            .zip(m1.iter().zip(&v1))
            .map(|(&p, (&m, &v))| {
                let mhat = m / lit(bc1);
                let vhat = v / lit(bc2);
                p * decay - lit(lr) * mhat / (vhat.sqrt() + lit(cfg.eps))
            })
            .collect();
        new_m.push(Tensor::new(m.shape().to_vec(), m1)?);
        new_v.push(Tensor::new(v.shape().to_vec(), v1)?);
        new_p.push(Tensor::new(p.shape().to_vec(), p1)?);
    }
    Ok((
        AdamState {
            m: state.m.with_values(new_m)?,
            v: state.v.with_values(new_v)?,
            step,
        },
        params.with_values(new_p)?,
    ))
}
