//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{Gradients, Group, ParamStore};
use crate::tensor::{Real, Tensor};

use super::config::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One update of `theta` in place, `step` counting from 1:
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², then
/// θ ← θ − lr·(m̂/(√v̂+ε) + w·θ). Arithmetic is in `f64`.
pub fn adamw_step(
    theta: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    h: &AdamWHyper,
) -> Result<()> {
    if step == 0 {
        return Err(Error::config("AdamW step counter starts at 1"));
    }
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::shape("AdamW buffers differ in length"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at element {i}")));
    }
    let bc1 = 1.0 - h.beta1.powi(step as i32);
    let bc2 = 1.0 - h.beta2.powi(step as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    for i in 0..theta.len() {
        let g = grad[i] as f64;
        let mi = h.beta1 * m[i] as f64 + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i] as f64 + (1.0 - h.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let adaptive = (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        theta[i] = (theta[i] as f64 * decay - h.lr * adaptive) as f32;
    }
    Ok(())
}

/// Moment buffers for every parameter of a store plus per-group step
/// counters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub generator_step: u64,
    pub critic_step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.params().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            generator_step: 0,
            critic_step: 0,
        }
    }

    fn hyper(&self, group: Group) -> AdamWHyper {
        AdamWHyper {
            lr: match group {
                Group::Generator => self.config.lr_generator,
                Group::Critic => self.config.lr_critic,
            },
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps,
            weight_decay: self.config.weight_decay,
        }
    }

    /// Updates every parameter of `group` from `grads`; parameters of the
    /// group without a gradient are treated as having a zero gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore, grads: &Gradients<T>, group: Group) -> Result<()> {
        for (id, g) in grads.params() {
            let p = store.param(id);
            if p.group == group && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
            }
        }
        let counter = match group {
            Group::Generator => &mut self.generator_step,
            Group::Critic => &mut self.critic_step,
        };
        *counter += 1;
        let step = *counter;
        let h = self.hyper(group);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.param_mut(id);
            if p.group != group {
                continue;
            }
            let g: Vec<f32> = match grads.param(id) {
                Some(g) => g.iter().map(|v| v.as_f32()).collect(),
                None => vec![0.0; p.value.len()],
            };
            adamw_step(p.value.data_mut(), &g, self.m[k].data_mut(), self.v[k].data_mut(), step, &h)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{}: {msg}", p.name)),
                    other => other,
                })?;
        }
        Ok(())
    }
}
