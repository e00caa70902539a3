use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// Hyperparameters of one decoupled-weight-decay update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// First and second moments, one pair per parameter in entry order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of applied updates.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Nothing changed; `param` is the first entry with a non-finite gradient.
    Skipped { param: usize },
}

/// Global L2 norm over all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update. `decays[i]` selects whether weight decay applies to
/// `params[i]`.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    decays: &[bool],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hp: AdamWParams,
) -> Result<StepOutcome> {
    let n = params.len();
    if grads.len() != n || decays.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![n],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if let Some(param) = grads.iter().position(|g| !g.all_finite()) {
        return Ok(StepOutcome::Skipped { param });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for i in 0..n {
        let decay = if decays[i] { hp.weight_decay } else { 0.0 };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            p[j] -= lr * (update + decay * p[j]);
        }
    }
    Ok(StepOutcome::Applied)
}
