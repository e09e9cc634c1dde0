//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::mlp::{MlpGrad, MlpParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn for_params(params: &MlpParams) -> Self {
        Self::new(params.num_params())
    }
}

fn check(params: &MlpParams, grad: &MlpGrad, what: &str) -> Result<()> {
    if !grad.matches(params) {
        return Err(Error::Dimension(format!(
            "{what}: gradient has {} entries, parameters {}",
            grad.len(),
            params.num_params()
        )));
    }
    if let Some(i) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: gradient entry {i} is {}", grad.as_slice()[i])));
    }
    Ok(())
}

/// Adam with bias correction.
pub fn adam_step(params: &mut MlpParams, grad: &MlpGrad, state: &mut AdamState, lr: f64) -> Result<()> {
    check(params, grad, "adam")?;
    if state.m.len() != params.num_params() {
        return Err(Error::Dimension("adam state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Plain gradient descent: `params − lr·grad`.
pub fn sgd_step(params: &mut MlpParams, grad: &MlpGrad, lr: f64) -> Result<()> {
    check(params, grad, "sgd")?;
    for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *p -= lr * g;
    }
    Ok(())
}
