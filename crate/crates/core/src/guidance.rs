//! The guiding network `B_w` and its meta-update.
//!
//! One meta-update takes a virtual SGD step of the actor with the current
//! per-sample degrees, measures the behavior-cloning gradient on guiding
//! data at the virtual parameters, and moves `w` along
//! `(α_D α_G / n_D) Σ_k C_k ∂B_w(x_k)/∂w` with
//! `C_k = ⟨ḡ_guide(θ̂), ∇θ L_pc,k(θ)⟩`. This is the exact gradient of the
//! guiding loss at `θ̂(w)` with respect to `w`; [`meta_update_fd_oracle`]
//! recomputes it by central differences through the virtual step.

use serde::{Deserialize, Serialize};

use crate::agents::{guide_grad_average, guide_loss, Actor, PolicyTerms};
use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{sgd_step, Activation, MlpGrad, MlpParams, Rng};

pub const DEFAULT_HIDDEN: usize = 100;
pub const INIT_BOUND: f64 = 0.05;
/// Largest guiding net the finite-difference oracle will differentiate.
pub const FD_PARAM_CAP: usize = 2000;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidingNet {
    pub net: MlpParams,
    /// Feed `sign(x)·ln(1+|x|)` instead of the raw loss.
    pub log_input: bool,
}

impl GuidingNet {
    /// `1 → hidden → 1`, sigmoid throughout, weights in `±0.05`, zero biases.
    pub fn new(hidden: usize, log_input: bool, rng: &mut Rng) -> Result<Self> {
        let net = MlpParams::init_uniform_bounded(&[1, hidden, 1], Activation::Sigmoid, Activation::Sigmoid, INIT_BOUND, rng)?;
        Ok(Self { net, log_input })
    }

    /// All weights zero and output bias `b`: every input maps to
    /// `sigmoid(b)`.
    pub fn constant(hidden: usize, output_bias: f64) -> Result<Self> {
        let mut net = MlpParams::zeros(&[1, hidden, 1], Activation::Sigmoid, Activation::Sigmoid)?;
        net.layer_mut(1).1[0] = output_bias;
        Ok(Self { net, log_input: false })
    }

    pub fn transform(&self, x: f64) -> f64 {
        if self.log_input {
            x.signum() * x.abs().ln_1p()
        } else {
            x
        }
    }

    pub fn degree(&self, x: f64) -> Result<f64> {
        Ok(self.degrees(&[x])?[0])
    }

    pub fn degrees(&self, xs: &[f64]) -> Result<Vec<f64>> {
        ensure_finite(xs, "guiding-net input")?;
        let input: Vec<f64> = xs.iter().map(|&x| self.transform(x)).collect();
        Ok(self.net.forward_batch(&input, xs.len())?.into_output())
    }

    /// `Σ_k c_k ∂B_w(x_k)/∂w`.
    pub fn weighted_grad(&self, xs: &[f64], coeffs: &[f64]) -> Result<MlpGrad> {
        if xs.len() != coeffs.len() {
            return Err(Error::Dimension(format!("{} inputs vs {} coefficients", xs.len(), coeffs.len())));
        }
        ensure_finite(xs, "guiding-net input")?;
        let input: Vec<f64> = xs.iter().map(|&x| self.transform(x)).collect();
        let cache = self.net.forward_batch(&input, xs.len())?;
        Ok(self.net.backward(&cache, coeffs)?.0)
    }
}

/// Actor after one virtual SGD step, plus what the meta-update needs from
/// the batch that produced it.
#[derive(Clone, Debug)]
pub struct VirtualPolicy {
    pub theta_hat: Actor,
    pub inputs: Vec<f64>,
    pub degrees: Vec<f64>,
    /// `∇θ L_pc,k` at the pre-step parameters.
    pub constraint_grads: Vec<MlpGrad>,
}

/// `θ̂ = θ − α_D · ∇θ mean_k [improve_k + B_w(x_k)·L_pc,k]`, plain SGD.
pub fn virtual_step(actor: &Actor, terms: &PolicyTerms, guide: &GuidingNet, alpha_d: f64) -> Result<VirtualPolicy> {
    let degrees = guide.degrees(&terms.guide_input)?;
    let theta_hat = step_with_degrees(actor, terms, &degrees, alpha_d)?;
    Ok(VirtualPolicy {
        theta_hat,
        inputs: terms.guide_input.clone(),
        degrees,
        constraint_grads: terms.constraint_param_grads(actor)?,
    })
}

fn step_with_degrees(actor: &Actor, terms: &PolicyTerms, degrees: &[f64], alpha_d: f64) -> Result<Actor> {
    let g = terms.actor_grad(actor, degrees)?;
    let mut theta_hat = actor.clone();
    sgd_step(&mut theta_hat.net, &g, alpha_d)?;
    Ok(theta_hat)
}

/// Mean behavior-cloning gradient on a guiding batch at `θ̂`.
pub fn guiding_grad_average(virt: &VirtualPolicy, states: &[f64], actions: &[f64], n: usize) -> Result<MlpGrad> {
    guide_grad_average(&virt.theta_hat, states, actions, n)
}

#[derive(Clone, Debug)]
pub struct MetaUpdate {
    /// `C_k` per offline sample.
    pub alignment: Vec<f64>,
    /// Change applied to `w`.
    pub delta: MlpGrad,
}

/// Explicit chain-rule update; mutates `guide` and returns the step.
pub fn meta_update_explicit(
    guide: &mut GuidingNet,
    inputs: &[f64],
    constraint_grads: &[MlpGrad],
    guiding_grad: &MlpGrad,
    alpha_d: f64,
    alpha_g: f64,
) -> Result<MetaUpdate> {
    let n = inputs.len();
    if n == 0 || constraint_grads.len() != n {
        return Err(Error::Dimension(format!(
            "{} inputs vs {} constraint gradients",
            n,
            constraint_grads.len()
        )));
    }
    if constraint_grads.iter().any(|g| g.len() != guiding_grad.len()) {
        return Err(Error::Dimension("constraint and guiding gradients differ in shape".into()));
    }
    let alignment: Vec<f64> = constraint_grads.iter().map(|g| guiding_grad.dot(g)).collect();
    ensure_finite(&alignment, "alignment coefficient")?;
    let mut delta = guide.weighted_grad(inputs, &alignment)?;
    delta.scale(alpha_d * alpha_g / n as f64);
    if !delta.is_finite() {
        return Err(Error::NonFinite("guiding-net update".into()));
    }
    for (w, d) in guide.net.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *w += d;
    }
    Ok(MetaUpdate { alignment, delta })
}

/// Convenience wrapper running the explicit update from a virtual policy.
pub fn meta_update_from_virtual(
    guide: &mut GuidingNet,
    virt: &VirtualPolicy,
    guiding_grad: &MlpGrad,
    alpha_d: f64,
    alpha_g: f64,
) -> Result<MetaUpdate> {
    meta_update_explicit(guide, &virt.inputs, &virt.constraint_grads, guiding_grad, alpha_d, alpha_g)
}

/// `L_guide(θ̂(w))` with the offline-batch terms held fixed.
pub fn bilevel_guide_loss(
    guide: &GuidingNet,
    actor: &Actor,
    terms: &PolicyTerms,
    guide_states: &[f64],
    guide_actions: &[f64],
    n_g: usize,
    alpha_d: f64,
) -> Result<f64> {
    let degrees = guide.degrees(&terms.guide_input)?;
    let theta_hat = step_with_degrees(actor, terms, &degrees, alpha_d)?;
    guide_loss(&theta_hat, guide_states, guide_actions, n_g)
}

/// Verification-only: `Δw = −α_G ∂L_guide(θ̂(w))/∂w` by central differences.
/// Does not modify `guide`.
#[allow(clippy::too_many_arguments)]
pub fn meta_update_fd_oracle(
    guide: &GuidingNet,
    actor: &Actor,
    terms: &PolicyTerms,
    guide_states: &[f64],
    guide_actions: &[f64],
    n_g: usize,
    alpha_d: f64,
    alpha_g: f64,
) -> Result<MlpGrad> {
    if guide.net.num_params() > FD_PARAM_CAP {
        return Err(Error::InvalidInput(format!(
            "finite-difference oracle limited to {FD_PARAM_CAP} guiding parameters, got {}",
            guide.net.num_params()
        )));
    }
    let grad = crate::numeric::fd::central_diff(guide.net.as_slice(), FD_STEP, |w| {
        let mut g = guide.clone();
        g.net.as_mut_slice().copy_from_slice(w);
        bilevel_guide_loss(&g, actor, terms, guide_states, guide_actions, n_g, alpha_d)
    })?;
    Ok(MlpGrad::from_vec(grad.into_iter().map(|g| -alpha_g * g).collect()))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::numeric::dot(a, a).sqrt();
    let nb = crate::numeric::dot(b, b).sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    crate::numeric::dot(a, b) / (na * nb)
}

/// `‖a − b‖ / ‖b‖` (zero when both vanish).
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb = crate::numeric::dot(b, b).sqrt();
    if nb == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / nb
    }
}
