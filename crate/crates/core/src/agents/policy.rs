//! Per-sample policy objectives, split into an improvement part and a
//! constraint part so that `loss_k = improve_k + degree_k · constraint_k`.
//!
//! All gradients here are taken with respect to the actor's raw outputs;
//! [`PolicyTerms::actor_grad`] and [`PolicyTerms::constraint_param_grads`]
//! carry them back to the parameters.

use super::actor::{clamp_log_std, tanh_slope, Actor, PolicyHead, SQUASH_EPS};
use super::critic::{q_with_action_grad, Critics};
use super::{AdapterConfig, Algorithm};
use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{ForwardCache, MlpGrad};

/// Upper clamp on the IQL advantage exponent.
pub const IQL_EXP_CLAMP: f64 = 10.0;
const LAMBDA_FLOOR: f64 = 1e-12;

pub struct PolicyTerms {
    pub n: usize,
    pub out_dim: usize,
    pub cache: ForwardCache,
    pub improve_loss: Vec<f64>,
    pub constraint_loss: Vec<f64>,
    /// `∂improve_k/∂out_k`, row per sample.
    pub improve_grad: Vec<f64>,
    /// `∂constraint_k/∂out_k`, row per sample.
    pub constraint_grad: Vec<f64>,
    /// Scalar fed to the guiding network for each sample.
    pub guide_input: Vec<f64>,
    /// Detached Q-term coefficient actually used (1 when not applicable).
    pub lambda_hat: f64,
}

/// Degrees must be one per sample and lie in `[0, 1]`.
pub fn check_degrees(degrees: &[f64], n: usize) -> Result<()> {
    if degrees.len() != n {
        return Err(Error::Dimension(format!("{} degrees for a batch of {n}", degrees.len())));
    }
    if let Some(d) = degrees.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::InvalidInput(format!("constraint degree {d} outside [0, 1]")));
    }
    Ok(())
}

impl PolicyTerms {
    pub fn loss(&self, degrees: &[f64]) -> Result<f64> {
        check_degrees(degrees, self.n)?;
        let total: f64 = (0..self.n)
            .map(|k| self.improve_loss[k] + degrees[k] * self.constraint_loss[k])
            .sum();
        Ok(total / self.n as f64)
    }

    /// Gradient of the batch-mean loss with respect to the actor outputs.
    pub fn output_grad(&self, degrees: &[f64]) -> Result<Vec<f64>> {
        check_degrees(degrees, self.n)?;
        let inv = 1.0 / self.n as f64;
        let od = self.out_dim;
        let mut g = Vec::with_capacity(self.n * od);
        for k in 0..self.n {
            for j in 0..od {
                let i = k * od + j;
                g.push((self.improve_grad[i] + degrees[k] * self.constraint_grad[i]) * inv);
            }
        }
        Ok(g)
    }

    pub fn actor_grad(&self, actor: &Actor, degrees: &[f64]) -> Result<MlpGrad> {
        let g = actor.net.backward(&self.cache, &self.output_grad(degrees)?)?.0;
        if !g.is_finite() {
            return Err(Error::NonFinite("policy gradient".into()));
        }
        Ok(g)
    }

    /// `∇θ constraint_k` for every sample.
    pub fn constraint_param_grads(&self, actor: &Actor) -> Result<Vec<MlpGrad>> {
        let grads = actor.net.per_sample_backward(&self.cache, &self.constraint_grad)?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("per-sample constraint gradient".into()));
        }
        Ok(grads)
    }
}

/// Evaluate the policy objective of `algo` on a batch.
///
/// `noise` holds the frozen standard-normal draws for the stochastic heads
/// (`actor.noise_len(n)` values). `lambda_hat` overrides the batch-adaptive
/// Q coefficient; pass `None` in training.
#[allow(clippy::too_many_arguments)]
pub fn policy_terms(
    algo: Algorithm,
    cfg: &AdapterConfig,
    actor: &Actor,
    critics: &Critics,
    states: &[f64],
    actions: &[f64],
    n: usize,
    noise: &[f64],
    lambda_hat: Option<f64>,
) -> Result<PolicyTerms> {
    if n == 0 {
        return Err(Error::InvalidInput("policy loss on an empty batch".into()));
    }
    if actor.head != algo.head() {
        return Err(Error::InvalidInput(format!("{} needs a {:?} actor", algo.as_str(), algo.head())));
    }
    let ad = actor.action_dim();
    let od = actor.out_dim();
    if actions.len() != n * ad {
        return Err(Error::Dimension("batch actions do not match the actor".into()));
    }
    let cache = actor.forward(states, n)?;
    let out = cache.output().to_vec();
    let b = actor.action_bound;
    let mut improve_loss = vec![0.0; n];
    let mut constraint_loss = vec![0.0; n];
    let mut improve_grad = vec![0.0; n * od];
    let mut constraint_grad = vec![0.0; n * od];
    let guide_input;
    let mut lam = 1.0;

    match algo {
        Algorithm::Td3Bc => {
            let acts = actor.mean_actions(&out, n);
            let (q, gq) = q_with_action_grad(&critics.q1, states, &acts, n, ad)?;
            lam = lambda_hat.unwrap_or_else(|| adaptive_lambda(cfg.lambda, &q));
            for k in 0..n {
                improve_loss[k] = -lam * q[k];
                let mut pc = 0.0;
                for j in 0..ad {
                    let i = k * ad + j;
                    let diff = acts[i] - actions[i];
                    pc += diff * diff / ad as f64;
                    improve_grad[k * od + j] = -lam * gq[i] * b;
                    constraint_grad[k * od + j] = 2.0 * diff / ad as f64 * b;
                }
                constraint_loss[k] = pc;
            }
            guide_input = constraint_loss.clone();
        }
        Algorithm::SacBc | Algorithm::Cql => {
            let (acts, logp) = actor.sample_actions(&out, n, noise)?;
            let (q, gq) = min_q_with_action_grad(critics, states, &acts, n, ad)?;
            let sac = algo == Algorithm::SacBc;
            if sac {
                lam = lambda_hat.unwrap_or_else(|| adaptive_lambda(cfg.lambda, &q));
            }
            let alpha = cfg.alpha;
            for k in 0..n {
                let row = &out[k * od..(k + 1) * od];
                improve_loss[k] = alpha * logp[k] + if sac { -lam * q[k] } else { 0.0 };
                let mut pc = 0.0;
                for j in 0..ad {
                    let i = k * ad + j;
                    let (ls, mask) = clamp_log_std(row[ad + j]);
                    let sigma = ls.exp();
                    let e = noise[i];
                    let z = row[j] + sigma * e;
                    let u = z.tanh();
                    let du = tanh_slope(z);
                    let glog = 2.0 * u * du / (du + SQUASH_EPS);
                    // ∂/∂ã of the action-space terms
                    let (ga_imp, ga_pc) = if sac {
                        let diff = acts[i] - actions[i];
                        pc += diff * diff / ad as f64;
                        (-lam * gq[i], 2.0 * diff / ad as f64)
                    } else {
                        (0.0, -gq[i])
                    };
                    let dz = b * du;
                    improve_grad[k * od + j] = ga_imp * dz + alpha * glog;
                    improve_grad[k * od + ad + j] = mask * (ga_imp * dz * sigma * e + alpha * (-1.0 + glog * sigma * e));
                    constraint_grad[k * od + j] = ga_pc * dz;
                    constraint_grad[k * od + ad + j] = mask * ga_pc * dz * sigma * e;
                }
                constraint_loss[k] = if sac { pc } else { -q[k] };
            }
            guide_input = if sac {
                constraint_loss.clone()
            } else {
                critics.min_q(states, actions, n, false)?
            };
        }
        Algorithm::Iql => {
            let weights = iql_weights(cfg, critics, states, actions, n)?;
            let logp = actor.gaussian_log_prob(&out, n, actions);
            for k in 0..n {
                let row = &out[k * od..(k + 1) * od];
                let w = weights[k];
                constraint_loss[k] = -w * logp[k];
                for j in 0..ad {
                    let (ls, mask) = clamp_log_std(row[ad + j]);
                    let var = (2.0 * ls).exp();
                    let t = row[j].tanh();
                    let diff = actions[k * ad + j] - b * t;
                    constraint_grad[k * od + j] = -w * diff / var * b * (1.0 - t * t);
                    constraint_grad[k * od + ad + j] = w * mask * (1.0 - diff * diff / var);
                }
            }
            guide_input = actor.sample_actions(&out, n, noise)?.1;
        }
    }
    ensure_finite(&constraint_loss, "policy constraint loss")?;
    ensure_finite(&improve_loss, "policy improvement loss")?;
    ensure_finite(&guide_input, "guiding-net input")?;
    Ok(PolicyTerms {
        n,
        out_dim: od,
        cache,
        improve_loss,
        constraint_loss,
        improve_grad,
        constraint_grad,
        guide_input,
        lambda_hat: lam,
    })
}

fn adaptive_lambda(lambda: f64, q: &[f64]) -> f64 {
    let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / q.len() as f64;
    lambda / mean_abs.max(LAMBDA_FLOOR)
}

/// `min(Q1, Q2)` at the given actions and its action gradient (the
/// gradient of whichever net attains the minimum).
fn min_q_with_action_grad(
    critics: &Critics,
    states: &[f64],
    actions: &[f64],
    n: usize,
    ad: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (q1, g1) = q_with_action_grad(&critics.q1, states, actions, n, ad)?;
    let (q2, g2) = q_with_action_grad(&critics.q2, states, actions, n, ad)?;
    let mut q = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n * ad);
    for k in 0..n {
        if q1[k] <= q2[k] {
            q.push(q1[k]);
            g.extend_from_slice(&g1[k * ad..(k + 1) * ad]);
        } else {
            q.push(q2[k]);
            g.extend_from_slice(&g2[k * ad..(k + 1) * ad]);
        }
    }
    Ok((q, g))
}

/// Advantage weights `exp(min(β·(min Q_target(s,a) − V(s)), 10))`.
pub fn iql_weights(cfg: &AdapterConfig, critics: &Critics, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
    let q = critics.min_q(states, actions, n, true)?;
    let v = critics.value(states, n, false)?;
    let w: Vec<f64> = q
        .iter()
        .zip(&v)
        .map(|(q, v)| (cfg.iql_beta * (q - v)).min(IQL_EXP_CLAMP).exp())
        .collect();
    ensure_finite(&w, "advantage weight")?;
    Ok(w)
}

/// Behavior-cloning loss on guiding data: squared error of the policy mode
/// for the squashed heads, negative log-likelihood for the unsquashed head.
pub struct GuideTerms {
    pub cache: ForwardCache,
    pub loss: Vec<f64>,
    pub grad: Vec<f64>,
}

pub fn guide_terms(actor: &Actor, states: &[f64], actions: &[f64], n: usize) -> Result<GuideTerms> {
    if n == 0 {
        return Err(Error::InvalidInput("guide loss on an empty batch".into()));
    }
    let ad = actor.action_dim();
    let od = actor.out_dim();
    if actions.len() != n * ad {
        return Err(Error::Dimension("guide actions do not match the actor".into()));
    }
    let cache = actor.forward(states, n)?;
    let out = cache.output();
    let b = actor.action_bound;
    let mut loss = vec![0.0; n];
    let mut grad = vec![0.0; n * od];
    for k in 0..n {
        let row = &out[k * od..(k + 1) * od];
        for j in 0..ad {
            let a = actions[k * ad + j];
            match actor.head {
                PolicyHead::Deterministic => {
                    let diff = b * row[j] - a;
                    loss[k] += diff * diff / ad as f64;
                    grad[k * od + j] = 2.0 * diff / ad as f64 * b;
                }
                PolicyHead::SquashedGaussian => {
                    let t = row[j].tanh();
                    let diff = b * t - a;
                    loss[k] += diff * diff / ad as f64;
                    grad[k * od + j] = 2.0 * diff / ad as f64 * b * (1.0 - t * t);
                }
                PolicyHead::TanhMeanGaussian => {
                    let (ls, mask) = clamp_log_std(row[ad + j]);
                    let var = (2.0 * ls).exp();
                    let t = row[j].tanh();
                    let diff = a - b * t;
                    loss[k] += 0.5 * diff * diff / var + ls + super::actor::HALF_LN_2PI;
                    grad[k * od + j] = -diff / var * b * (1.0 - t * t);
                    grad[k * od + ad + j] = mask * (1.0 - diff * diff / var);
                }
            }
        }
    }
    Ok(GuideTerms { cache, loss, grad })
}

pub fn guide_loss(actor: &Actor, states: &[f64], actions: &[f64], n: usize) -> Result<f64> {
    let t = guide_terms(actor, states, actions, n)?;
    Ok(t.loss.iter().sum::<f64>() / n as f64)
}

/// Mean over the batch of `∂L_guide/∂θ`.
pub fn guide_grad_average(actor: &Actor, states: &[f64], actions: &[f64], n: usize) -> Result<MlpGrad> {
    let t = guide_terms(actor, states, actions, n)?;
    let scaled: Vec<f64> = t.grad.iter().map(|g| g / n as f64).collect();
    let g = actor.net.backward(&t.cache, &scaled)?.0;
    if !g.is_finite() {
        return Err(Error::NonFinite("guiding gradient".into()));
    }
    Ok(g)
}
