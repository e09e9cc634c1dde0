use serde::{Deserialize, Serialize};

use super::{Agent, Algorithm};
use crate::datasets::{concat_rows, Batch};
use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{adam_step, Activation, AdamState, MlpGrad, MlpParams, Rng};

/// Twin Q networks with targets, plus a state-value network for IQL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
    pub v: Option<MlpParams>,
    pub v_target: Option<MlpParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticHyper {
    pub gamma: f64,
    pub lr: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
}

impl Default for CriticHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 3e-4,
            policy_noise: 0.2,
            noise_clip: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    pub q_loss: f64,
    pub penalty: f64,
    pub v_loss: f64,
}

fn mlp(dims: Vec<usize>, rng: &mut Rng) -> Result<MlpParams> {
    MlpParams::init_uniform(&dims, Activation::Relu, Activation::Identity, rng)
}

impl Critics {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], with_value: bool, rng: &mut Rng) -> Result<Self> {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(1);
            d
        };
        let q1 = mlp(dims(state_dim + action_dim), rng)?;
        let q2 = mlp(dims(state_dim + action_dim), rng)?;
        let v = if with_value { Some(mlp(dims(state_dim), rng)?) } else { None };
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            v_target: v.clone(),
            q1,
            q2,
            v,
        })
    }

    pub fn min_q(&self, states: &[f64], actions: &[f64], n: usize, target: bool) -> Result<Vec<f64>> {
        let (a, b) = if target { (&self.q1_target, &self.q2_target) } else { (&self.q1, &self.q2) };
        let q1 = q_values(a, states, actions, n)?;
        let q2 = q_values(b, states, actions, n)?;
        Ok(q1.iter().zip(&q2).map(|(x, y)| x.min(*y)).collect())
    }

    pub fn value(&self, states: &[f64], n: usize, target: bool) -> Result<Vec<f64>> {
        let v = if target { &self.v_target } else { &self.v };
        let v = v
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("critic has no value network".into()))?;
        Ok(v.forward_batch(states, n)?.into_output())
    }

    pub fn soft_update(&mut self, tau: f64) {
        self.q1_target.soft_update_from(&self.q1, tau);
        self.q2_target.soft_update_from(&self.q2, tau);
        if let (Some(t), Some(v)) = (self.v_target.as_mut(), self.v.as_ref()) {
            t.soft_update_from(v, tau);
        }
    }
}

pub fn q_values(q: &MlpParams, states: &[f64], actions: &[f64], n: usize) -> Result<Vec<f64>> {
    let ad = actions.len() / n.max(1);
    let sd = states.len() / n.max(1);
    let x = concat_rows(states, sd, actions, ad, n);
    Ok(q.forward_batch(&x, n)?.into_output())
}

/// Q values and `∂Q/∂a` per sample.
pub fn q_with_action_grad(
    q: &MlpParams,
    states: &[f64],
    actions: &[f64],
    n: usize,
    ad: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sd = states.len() / n;
    let x = concat_rows(states, sd, actions, ad, n);
    let cache = q.forward_batch(&x, n)?;
    let gin = q.input_grad(&cache, &vec![1.0; n])?;
    let mut ga = Vec::with_capacity(n * ad);
    for k in 0..n {
        ga.extend_from_slice(&gin[k * (sd + ad) + sd..(k + 1) * (sd + ad)]);
    }
    Ok((cache.into_output(), ga))
}

/// `mean (q(x) − y)²` and its parameter gradient.
pub fn bellman_loss_grad(q: &MlpParams, x: &[f64], y: &[f64]) -> Result<(f64, MlpGrad)> {
    let n = y.len();
    let cache = q.forward_batch(x, n)?;
    let mut loss = 0.0;
    let g: Vec<f64> = cache
        .output()
        .iter()
        .zip(y)
        .map(|(p, t)| {
            loss += (p - t) * (p - t);
            2.0 * (p - t) / n as f64
        })
        .collect();
    let (grad, _) = q.backward(&cache, &g)?;
    Ok((loss / n as f64, grad))
}

fn regress(q: &mut MlpParams, opt: &mut AdamState, x: &[f64], y: &[f64], lr: f64) -> Result<f64> {
    let (loss, grad) = bellman_loss_grad(q, x, y)?;
    adam_step(q, &grad, opt, lr)?;
    Ok(loss)
}

/// Numerically stable `log Σ exp` and the softmax weights.
pub fn log_sum_exp(values: &[f64]) -> (f64, Vec<f64>) {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    (m + s.ln(), ex.into_iter().map(|e| e / s).collect())
}

impl Agent {
    /// Critic step for the configured algorithm.
    pub fn critic_update(&mut self, batch: &Batch, hp: &CriticHyper, rng: &mut Rng) -> Result<CriticStats> {
        if batch.len == 0 {
            return Err(Error::InvalidInput("critic update on an empty batch".into()));
        }
        match self.algo {
            Algorithm::Td3Bc => self.critic_update_td3(batch, hp, rng),
            Algorithm::SacBc | Algorithm::Cql => self.critic_update_sac(batch, hp, rng),
            Algorithm::Iql => {
                let v_loss = self.iql_value_update(batch, hp.lr)?;
                let mut stats = self.iql_q_update(batch, hp)?;
                stats.v_loss = v_loss;
                Ok(stats)
            }
        }
    }

    fn bellman_targets(&self, batch: &Batch, gamma: f64, next_value: &[f64]) -> Result<Vec<f64>> {
        let y: Vec<f64> = (0..batch.len)
            .map(|k| batch.rewards[k] + gamma * (1.0 - batch.dones[k]) * next_value[k])
            .collect();
        ensure_finite(&y, "Bellman target")?;
        Ok(y)
    }

    fn fit_twin_q(&mut self, batch: &Batch, y: &[f64], lr: f64) -> Result<f64> {
        let x = batch.state_actions();
        let l1 = regress(&mut self.critics.q1, &mut self.q1_opt, &x, y, lr)?;
        let l2 = regress(&mut self.critics.q2, &mut self.q2_opt, &x, y, lr)?;
        Ok(l1 + l2)
    }

    /// TD3 target: `r + γ(1−d)·min Q'(s', clip(π'(s') + clip(σε, ±c)))`.
    pub fn critic_update_td3(&mut self, batch: &Batch, hp: &CriticHyper, rng: &mut Rng) -> Result<CriticStats> {
        let n = batch.len;
        let target = self
            .actor_target
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("TD3 update needs a target actor".into()))?;
        let out = target.forward(&batch.next_states, n)?.into_output();
        let bound = target.action_bound;
        let clip = hp.noise_clip * bound;
        let next_actions: Vec<f64> = target
            .mean_actions(&out, n)
            .into_iter()
            .map(|a| {
                let noise = (hp.policy_noise * bound * rng.normal()).clamp(-clip, clip);
                (a + noise).clamp(-bound, bound)
            })
            .collect();
        let next_q = self.critics.min_q(&batch.next_states, &next_actions, n, true)?;
        let y = self.bellman_targets(batch, hp.gamma, &next_q)?;
        Ok(CriticStats {
            q_loss: self.fit_twin_q(batch, &y, hp.lr)?,
            ..Default::default()
        })
    }

    /// Soft Bellman target with the current actor, plus the conservative
    /// penalty for CQL when its weight is positive.
    pub fn critic_update_sac(&mut self, batch: &Batch, hp: &CriticHyper, rng: &mut Rng) -> Result<CriticStats> {
        let n = batch.len;
        let out = self.actor.forward(&batch.next_states, n)?.into_output();
        let noise: Vec<f64> = (0..self.actor.noise_len(n)).map(|_| rng.normal()).collect();
        let (next_actions, next_logp) = self.actor.sample_actions(&out, n, &noise)?;
        let next_q = self.critics.min_q(&batch.next_states, &next_actions, n, true)?;
        let soft: Vec<f64> = next_q
            .iter()
            .zip(&next_logp)
            .map(|(q, lp)| q - self.cfg.alpha * lp)
            .collect();
        let y = self.bellman_targets(batch, hp.gamma, &soft)?;
        let weight = if self.algo == Algorithm::Cql { self.cfg.min_q_weight } else { 0.0 };
        if weight == 0.0 {
            return Ok(CriticStats {
                q_loss: self.fit_twin_q(batch, &y, hp.lr)?,
                ..Default::default()
            });
        }
        let sampled = self.cql_sample_actions(batch, rng)?;
        let x = batch.state_actions();
        let mut stats = CriticStats::default();
        for which in 0..2 {
            let (q, opt) = if which == 0 {
                (&mut self.critics.q1, &mut self.q1_opt)
            } else {
                (&mut self.critics.q2, &mut self.q2_opt)
            };
            let (loss, pen) = cql_step(q, opt, &x, &y, &sampled, weight, hp.lr)?;
            stats.q_loss += loss;
            stats.penalty += pen / 2.0;
        }
        Ok(stats)
    }

    /// `[s_k, a_kj]` rows: half uniform actions, half current-policy samples,
    /// `cql_actions` per state.
    fn cql_sample_actions(&self, batch: &Batch, rng: &mut Rng) -> Result<SampledActions> {
        let n = batch.len;
        let m = self.cfg.cql_actions;
        let m_uniform = m / 2;
        let m_policy = m - m_uniform;
        let ad = batch.action_dim;
        let sd = batch.state_dim;
        let b = self.actor.action_bound;
        let mut rep_states = Vec::with_capacity(n * m_policy * sd);
        for _ in 0..m_policy {
            rep_states.extend_from_slice(&batch.states);
        }
        let out = self.actor.forward(&rep_states, n * m_policy)?.into_output();
        let noise: Vec<f64> = (0..self.actor.noise_len(n * m_policy)).map(|_| rng.normal()).collect();
        let (pol, _) = self.actor.sample_actions(&out, n * m_policy, &noise)?;
        let mut x = Vec::with_capacity(n * m * (sd + ad));
        for k in 0..n {
            for j in 0..m {
                x.extend_from_slice(batch.state(k));
                if j < m_uniform {
                    x.extend((0..ad).map(|_| rng.uniform_in(-b, b)));
                } else {
                    let r = (j - m_uniform) * n + k;
                    x.extend_from_slice(&pol[r * ad..(r + 1) * ad]);
                }
            }
        }
        Ok(SampledActions { x, per_state: m })
    }

    /// Expectile regression of V on `min Q_target(s, a)`.
    pub fn iql_value_update(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let n = batch.len;
        let target = self.critics.min_q(&batch.states, &batch.actions, n, true)?;
        let tau = self.cfg.expectile;
        let v = self
            .critics
            .v
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("IQL update needs a value network".into()))?;
        let opt = self.v_opt.as_mut().expect("value optimizer");
        expectile_step(v, opt, &batch.states, &target, tau, lr)
    }

    /// `Q(s,a) ← r + γ(1−d)·V_target(s')`.
    pub fn iql_q_update(&mut self, batch: &Batch, hp: &CriticHyper) -> Result<CriticStats> {
        let next_v = self.critics.value(&batch.next_states, batch.len, true)?;
        let y = self.bellman_targets(batch, hp.gamma, &next_v)?;
        Ok(CriticStats {
            q_loss: self.fit_twin_q(batch, &y, hp.lr)?,
            ..Default::default()
        })
    }
}

pub(crate) struct SampledActions {
    pub x: Vec<f64>,
    pub per_state: usize,
}

/// CQL penalty `mean_k [logsumexp_j Q(s_k, a_kj) − Q(s_k, a_k)]` and its
/// output gradients (sampled rows, data rows), both scaled by `weight`.
pub fn cql_penalty(q_sampled: &[f64], q_data: &[f64], per_state: usize, weight: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = q_data.len();
    let mut pen = 0.0;
    let mut g_sampled = Vec::with_capacity(q_sampled.len());
    for k in 0..n {
        let (lse, soft) = log_sum_exp(&q_sampled[k * per_state..(k + 1) * per_state]);
        pen += lse - q_data[k];
        g_sampled.extend(soft.into_iter().map(|p| weight * p / n as f64));
    }
    let g_data = vec![-weight / n as f64; n];
    (pen / n as f64, g_sampled, g_data)
}

/// Bellman loss plus `weight ×` the CQL penalty, with its gradient.
/// Returns `(bellman loss, penalty, grad)`.
pub fn cql_loss_grad(
    q: &MlpParams,
    x: &[f64],
    y: &[f64],
    sampled_x: &[f64],
    per_state: usize,
    weight: f64,
) -> Result<(f64, f64, MlpGrad)> {
    let n = y.len();
    let cache = q.forward_batch(x, n)?;
    let cache_s = q.forward_batch(sampled_x, n * per_state)?;
    let (pen, g_s, g_d) = cql_penalty(cache_s.output(), cache.output(), per_state, weight);
    let mut loss = 0.0;
    let g: Vec<f64> = cache
        .output()
        .iter()
        .zip(y)
        .zip(&g_d)
        .map(|((p, t), gd)| {
            loss += (p - t) * (p - t);
            2.0 * (p - t) / n as f64 + gd
        })
        .collect();
    let (mut grad, _) = q.backward(&cache, &g)?;
    let (grad_s, _) = q.backward(&cache_s, &g_s)?;
    grad.add_scaled(&grad_s, 1.0);
    Ok((loss / n as f64, pen, grad))
}

fn cql_step(
    q: &mut MlpParams,
    opt: &mut AdamState,
    x: &[f64],
    y: &[f64],
    sampled: &SampledActions,
    weight: f64,
    lr: f64,
) -> Result<(f64, f64)> {
    let (loss, pen, grad) = cql_loss_grad(q, x, y, &sampled.x, sampled.per_state, weight)?;
    adam_step(q, &grad, opt, lr)?;
    Ok((loss, pen))
}

/// Asymmetric squared loss `mean |τ − 1{u<0}|·u²`, `u = target − v(s)`,
/// and its parameter gradient.
pub fn expectile_loss_grad(v: &MlpParams, states: &[f64], target: &[f64], tau: f64) -> Result<(f64, MlpGrad)> {
    let n = target.len();
    let cache = v.forward_batch(states, n)?;
    let mut loss = 0.0;
    let g: Vec<f64> = cache
        .output()
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let u = t - p;
            let w = if u < 0.0 { 1.0 - tau } else { tau };
            loss += w * u * u;
            -2.0 * w * u / n as f64
        })
        .collect();
    let (grad, _) = v.backward(&cache, &g)?;
    Ok((loss / n as f64, grad))
}

pub fn expectile_step(
    v: &mut MlpParams,
    opt: &mut AdamState,
    states: &[f64],
    target: &[f64],
    tau: f64,
    lr: f64,
) -> Result<f64> {
    let (loss, grad) = expectile_loss_grad(v, states, target, tau)?;
    adam_step(v, &grad, opt, lr)?;
    Ok(loss)
}
