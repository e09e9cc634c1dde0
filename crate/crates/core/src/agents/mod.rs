//! Actor and critic networks, critic updates, and the four policy
//! objectives (TD3+BC, SAC+BC, IQL, CQL) with a per-sample constraint
//! degree hook.

mod actor;
mod critic;
mod policy;

pub use actor::{clamp_log_std, Actor, PolicyHead, HALF_LN_2PI, LOG_STD_MAX, LOG_STD_MIN, SQUASH_EPS};
pub use critic::{
    bellman_loss_grad, cql_loss_grad, cql_penalty, expectile_loss_grad, expectile_step, log_sum_exp, q_values, q_with_action_grad, CriticHyper, CriticStats, Critics,
};
pub use policy::{
    check_degrees, guide_grad_average, guide_loss, guide_terms, iql_weights, policy_terms, GuideTerms, PolicyTerms,
    IQL_EXP_CLAMP,
};

use serde::{Deserialize, Serialize};

use crate::datasets::Batch;
use crate::error::{Error, Result};
use crate::numeric::{adam_step, AdamState, MlpGrad, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Td3Bc,
    SacBc,
    Iql,
    Cql,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Td3Bc, Algorithm::SacBc, Algorithm::Iql, Algorithm::Cql];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Td3Bc => "td3_bc",
            Algorithm::SacBc => "sac_bc",
            Algorithm::Iql => "iql",
            Algorithm::Cql => "cql",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn head(self) -> PolicyHead {
        match self {
            Algorithm::Td3Bc => PolicyHead::Deterministic,
            Algorithm::SacBc | Algorithm::Cql => PolicyHead::SquashedGaussian,
            Algorithm::Iql => PolicyHead::TanhMeanGaussian,
        }
    }

    /// TD3-style delayed actor and target updates.
    pub fn delayed_policy(self) -> bool {
        self == Algorithm::Td3Bc
    }
}

/// Per-algorithm constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Q-term weight before batch normalization by `mean |Q|` (TD3+BC, SAC+BC).
    pub lambda: f64,
    /// Entropy coefficient (SAC+BC, CQL).
    pub alpha: f64,
    /// Inverse temperature inside the IQL advantage exponent.
    pub iql_beta: f64,
    pub expectile: f64,
    pub min_q_weight: f64,
    /// Actions per state in the CQL logsumexp (half uniform, half policy).
    pub cql_actions: usize,
    /// Input dropout rate on the IQL actor.
    pub actor_dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            lambda: 2.5,
            alpha: 0.2,
            iql_beta: 3.0,
            expectile: 0.7,
            min_q_weight: 5.0,
            cql_actions: 10,
            actor_dropout: 0.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            bad.push(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.iql_beta >= 0.0 && self.iql_beta.is_finite()) {
            bad.push(format!("iql_beta must be >= 0, got {}", self.iql_beta));
        }
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            bad.push(format!("expectile must lie in (0, 1), got {}", self.expectile));
        }
        if !(self.min_q_weight >= 0.0 && self.min_q_weight.is_finite()) {
            bad.push(format!("min_q_weight must be >= 0, got {}", self.min_q_weight));
        }
        if self.cql_actions < 2 {
            bad.push(format!("cql_actions must be >= 2, got {}", self.cql_actions));
        }
        if !(0.0..1.0).contains(&self.actor_dropout) {
            bad.push(format!("actor_dropout must lie in [0, 1), got {}", self.actor_dropout));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Networks and optimizer state of one offline RL agent.
#[derive(Clone, Debug)]
pub struct Agent {
    pub algo: Algorithm,
    pub cfg: AdapterConfig,
    pub actor: Actor,
    /// Present for TD3+BC only.
    pub actor_target: Option<Actor>,
    pub critics: Critics,
    pub actor_opt: AdamState,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub v_opt: Option<AdamState>,
}

impl Agent {
    pub fn new(
        algo: Algorithm,
        cfg: AdapterConfig,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        action_bound: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let actor = Actor::new(algo.head(), state_dim, action_dim, hidden, action_bound, rng)?;
        let critics = Critics::new(state_dim, action_dim, hidden, algo == Algorithm::Iql, rng)?;
        Ok(Self {
            algo,
            cfg,
            actor_target: algo.delayed_policy().then(|| actor.clone()),
            actor_opt: AdamState::for_params(&actor.net),
            q1_opt: AdamState::for_params(&critics.q1),
            q2_opt: AdamState::for_params(&critics.q2),
            v_opt: critics.v.as_ref().map(AdamState::for_params),
            actor,
            critics,
        })
    }

    /// Policy objective on a batch with frozen noise.
    pub fn policy_terms(&self, states: &[f64], actions: &[f64], n: usize, noise: &[f64]) -> Result<PolicyTerms> {
        policy_terms(self.algo, &self.cfg, &self.actor, &self.critics, states, actions, n, noise, None)
    }

    pub fn apply_actor_grad(&mut self, grad: &MlpGrad, lr: f64) -> Result<()> {
        adam_step(&mut self.actor.net, grad, &mut self.actor_opt, lr)
    }

    /// Polyak-average every target network toward its live counterpart.
    pub fn soft_update_targets(&mut self, tau: f64) {
        self.critics.soft_update(tau);
        if let Some(t) = self.actor_target.as_mut() {
            t.net.soft_update_from(&self.actor.net, tau);
        }
    }

    /// Inverted dropout on actor inputs; identity when the rate is zero.
    pub fn dropout_states(&self, batch: &Batch, rng: &mut Rng) -> Vec<f64> {
        let p = self.cfg.actor_dropout;
        if p == 0.0 {
            return batch.states.clone();
        }
        batch
            .states
            .iter()
            .map(|s| if rng.uniform() < p { 0.0 } else { s / (1.0 - p) })
            .collect()
    }
}

#[cfg(test)]
mod tests;
