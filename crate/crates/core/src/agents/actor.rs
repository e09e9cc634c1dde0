use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Activation, ForwardCache, MlpParams, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps `ln(1 − tanh²)` finite at saturation.
pub const SQUASH_EPS: f64 = 1e-6;
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// How raw network outputs become an action distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyHead {
    /// `a = bound · tanh(net(s))`.
    Deterministic,
    /// Outputs `[μ, log σ]`; `a = bound · tanh(μ + σ ε)`.
    SquashedGaussian,
    /// Outputs `[μ, log σ]`; `a ~ N(bound · tanh(μ), σ²)` without squashing.
    TanhMeanGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub net: MlpParams,
    pub head: PolicyHead,
    pub action_bound: f64,
}

/// `1 − tanh²(z)` without the cancellation of `1 − u·u` near saturation.
#[inline]
pub fn tanh_slope(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

/// Clamped log-std and the derivative of the clamp.
#[inline]
pub fn clamp_log_std(raw: f64) -> (f64, f64) {
    if raw < LOG_STD_MIN {
        (LOG_STD_MIN, 0.0)
    } else if raw > LOG_STD_MAX {
        (LOG_STD_MAX, 0.0)
    } else {
        (raw, 1.0)
    }
}

impl Actor {
    pub fn new(
        head: PolicyHead,
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        action_bound: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (out, out_act) = match head {
            PolicyHead::Deterministic => (action_dim, Activation::Tanh),
            _ => (2 * action_dim, Activation::Identity),
        };
        let mut dims = vec![state_dim];
        dims.extend_from_slice(hidden);
        dims.push(out);
        let net = MlpParams::init_uniform(&dims, Activation::Relu, out_act, rng)?;
        Ok(Self {
            net,
            head,
            action_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        match self.head {
            PolicyHead::Deterministic => self.net.output_dim(),
            _ => self.net.output_dim() / 2,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Number of standard-normal draws a batch of `n` consumes.
    pub fn noise_len(&self, n: usize) -> usize {
        match self.head {
            PolicyHead::Deterministic => 0,
            _ => n * self.action_dim(),
        }
    }

    pub fn forward(&self, states: &[f64], n: usize) -> Result<ForwardCache> {
        self.net.forward_batch(states, n)
    }

    /// Mode of the policy for each row of raw outputs (used for evaluation
    /// and for the behavior-cloning guide loss of the squashed heads).
    pub fn mean_actions(&self, out: &[f64], n: usize) -> Vec<f64> {
        let ad = self.action_dim();
        let od = self.out_dim();
        let b = self.action_bound;
        let mut acts = Vec::with_capacity(n * ad);
        for i in 0..n {
            let row = &out[i * od..(i + 1) * od];
            match self.head {
                PolicyHead::Deterministic => acts.extend(row.iter().map(|y| b * y)),
                _ => acts.extend(row[..ad].iter().map(|m| b * m.tanh())),
            }
        }
        acts
    }

    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.predict(state)?;
        Ok(self.mean_actions(&out, 1))
    }

    /// Reparameterized actions `ã` from raw outputs and frozen noise, with
    /// `log π(ã|s)` per row.
    pub fn sample_actions(&self, out: &[f64], n: usize, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let ad = self.action_dim();
        let od = self.out_dim();
        if noise.len() != self.noise_len(n) {
            return Err(Error::Dimension(format!(
                "noise length {} != {}",
                noise.len(),
                self.noise_len(n)
            )));
        }
        let b = self.action_bound;
        let mut acts = Vec::with_capacity(n * ad);
        let mut logp = Vec::with_capacity(n);
        for i in 0..n {
            let row = &out[i * od..(i + 1) * od];
            match self.head {
                PolicyHead::Deterministic => {
                    acts.extend(row.iter().map(|y| b * y));
                    logp.push(0.0);
                }
                PolicyHead::SquashedGaussian => {
                    let mut lp = 0.0;
                    for j in 0..ad {
                        let (ls, _) = clamp_log_std(row[ad + j]);
                        let e = noise[i * ad + j];
                        let z = row[j] + ls.exp() * e;
                        acts.push(b * z.tanh());
                        lp += -0.5 * e * e - ls - HALF_LN_2PI - (tanh_slope(z) + SQUASH_EPS).ln();
                    }
                    logp.push(lp);
                }
                PolicyHead::TanhMeanGaussian => {
                    let mut lp = 0.0;
                    for j in 0..ad {
                        let (ls, _) = clamp_log_std(row[ad + j]);
                        let e = noise[i * ad + j];
                        acts.push(b * row[j].tanh() + ls.exp() * e);
                        lp += -0.5 * e * e - ls - HALF_LN_2PI;
                    }
                    logp.push(lp);
                }
            }
        }
        Ok((acts, logp))
    }

    /// `log N(a; bound·tanh(μ), σ²)` per row, for the unsquashed head.
    pub fn gaussian_log_prob(&self, out: &[f64], n: usize, actions: &[f64]) -> Vec<f64> {
        let ad = self.action_dim();
        let od = self.out_dim();
        (0..n)
            .map(|i| {
                let row = &out[i * od..(i + 1) * od];
                (0..ad)
                    .map(|j| {
                        let (ls, _) = clamp_log_std(row[ad + j]);
                        let z = (actions[i * ad + j] - self.action_bound * row[j].tanh()) / ls.exp();
                        -0.5 * z * z - ls - HALF_LN_2PI
                    })
                    .sum()
            })
            .collect()
    }
}
