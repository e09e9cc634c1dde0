//! Linear-quadratic point-mass environments and their LQR expert.
//!
//! The default system is a 2-D point mass with damped velocity:
//! state `[x, y, vx, vy]`, action = acceleration command clipped to `[−1, 1]`.
//! Rewards are negative quadratic costs, so every reward is `≤ 0`.

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetMeta, EpisodeSpan, OfflineDataset, SourceSpan};
use crate::error::{ensure_finite, Error, Result};
use crate::numeric::{Matrix, Rng};

pub const DEFAULT_ENV_ID: &str = "point-mass-2d";
pub const DEFAULT_MEDIUM_NOISE: f64 = 0.3;
pub const DEFAULT_MEDIUM_BLEND: f64 = 0.05;

const DARE_TOLERANCE: f64 = 1e-10;
const DARE_MAX_ITERATIONS: usize = 100_000;
/// Episodes simulated per policy when checking that a behavior policy beats
/// the random one.
const ORDERING_CHECK_EPISODES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    pub a: Matrix,
    pub b: Matrix,
    pub qc: Matrix,
    pub rc: Matrix,
    pub action_bound: f64,
    pub horizon: usize,
    /// Initial states are drawn uniformly from the box `[init_low, init_high]`.
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        let dt = 0.1;
        Self {
            id: DEFAULT_ENV_ID.to_string(),
            a: Matrix::from_rows(&[
                &[1.0, 0.0, dt, 0.0],
                &[0.0, 1.0, 0.0, dt],
                &[0.0, 0.0, 0.95, 0.0],
                &[0.0, 0.0, 0.0, 0.95],
            ]),
            b: Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 0.0], &[dt, 0.0], &[0.0, dt]]),
            qc: Matrix::diag(&[1.0, 1.0, 0.1, 0.1]),
            rc: Matrix::diag(&[0.1, 0.1]),
            action_bound: 1.0,
            horizon: 100,
            init_low: vec![-1.0, -1.0, 0.0, 0.0],
            init_high: vec![1.0, 1.0, 0.0, 0.0],
        }
    }
}

impl EnvSpec {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.action_dim();
        if self.a.cols() != n || self.b.rows() != n {
            return Err(Error::Config("dynamics matrices have inconsistent shapes".into()));
        }
        if (self.qc.rows(), self.qc.cols()) != (n, n) || (self.rc.rows(), self.rc.cols()) != (m, m) {
            return Err(Error::Config("cost matrices have inconsistent shapes".into()));
        }
        if !self.qc.is_symmetric(1e-12) || !self.rc.is_symmetric(1e-12) {
            return Err(Error::Config("cost matrices must be symmetric".into()));
        }
        if cholesky(&self.qc.add(&Matrix::identity(n).scale(1e-12))).is_none() {
            return Err(Error::Config("state cost must be positive semidefinite".into()));
        }
        if cholesky(&self.rc).is_none() {
            return Err(Error::Config("action cost must be positive definite".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.action_bound > 0.0) {
            return Err(Error::Config("action bound must be positive".into()));
        }
        if self.init_low.len() != n || self.init_high.len() != n {
            return Err(Error::Config("initial-state box has wrong dimension".into()));
        }
        Ok(())
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|v| v.clamp(-self.action_bound, self.action_bound))
            .collect()
    }

    pub fn sample_initial_state(&self, rng: &mut Rng) -> Vec<f64> {
        self.init_low
            .iter()
            .zip(&self.init_high)
            .map(|(&lo, &hi)| if lo == hi { lo } else { rng.uniform_in(lo, hi) })
            .collect()
    }

    /// Stable digest of the spec, used to key cached score references.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        crate::digest::fnv1a_hex(json.as_bytes())
    }
}

fn cholesky(m: &Matrix) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// One deterministic transition. The action is clipped into bounds before
/// it touches the dynamics or the cost.
pub fn env_step(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
    if s.len() != spec.state_dim() || a.len() != spec.action_dim() {
        return Err(Error::Dimension(format!(
            "env_step got state {} / action {}, expected {} / {}",
            s.len(),
            a.len(),
            spec.state_dim(),
            spec.action_dim()
        )));
    }
    ensure_finite(s, "state")?;
    ensure_finite(a, "action")?;
    let a = spec.clip_action(a);
    let ax = spec.a.mul_vec(s);
    let bu = spec.b.mul_vec(&a);
    let next: Vec<f64> = ax.iter().zip(&bu).map(|(x, u)| x + u).collect();
    let reward = -(spec.qc.quad_form(s) + spec.rc.quad_form(&a));
    ensure_finite(&next, "next state")?;
    Ok((next, reward))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqrSolution {
    /// Feedback gain; the optimal action is `−K s`.
    pub gain: Matrix,
    pub cost_to_go: Matrix,
    pub iterations: usize,
    /// Spectral radius of `A − B K`.
    pub closed_loop_radius: f64,
}

/// Discounted LQR by fixed-point iteration of the Riccati recursion
/// `P ← Q + γAᵀPA − γ²AᵀPB (R + γBᵀPB)⁻¹ BᵀPA`, started from `P = Q`.
pub fn solve_lqr(spec: &EnvSpec, gamma: f64) -> Result<LqrSolution> {
    solve_dare(&spec.a, &spec.b, &spec.qc, &spec.rc, gamma)
}

pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, gamma: f64) -> Result<LqrSolution> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("discount {gamma} outside (0, 1]")));
    }
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for it in 1..=DARE_MAX_ITERATIONS {
        let (gain, next) = riccati_step(a, &at, b, &bt, q, r, &p, gamma)?;
        let diff = next.max_abs_diff(&p);
        if !diff.is_finite() {
            return Err(Error::NoConvergence("Riccati iteration diverged".into()));
        }
        p = next;
        if diff < DARE_TOLERANCE {
            let closed = a.sub(&b.matmul(&gain));
            let closed_loop_radius = closed.spectral_radius(2000);
            return Ok(LqrSolution {
                gain,
                cost_to_go: p,
                iterations: it,
                closed_loop_radius,
            });
        }
    }
    Err(Error::NoConvergence(format!(
        "Riccati iteration did not reach {DARE_TOLERANCE:e} within {DARE_MAX_ITERATIONS} iterations"
    )))
}

#[allow(clippy::too_many_arguments)]
fn riccati_step(
    a: &Matrix,
    at: &Matrix,
    b: &Matrix,
    bt: &Matrix,
    q: &Matrix,
    r: &Matrix,
    p: &Matrix,
    gamma: f64,
) -> Result<(Matrix, Matrix)> {
    let pa = p.matmul(a);
    let pb = p.matmul(b);
    let s = r.add(&bt.matmul(&pb).scale(gamma));
    let s_inv = s
        .inverse()
        .ok_or_else(|| Error::NoConvergence("R + γBᵀPB became singular".into()))?;
    let gain = s_inv.matmul(&bt.matmul(&pa)).scale(gamma);
    let next = q
        .add(&at.matmul(&pa).scale(gamma))
        .sub(&at.matmul(&pb).matmul(&gain).scale(gamma));
    // keep P exactly symmetric
    let next = next.add(&next.transpose()).scale(0.5);
    Ok((gain, next))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Random,
    Medium,
    Expert,
}

impl BehaviorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorKind::Random => "random",
            BehaviorKind::Medium => "medium",
            BehaviorKind::Expert => "expert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(BehaviorKind::Random),
            "medium" => Some(BehaviorKind::Medium),
            "expert" => Some(BehaviorKind::Expert),
            _ => None,
        }
    }

    pub const ALL: [BehaviorKind; 3] = [BehaviorKind::Random, BehaviorKind::Medium, BehaviorKind::Expert];
}

/// Data-collection policy.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub gain: Option<Matrix>,
    pub noise_std: f64,
    /// Fraction of the expert gain kept by the medium policy.
    pub blend: f64,
}

impl BehaviorPolicy {
    /// Uniform actions over the action box.
    pub fn random() -> Self {
        Self {
            kind: BehaviorKind::Random,
            gain: None,
            noise_std: 0.0,
            blend: 0.0,
        }
    }

    /// Sluggish expert: the gain is blended toward zero (`blend` = 1 keeps
    /// the expert gain) and Gaussian action noise is added.
    pub fn medium(gain: Matrix, noise_std: f64, blend: f64) -> Self {
        Self {
            kind: BehaviorKind::Medium,
            gain: Some(gain.scale(blend)),
            noise_std,
            blend,
        }
    }

    pub fn expert(gain: Matrix) -> Self {
        Self {
            kind: BehaviorKind::Expert,
            gain: Some(gain),
            noise_std: 0.0,
            blend: 1.0,
        }
    }

    /// Builds the policy of the requested kind from the spec's LQR solution
    /// at discount `gamma`.
    pub fn for_kind(spec: &EnvSpec, kind: BehaviorKind, gamma: f64) -> Result<Self> {
        if kind == BehaviorKind::Random {
            return Ok(Self::random());
        }
        let lqr = solve_lqr(spec, gamma)?;
        if lqr.closed_loop_radius >= 1.0 {
            return Err(Error::Config(format!(
                "expert closed loop is not stable (spectral radius {})",
                lqr.closed_loop_radius
            )));
        }
        Ok(match kind {
            BehaviorKind::Medium => Self::medium(lqr.gain, DEFAULT_MEDIUM_NOISE, DEFAULT_MEDIUM_BLEND),
            _ => Self::expert(lqr.gain),
        })
    }

    /// Unclipped action; the environment clips.
    pub fn act(&self, spec: &EnvSpec, s: &[f64], rng: &mut Rng) -> Vec<f64> {
        match (&self.gain, self.kind) {
            (None, _) | (_, BehaviorKind::Random) => (0..spec.action_dim())
                .map(|_| rng.uniform_in(-spec.action_bound, spec.action_bound))
                .collect(),
            (Some(k), kind) => {
                let mut u: Vec<f64> = k.mul_vec(s).into_iter().map(|v| -v).collect();
                if kind == BehaviorKind::Medium && self.noise_std > 0.0 {
                    u.iter_mut().for_each(|v| *v += self.noise_std * rng.normal());
                }
                u
            }
        }
    }
}

/// Rolls out `episodes` full-horizon episodes of `policy`. `done` marks the
/// last step of each episode.
pub fn generate_dataset(
    spec: &EnvSpec,
    policy: &BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    spec.validate()?;
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be at least 1".into()));
    }
    if policy.kind != BehaviorKind::Random {
        check_return_ordering(spec, policy, seed)?;
    }
    let mut rng = Rng::new(seed);
    let (sd, ad) = (spec.state_dim(), spec.action_dim());
    let n = episodes * spec.horizon;
    let mut ds = OfflineDataset::with_capacity(sd, ad, n);
    let mut episode_spans = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let start = ds.len();
        let mut s = spec.sample_initial_state(&mut rng);
        for t in 0..spec.horizon {
            let a = spec.clip_action(&policy.act(spec, &s, &mut rng));
            let (next, r) = env_step(spec, &s, &a)?;
            let done = t + 1 == spec.horizon;
            ds.push(&s, &a, &next, r, done);
            s = next;
        }
        episode_spans.push(EpisodeSpan {
            start,
            len: spec.horizon,
        });
    }
    ds.meta = DatasetMeta {
        env_id: spec.id.clone(),
        sources: vec![SourceSpan {
            kind: policy.kind,
            seed,
            start: 0,
            len: n,
        }],
        episodes: episode_spans,
    };
    Ok(ds)
}

/// Fails when `policy` does not beat uniform-random actions on average.
fn check_return_ordering(spec: &EnvSpec, policy: &BehaviorPolicy, seed: u64) -> Result<()> {
    let mut rng = Rng::derived(seed, 0x0DE4);
    let random = BehaviorPolicy::random();
    let mean_of = |p: &BehaviorPolicy, rng: &mut Rng| -> Result<f64> {
        let mut act_rng = rng.split();
        evaluate_policy(spec, |s| p.act(spec, s, &mut act_rng), ORDERING_CHECK_EPISODES, rng)
    };
    let base = mean_of(&random, &mut rng.clone())?;
    let ours = mean_of(policy, &mut rng)?;
    if ours <= base {
        return Err(Error::Config(format!(
            "{} policy mean return {ours:.3} does not exceed random {base:.3}; environment is mis-specified",
            policy.kind.as_str()
        )));
    }
    Ok(())
}

/// Undiscounted return of every episode.
pub fn episode_returns(
    spec: &EnvSpec,
    mut policy: impl FnMut(&[f64]) -> Vec<f64>,
    episodes: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(Error::InvalidInput("episodes must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = spec.sample_initial_state(rng);
        let mut ret = 0.0;
        for _ in 0..spec.horizon {
            let a = policy(&s);
            let (next, r) = env_step(spec, &s, &a)?;
            ret += r;
            s = next;
        }
        out.push(ret);
    }
    Ok(out)
}

/// Mean undiscounted return over `episodes` episodes.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: impl FnMut(&[f64]) -> Vec<f64>,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let r = episode_returns(spec, policy, episodes, rng)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_a_fixed_point_with_zero_reward() {
        let spec = EnvSpec::default();
        let (next, r) = env_step(&spec, &[0.0; 4], &[0.0; 2]).unwrap();
        assert_eq!(next, vec![0.0; 4]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn frozen_dynamics_ignore_actions() {
        let mut spec = EnvSpec::default();
        spec.a = Matrix::identity(4);
        spec.b = Matrix::zeros(4, 2);
        let s = [0.3, -0.2, 0.1, 0.5];
        let (next, _) = env_step(&spec, &s, &[0.9, -0.4]).unwrap();
        assert_eq!(next, s.to_vec());
    }

    #[test]
    fn step_matches_hand_arithmetic() {
        let spec = EnvSpec::default();
        let s = [0.5, -0.3, 0.2, 0.1];
        let a = [0.4, 2.0]; // second entry clips to 1
        let (next, r) = env_step(&spec, &s, &a).unwrap();
        let expected = [
            0.5 + 0.1 * 0.2,
            -0.3 + 0.1 * 0.1,
            0.95 * 0.2 + 0.1 * 0.4,
            0.95 * 0.1 + 0.1 * 1.0,
        ];
        for (x, e) in next.iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
        let cost = 0.25 + 0.09 + 0.1 * 0.04 + 0.1 * 0.01 + 0.1 * 0.16 + 0.1 * 1.0;
        assert!((r + cost).abs() < 1e-15);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let spec = EnvSpec::default();
        assert!(matches!(
            env_step(&spec, &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn uncontrollable_system_gets_zero_gain() {
        let mut spec = EnvSpec::default();
        spec.b = Matrix::zeros(4, 2);
        let sol = solve_lqr(&spec, 0.99).unwrap();
        assert_eq!(sol.gain.max_abs(), 0.0);
    }

    #[test]
    fn scalar_gain_matches_grid_search() {
        let (a, b, q, r) = (0.9, 1.0, 1.0, 1.0);
        let sol = solve_dare(
            &Matrix::diag(&[a]),
            &Matrix::diag(&[b]),
            &Matrix::diag(&[q]),
            &Matrix::diag(&[r]),
            1.0,
        )
        .unwrap();
        // infinite-horizon cost from x0 = 1 under u = −k x
        let cost = |k: f64| {
            let c = a - b * k;
            if c.abs() >= 1.0 {
                f64::INFINITY
            } else {
                (q + r * k * k) / (1.0 - c * c)
            }
        };
        let best = (0..=200_000)
            .map(|i| i as f64 * 1e-5)
            .min_by(|x, y| cost(*x).total_cmp(&cost(*y)))
            .unwrap();
        assert!((sol.gain.get(0, 0) - best).abs() < 2e-5, "{} vs {best}", sol.gain.get(0, 0));
        assert!((sol.cost_to_go.get(0, 0) - cost(best)).abs() < 1e-8);
    }

    #[test]
    fn default_expert_is_stabilizing() {
        let sol = solve_lqr(&EnvSpec::default(), 0.99).unwrap();
        assert!(sol.closed_loop_radius < 1.0);
        let closed = EnvSpec::default().a.sub(&EnvSpec::default().b.matmul(&sol.gain));
        // independent check: ‖(A−BK)^200‖ is tiny
        let mut m = Matrix::identity(4);
        for _ in 0..200 {
            m = m.matmul(&closed);
        }
        assert!(m.max_abs() < 1e-3);
    }

    #[test]
    fn random_dataset_structure() {
        let mut spec = EnvSpec::default();
        spec.horizon = 3;
        let ds = generate_dataset(&spec, &BehaviorPolicy::random(), 1, 9).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(ds.actions().iter().all(|a| a.abs() <= 1.0));
        assert_eq!(ds.dones(), &[0.0, 0.0, 1.0]);
        assert!(ds.rewards().iter().all(|&r| r <= 0.0));
    }

    #[test]
    fn zero_episodes_rejected() {
        assert!(generate_dataset(&EnvSpec::default(), &BehaviorPolicy::random(), 0, 1).is_err());
    }

    #[test]
    fn zero_policy_from_origin_returns_zero() {
        let mut spec = EnvSpec::default();
        spec.init_low = vec![0.0; 4];
        spec.init_high = vec![0.0; 4];
        let ret = evaluate_policy(&spec, |_| vec![0.0, 0.0], 5, &mut Rng::new(0)).unwrap();
        assert_eq!(ret, 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let spec = EnvSpec::default();
        let pol = BehaviorPolicy::for_kind(&spec, BehaviorKind::Medium, 0.99).unwrap();
        let run = || {
            let mut rng = Rng::new(4);
            let mut act = rng.split();
            evaluate_policy(&spec, |s| pol.act(&spec, s, &mut act), 10, &mut rng).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
