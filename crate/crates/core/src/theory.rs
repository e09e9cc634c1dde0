//! Numerical checks of the meta-gradient identity, of the concentration
//! of the guiding gradient average, and of every hand-written gradient.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agents::{
    bellman_loss_grad, cql_loss_grad, expectile_loss_grad, guide_terms, policy_terms, Actor, AdapterConfig, Agent, Algorithm,
};
use crate::datasets::concat_rows;
use crate::error::{Error, Result};
use crate::guidance::{
    cosine_similarity, guiding_grad_average, meta_update_fd_oracle, meta_update_from_virtual, relative_l2, virtual_step,
    GuidingNet,
};
use crate::numeric::fd::{central_diff, grad_floor, max_rel_error};
use crate::numeric::{Activation, MlpGrad, MlpParams, Rng};
use crate::stats::linear_fit;

pub const THEOREM1_MIN_COSINE: f64 = 0.9999;
pub const THEOREM1_MAX_REL_ERR: f64 = 1e-3;
pub const MAX_ACTOR_UNITS: usize = 12;
pub const MAX_GUIDE_HIDDEN: usize = 8;
pub const MAX_N_D: usize = 8;
pub const MAX_N_G: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Trial {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub actor_hidden: Vec<usize>,
    pub guide_hidden: usize,
    pub n_d: usize,
    pub n_g: usize,
    pub cosine: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub trials: Vec<Theorem1Trial>,
    pub min_cosine: f64,
    pub max_rel_err: f64,
}

impl Theorem1Report {
    pub fn pass(&self) -> bool {
        self.trials.iter().all(|t| t.pass)
    }

    pub fn failing_seeds(&self) -> Vec<u64> {
        self.trials.iter().filter(|t| !t.pass).map(|t| t.seed).collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "seed,algorithm,actor_hidden,guide_hidden,n_d,n_g,cosine,rel_err,pass")?;
        for t in &self.trials {
            let hidden: Vec<String> = t.actor_hidden.iter().map(|h| h.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                t.seed,
                t.algorithm.as_str(),
                hidden.join("x"),
                t.guide_hidden,
                t.n_d,
                t.n_g,
                t.cosine,
                t.rel_err,
                t.pass
            )?;
        }
        Ok(())
    }
}

/// Trial `i` of a run seeded with `seed` uses its own stream, so any
/// failing instance can be replayed from `(seed, i)` alone.
pub fn theorem1_instance_seed(seed: u64, i: usize) -> u64 {
    Rng::derived(seed, 0x7E01 + i as u64).next_u64()
}

/// Explicit meta-update vs the finite-difference bilevel oracle on one
/// random small instance.
pub fn theorem1_trial(instance_seed: u64) -> Result<Theorem1Trial> {
    let mut rng = Rng::new(instance_seed);
    let algorithm = Algorithm::ALL[rng.below(4)];
    let sd = 1 + rng.below(4);
    let ad = 1 + rng.below(3);
    let layers = 1 + rng.below(2);
    let actor_hidden: Vec<usize> = (0..layers).map(|_| 1 + rng.below(MAX_ACTOR_UNITS)).collect();
    let guide_hidden = 1 + rng.below(MAX_GUIDE_HIDDEN);
    let n_d = 1 + rng.below(MAX_N_D);
    let n_g = 1 + rng.below(MAX_N_G);
    let agent = Agent::new(algorithm, AdapterConfig::default(), sd, ad, &actor_hidden, 1.0, &mut rng)?;
    let states: Vec<f64> = (0..n_d * sd).map(|_| rng.normal()).collect();
    let actions: Vec<f64> = (0..n_d * ad).map(|_| rng.uniform_in(-0.95, 0.95)).collect();
    let gs: Vec<f64> = (0..n_g * sd).map(|_| rng.normal()).collect();
    let ga: Vec<f64> = (0..n_g * ad).map(|_| rng.uniform_in(-0.95, 0.95)).collect();
    let noise: Vec<f64> = (0..agent.actor.noise_len(n_d)).map(|_| rng.normal()).collect();
    let mut guide = GuidingNet::new(guide_hidden, false, &mut rng)?;
    guide.net.as_mut_slice().iter_mut().for_each(|w| *w = rng.uniform_in(-1.0, 1.0));
    let alpha_d = rng.uniform_in(0.01, 0.1);
    let alpha_g = rng.uniform_in(0.1, 1.0);

    let a = &agent;
    let terms = policy_terms(algorithm, &a.cfg, &a.actor, &a.critics, &states, &actions, n_d, &noise, None)?;
    let oracle = meta_update_fd_oracle(&guide, &a.actor, &terms, &gs, &ga, n_g, alpha_d, alpha_g)?;
    let virt = virtual_step(&a.actor, &terms, &guide, alpha_d)?;
    let gg = guiding_grad_average(&virt, &gs, &ga, n_g)?;
    let update = meta_update_from_virtual(&mut guide, &virt, &gg, alpha_d, alpha_g)?;
    let cosine = cosine_similarity(update.delta.as_slice(), oracle.as_slice());
    let rel_err = relative_l2(update.delta.as_slice(), oracle.as_slice());
    Ok(Theorem1Trial {
        seed: instance_seed,
        algorithm,
        actor_hidden,
        guide_hidden,
        n_d,
        n_g,
        cosine,
        rel_err,
        pass: cosine > THEOREM1_MIN_COSINE && rel_err < THEOREM1_MAX_REL_ERR,
    })
}

pub fn verify_theorem1(trials: usize, seed: u64) -> Result<Theorem1Report> {
    if trials == 0 {
        return Err(Error::InvalidInput("theorem-1 check needs at least one trial".into()));
    }
    let trials = (0..trials)
        .map(|i| theorem1_trial(theorem1_instance_seed(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Theorem1Report {
        min_cosine: trials.iter().map(|t| t.cosine).fold(f64::INFINITY, f64::min),
        max_rel_err: trials.iter().map(|t| t.rel_err).fold(0.0, f64::max),
        trials,
    })
}

/// Per-element sampling law of synthetic gradients; every law is centered
/// on the optimum and has variance exactly `δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradDist {
    Gaussian,
    Uniform,
    /// Student-t with 3 degrees of freedom truncated to `±HEAVY_TAIL_CUT`,
    /// rescaled to variance `δ`.
    HeavyTail,
    /// Every draw equals the optimum.
    Degenerate,
}

pub const HEAVY_TAIL_CUT: f64 = 10.0;

impl GradDist {
    pub const ALL: [GradDist; 3] = [GradDist::Gaussian, GradDist::Uniform, GradDist::HeavyTail];

    pub fn as_str(self) -> &'static str {
        match self {
            GradDist::Gaussian => "gaussian",
            GradDist::Uniform => "uniform",
            GradDist::HeavyTail => "heavy_tail",
            GradDist::Degenerate => "degenerate",
        }
    }
}

/// Variance of the t(3) law truncated to `±c`, by composite Simpson.
fn truncated_t3_variance(c: f64) -> f64 {
    let dens = |x: f64| (1.0 + x * x / 3.0).powi(-2);
    let m = 20_000;
    let h = 2.0 * c / m as f64;
    let (mut mass, mut second) = (0.0, 0.0);
    for i in 0..=m {
        let x = -c + i as f64 * h;
        let w = if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        mass += w * dens(x);
        second += w * x * x * dens(x);
    }
    second / mass
}

struct Sampler {
    dist: GradDist,
    scale: f64,
}

impl Sampler {
    fn new(dist: GradDist, delta: f64) -> Self {
        let scale = match dist {
            GradDist::Gaussian => delta.sqrt(),
            GradDist::Uniform => (3.0 * delta).sqrt(),
            GradDist::HeavyTail => (delta / truncated_t3_variance(HEAVY_TAIL_CUT)).sqrt(),
            GradDist::Degenerate => 0.0,
        };
        Self { dist, scale }
    }

    fn draw(&self, rng: &mut Rng) -> f64 {
        match self.dist {
            GradDist::Gaussian => self.scale * rng.normal(),
            GradDist::Uniform => self.scale * rng.uniform_in(-1.0, 1.0),
            GradDist::HeavyTail => loop {
                let z = rng.normal();
                let chi: f64 = (0..3).map(|_| rng.normal().powi(2)).sum();
                let t = z / (chi / 3.0).sqrt();
                if t.abs() <= HEAVY_TAIL_CUT {
                    break self.scale * t;
                }
            },
            GradDist::Degenerate => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem2Config {
    pub d1: usize,
    pub d2: usize,
    pub delta: f64,
    pub dist: GradDist,
    pub ns: Vec<usize>,
    pub trials: usize,
    pub eps: Vec<f64>,
    pub seed: u64,
}

impl Theorem2Config {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.d1 == 0 || self.d2 == 0 {
            bad.push("layer shape must be positive".to_string());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            bad.push(format!("delta must be positive, got {}", self.delta));
        }
        if self.trials < 100 {
            bad.push(format!("trials must be >= 100, got {}", self.trials));
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            bad.push("n values must be nonempty and positive".into());
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(*e > 0.0)) {
            bad.push("eps values must be nonempty and positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// The acceptance grid: `ε ∈ {0.05, 0.2}·d₁d₂`, `n ∈ {10, 100, 1000}`.
    pub fn grid_cell(d1: usize, d2: usize, delta: f64, dist: GradDist, trials: usize, seed: u64) -> Self {
        let d = (d1 * d2) as f64;
        Self {
            d1,
            d2,
            delta,
            dist,
            ns: vec![10, 100, 1000],
            trials,
            eps: vec![0.05 * d, 0.2 * d],
            seed,
        }
    }
}

/// Every acceptance cell: shapes `1×1` and `4×8`, `δ ∈ {0.25, 1}`, and each
/// non-degenerate law, with per-cell seeds derived from `seed`.
pub fn theorem2_grid(trials: usize, seed: u64) -> Vec<Theorem2Config> {
    let mut cells = Vec::new();
    for (d1, d2) in [(1, 1), (4, 8)] {
        for delta in [0.25, 1.0] {
            for dist in GradDist::ALL {
                let tag = cells.len() as u64;
                cells.push(Theorem2Config::grid_cell(d1, d2, delta, dist, trials, Rng::derived(seed, tag).next_u64()));
            }
        }
    }
    cells
}

/// `d₁d₂δ / (ε² n)`.
pub fn theorem2_bound(d1: usize, d2: usize, delta: f64, eps: f64, n: usize) -> f64 {
    (d1 * d2) as f64 * delta / (eps * eps * n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub n: usize,
    pub eps: f64,
    pub empirical: f64,
    pub bound: f64,
    /// Binomial standard error of `empirical`.
    pub stderr: f64,
    pub mean_sq_gap: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub label: String,
    pub rows: Vec<BoundRow>,
    /// Log-log regression of the mean squared L1 gap on `n`.
    pub slope: f64,
    pub r2: f64,
    pub slope_range: (f64, f64),
    pub min_r2: f64,
}

impl BoundReport {
    pub fn bound_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Slope inside its range with enough fit quality; vacuous when every
    /// gap is zero.
    pub fn rate_pass(&self) -> bool {
        if self.rows.iter().all(|r| r.mean_sq_gap == 0.0) {
            return true;
        }
        self.slope >= self.slope_range.0 && self.slope <= self.slope_range.1 && self.r2 > self.min_r2
    }

    pub fn pass(&self) -> bool {
        self.bound_pass() && self.rate_pass()
    }

    pub fn write_csv_rows(&self, mut w: impl Write) -> Result<()> {
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.label, r.n, r.eps, r.empirical, r.bound, r.stderr, r.mean_sq_gap, r.pass, self.slope, self.r2, self.pass()
            )?;
        }
        Ok(())
    }
}

pub const BOUND_CSV_HEADER: &str = "cell,n,eps,empirical,bound,stderr,mean_sq_gap,pass,slope,r2,cell_pass";

fn empirical_rows(
    gaps_by_n: &[(usize, Vec<f64>)],
    eps: &[f64],
    bound: impl Fn(f64, usize) -> f64,
) -> (Vec<BoundRow>, f64, f64) {
    let mut rows = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (n, gaps) in gaps_by_n {
        let t = gaps.len() as f64;
        let mean_sq_gap = gaps.iter().map(|g| g * g).sum::<f64>() / t;
        if mean_sq_gap > 0.0 {
            xs.push((*n as f64).ln());
            ys.push(mean_sq_gap.ln());
        }
        for &e in eps {
            let hits = gaps.iter().filter(|g| **g >= e).count() as f64;
            let p = hits / t;
            let stderr = (p * (1.0 - p) / t).sqrt();
            let b = bound(e, *n);
            rows.push(BoundRow {
                n: *n,
                eps: e,
                empirical: p,
                bound: b,
                stderr,
                mean_sq_gap,
                pass: p <= b + 3.0 * stderr,
            });
        }
    }
    let (slope, _, r2) = if xs.len() >= 2 {
        linear_fit(&xs, &ys)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    (rows, slope, r2)
}

/// Monte Carlo estimate of `P(‖ḡ_n − g*‖₁ ≥ ε)` against the bound, where
/// `ḡ_n` averages `n` i.i.d. draws per element of a `d₁×d₂` layer.
pub fn verify_theorem2(cfg: &Theorem2Config) -> Result<BoundReport> {
    cfg.validate()?;
    let sampler = Sampler::new(cfg.dist, cfg.delta);
    let d = cfg.d1 * cfg.d2;
    let mut gaps_by_n = Vec::new();
    for &n in &cfg.ns {
        let mut rng = Rng::derived(cfg.seed, n as u64);
        let gaps: Vec<f64> = (0..cfg.trials)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let s: f64 = (0..n).map(|_| sampler.draw(&mut rng)).sum();
                        (s / n as f64).abs()
                    })
                    .sum()
            })
            .collect();
        gaps_by_n.push((n, gaps));
    }
    let (rows, slope, r2) = empirical_rows(&gaps_by_n, &cfg.eps, |e, n| theorem2_bound(cfg.d1, cfg.d2, cfg.delta, e, n));
    Ok(BoundReport {
        label: format!("{}x{}/delta={}/{}", cfg.d1, cfg.d2, cfg.delta, cfg.dist.as_str()),
        rows,
        slope,
        r2,
        slope_range: (-1.2, -0.8),
        min_r2: 0.99,
    })
}

/// Per-sample behavior-cloning gradients of an actor over an expert pool.
pub struct GradientPool {
    pub grads: Vec<Vec<f64>>,
    /// Full-pool mean, the proxy optimum.
    pub mean: Vec<f64>,
    /// Largest per-parameter variance across the pool.
    pub max_var: f64,
}

impl GradientPool {
    pub fn from_actor(actor: &Actor, states: &[f64], actions: &[f64]) -> Result<Self> {
        let pool = actions.len() / actor.action_dim();
        if pool == 0 {
            return Err(Error::InvalidInput("empty expert pool".into()));
        }
        let gt = guide_terms(actor, states, actions, pool)?;
        let grads: Vec<Vec<f64>> = actor
            .net
            .per_sample_backward(&gt.cache, &gt.grad)?
            .into_iter()
            .map(|g| g.into_vec())
            .collect();
        let p = actor.net.num_params();
        let mut mean = vec![0.0; p];
        for g in &grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= pool as f64);
        let mut var = vec![0.0; p];
        for g in &grads {
            for ((s, v), m) in var.iter_mut().zip(g).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let max_var = var.iter().map(|v| v / pool as f64).fold(0.0, f64::max);
        Ok(Self { grads, mean, max_var })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `‖mean of n distinct pool gradients − full mean‖₁` for each trial.
    pub fn subset_gaps(&self, n: usize, trials: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidInput(format!("cannot draw {n} of {} pool gradients", self.len())));
        }
        Ok((0..trials)
            .map(|_| {
                let mut avg = vec![0.0; self.mean.len()];
                for i in rng.choose_distinct(self.len(), n) {
                    for (a, v) in avg.iter_mut().zip(&self.grads[i]) {
                        *a += v;
                    }
                }
                avg.iter().zip(&self.mean).map(|(a, m)| (a / n as f64 - m).abs()).sum()
            })
            .collect())
    }
}

/// Concentration of the behavior-cloning gradient average of `actor` over
/// random subsets of an expert pool, measured against the full-pool mean.
///
/// The bound column uses the largest per-parameter variance across the
/// pool as `δ` and the parameter count as `d₁d₂`.
pub fn verify_theorem2_on_policy(
    actor: &Actor,
    pool_states: &[f64],
    pool_actions: &[f64],
    ns: &[usize],
    eps: &[f64],
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if ns.is_empty() || ns.contains(&0) || trials == 0 {
        return Err(Error::InvalidInput("on-policy check needs positive n values and trials".into()));
    }
    let pool_len = pool_actions.len() / actor.action_dim();
    let max_n = ns.iter().copied().max().unwrap_or(0);
    if pool_len < 2 * max_n {
        return Err(Error::InvalidInput(format!(
            "expert pool of {pool_len} is smaller than twice the largest n ({max_n})"
        )));
    }
    let pool = GradientPool::from_actor(actor, pool_states, pool_actions)?;
    let mut gaps_by_n = Vec::new();
    for &n in ns {
        let gaps = pool.subset_gaps(n, trials, &mut Rng::derived(seed, n as u64))?;
        gaps_by_n.push((n, gaps));
    }
    let p = pool.mean.len() as f64;
    let (rows, slope, r2) = empirical_rows(&gaps_by_n, eps, |e, n| p * pool.max_var / (e * e * n as f64));
    Ok(BoundReport {
        label: format!("on_policy/pool={pool_len}"),
        rows,
        slope,
        r2,
        slope_range: (-1.3, -0.7),
        min_r2: 0.0,
    })
}

pub const GRADIENT_FD_STEP: f64 = 1e-5;
pub const GRADIENT_MAX_REL_ERR: f64 = 1e-4;
/// Smallest distance of any ReLU pre-activation from its kink in a
/// gradient instance; closer draws are resampled.
pub const RELU_KINK_MARGIN: f64 = 1e-3;

/// Finite-difference oracle: gradient of a scalar function at a point.
pub type FdOracle<'a> = &'a dyn Fn(&[f64], &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub instance: usize,
    pub seed: u64,
    pub component: String,
    pub params: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub checks: Vec<GradientCheck>,
}

impl GradientReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < GRADIENT_MAX_REL_ERR)
    }

    pub fn failing_seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.checks.iter().filter(|c| c.max_rel_err >= GRADIENT_MAX_REL_ERR).map(|c| c.seed).collect();
        seeds.dedup();
        seeds
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "instance,seed,component,params,max_rel_err,pass")?;
        for c in &self.checks {
            writeln!(
                w,
                "{},{},{},{},{:e},{}",
                c.instance,
                c.seed,
                c.component,
                c.params,
                c.max_rel_err,
                c.max_rel_err < GRADIENT_MAX_REL_ERR
            )?;
        }
        Ok(())
    }
}

/// Central differences with [`GRADIENT_FD_STEP`].
pub fn default_fd_oracle(x: &[f64], f: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    central_diff(x, GRADIENT_FD_STEP, f)
}

/// Checks the analytic gradients of a generic MLP, both critics' losses,
/// the IQL value loss, the guiding net and all four policy objectives
/// (with frozen sampling noise) on `instances` random small problems.
pub fn verify_gradients(instances: usize, seed: u64) -> Result<GradientReport> {
    verify_gradients_with(instances, seed, &default_fd_oracle)
}

pub fn verify_gradients_with(instances: usize, seed: u64, fd: FdOracle) -> Result<GradientReport> {
    if instances == 0 {
        return Err(Error::InvalidInput("need at least one gradient instance".into()));
    }
    let mut checks = Vec::new();
    for i in 0..instances {
        let inst_seed = Rng::derived(seed, i as u64).next_u64();
        for (component, params, err) in gradient_instance(inst_seed, i, fd)? {
            checks.push(GradientCheck {
                instance: i,
                seed: inst_seed,
                component,
                params,
                max_rel_err: err,
            });
        }
    }
    Ok(GradientReport { checks })
}

fn compare(analytic: &MlpGrad, numeric: &[f64]) -> f64 {
    max_rel_error(analytic.as_slice(), numeric, grad_floor(analytic.as_slice()))
}

fn with_params<'a>(
    base: &'a MlpParams,
    f: impl Fn(&MlpParams) -> Result<f64> + 'a,
) -> impl FnMut(&[f64]) -> Result<f64> + 'a {
    move |p| {
        let mut net = base.clone();
        net.as_mut_slice().copy_from_slice(p);
        f(&net)
    }
}

/// Smallest `|z|` over the pre-activations of every ReLU layer of `net` on
/// `x` (infinite when no layer is ReLU).
fn relu_margin(net: &MlpParams, x: &[f64], batch: usize) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for l in 0..net.num_layers() {
        let (w, b) = net.layer(l);
        let (dout, din) = net.layer_shape(l);
        let act = if l + 1 == net.num_layers() { net.output_activation() } else { net.hidden_activation() };
        let mut next = Vec::with_capacity(batch * dout);
        for k in 0..batch {
            for o in 0..dout {
                let z = b[o] + (0..din).map(|i| w[o * din + i] * a[k * din + i]).sum::<f64>();
                if act == Activation::Relu {
                    margin = margin.min(z.abs());
                }
                next.push(act.apply(z));
            }
        }
        a = next;
    }
    margin
}

/// Draws `len` standard normals, redrawing until every ReLU pre-activation
/// of `net` clears [`RELU_KINK_MARGIN`].
fn clear_of_kinks(net: &MlpParams, len: usize, batch: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
        if relu_margin(net, &x, batch) >= RELU_KINK_MARGIN {
            return x;
        }
    }
}

/// Frozen sampling noise for the stochastic heads, redrawn until the twin
/// critics differ by at least [`RELU_KINK_MARGIN`] at every sampled action
/// (the `min(Q1, Q2)` switch is a kink too).
fn clear_of_min_switch(agent: &Agent, states: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let (sd, ad) = (agent.actor.state_dim(), agent.actor.action_dim());
    let out = agent.actor.forward(states, n)?.into_output();
    loop {
        let noise: Vec<f64> = (0..agent.actor.noise_len(n)).map(|_| rng.normal()).collect();
        if !matches!(agent.algo, Algorithm::SacBc | Algorithm::Cql) {
            return Ok(noise);
        }
        let acts = agent.actor.sample_actions(&out, n, &noise)?.0;
        let x = concat_rows(states, sd, &acts, ad, n);
        let q1 = agent.critics.q1.forward_batch(&x, n)?.into_output();
        let q2 = agent.critics.q2.forward_batch(&x, n)?.into_output();
        if q1.iter().zip(&q2).all(|(a, b)| (a - b).abs() >= RELU_KINK_MARGIN) {
            return Ok(noise);
        }
    }
}

fn tanh_like(net: &MlpParams, rng: &mut Rng) -> Result<MlpParams> {
    MlpParams::init_uniform(net.layer_dims(), Activation::Tanh, net.output_activation(), rng)
}

fn smooth_hidden(agent: &mut Agent, rng: &mut Rng) -> Result<()> {
    agent.actor.net = tanh_like(&agent.actor.net, rng)?;
    let c = &mut agent.critics;
    for net in [&mut c.q1, &mut c.q2, &mut c.q1_target, &mut c.q2_target] {
        *net = tanh_like(net, rng)?;
    }
    for net in [c.v.as_mut(), c.v_target.as_mut()].into_iter().flatten() {
        *net = tanh_like(net, rng)?;
    }
    Ok(())
}

fn gradient_instance(seed: u64, index: usize, fd: FdOracle) -> Result<Vec<(String, usize, f64)>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let dim = |rng: &mut Rng, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);

    let acts = [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Tanh];
    let hidden_act = acts[index % acts.len()];
    let dims = [dim(&mut rng, 1, 6), dim(&mut rng, 2, 16), dim(&mut rng, 2, 16), dim(&mut rng, 1, 4)];
    let net = MlpParams::init_uniform(&dims, hidden_act, acts[(index / 4) % acts.len()], &mut rng)?;
    let batch = 3;
    let x = clear_of_kinks(&net, batch * dims[0], batch, &mut rng);
    let c: Vec<f64> = (0..batch * dims[3]).map(|_| rng.normal()).collect();
    let cache = net.forward_batch(&x, batch)?;
    let analytic = net.backward(&cache, &c)?.0;
    let numeric = fd(
        net.as_slice(),
        &mut with_params(&net, |m| {
            let y = m.forward_batch(&x, batch)?.into_output();
            Ok(y.iter().zip(&c).map(|(a, b)| a * b).sum())
        }),
    )?;
    out.push((format!("mlp_{hidden_act:?}").to_lowercase(), net.num_params(), compare(&analytic, &numeric)));

    let (sd, ad, n) = (dim(&mut rng, 2, 5), dim(&mut rng, 1, 3), 4);
    let q = MlpParams::init_uniform(&[sd + ad, dim(&mut rng, 3, 8), dim(&mut rng, 3, 8), 1], Activation::Relu, Activation::Identity, &mut rng)?;
    let qx = clear_of_kinks(&q, n * (sd + ad), n, &mut rng);
    let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let (_, g) = bellman_loss_grad(&q, &qx, &y)?;
    let numeric = fd(q.as_slice(), &mut with_params(&q, |m| Ok(bellman_loss_grad(m, &qx, &y)?.0)))?;
    out.push(("q_bellman".into(), q.num_params(), compare(&g, &numeric)));

    let per_state = 3;
    let weight = rng.uniform_in(0.5, 5.0);
    let sampled = clear_of_kinks(&q, n * per_state * (sd + ad), n * per_state, &mut rng);
    let (_, _, g) = cql_loss_grad(&q, &qx, &y, &sampled, per_state, weight)?;
    let numeric = fd(
        q.as_slice(),
        &mut with_params(&q, |m| {
            let (l, pen, _) = cql_loss_grad(m, &qx, &y, &sampled, per_state, weight)?;
            Ok(l + weight * pen)
        }),
    )?;
    out.push(("q_cql".into(), q.num_params(), compare(&g, &numeric)));

    let v = MlpParams::init_uniform(&[sd, dim(&mut rng, 3, 8), 1], Activation::Relu, Activation::Identity, &mut rng)?;
    let vs = clear_of_kinks(&v, n * sd, n, &mut rng);
    let tau = rng.uniform_in(0.5, 0.95);
    let (_, g) = expectile_loss_grad(&v, &vs, &y, tau)?;
    let numeric = fd(v.as_slice(), &mut with_params(&v, |m| Ok(expectile_loss_grad(m, &vs, &y, tau)?.0)))?;
    out.push(("value_expectile".into(), v.num_params(), compare(&g, &numeric)));

    let guide = GuidingNet::new(dim(&mut rng, 2, 8), false, &mut rng)?;
    let gx: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 3.0)).collect();
    let gc: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let g = guide.weighted_grad(&gx, &gc)?;
    let numeric = fd(
        guide.net.as_slice(),
        &mut with_params(&guide.net, |m| {
            let mut probe = guide.clone();
            probe.net = m.clone();
            Ok(probe.degrees(&gx)?.iter().zip(&gc).map(|(d, c)| d * c).sum())
        }),
    )?;
    out.push(("guide".into(), guide.net.num_params(), compare(&g, &numeric)));

    let hidden = [dim(&mut rng, 3, 8), dim(&mut rng, 3, 8)];
    for algo in Algorithm::ALL {
        let mut agent = Agent::new(algo, AdapterConfig::default(), sd, ad, &hidden, 1.0, &mut rng)?;
        // Kinks reachable through the policy's own actions are hard to keep
        // clear of, so these checks run on tanh units; ReLU backprop is
        // covered above.
        smooth_hidden(&mut agent, &mut rng)?;
        let states: Vec<f64> = (0..n * sd).map(|_| rng.normal()).collect();
        let actions: Vec<f64> = (0..n * ad).map(|_| rng.uniform_in(-0.9, 0.9)).collect();
        let noise = clear_of_min_switch(&agent, &states, n, &mut rng)?;
        let degrees: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let terms = agent.policy_terms(&states, &actions, n, &noise)?;
        let g = terms.actor_grad(&agent.actor, &degrees)?;
        let numeric = fd(
            agent.actor.net.as_slice(),
            &mut with_params(&agent.actor.net, |m| {
                let mut actor = agent.actor.clone();
                actor.net = m.clone();
                policy_terms(algo, &agent.cfg, &actor, &agent.critics, &states, &actions, n, &noise, Some(terms.lambda_hat))?
                    .loss(&degrees)
            }),
        )?;
        out.push((algo.as_str().to_string(), agent.actor.net.num_params(), compare(&g, &numeric)));
    }
    Ok(out)
}
