//! Training loop: critic step, optional guiding-net meta-update, real
//! policy step, with periodic evaluation and per-bucket intensity probes.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agents::{AdapterConfig, Agent, Algorithm, CriticHyper};
use crate::datasets::{mix, sample_batch, NormStats, OfflineDataset};
use crate::envs::{evaluate_policy, BehaviorKind, EnvSpec};
use crate::error::{Error, Result};
use crate::guidance::{guiding_grad_average, meta_update_from_virtual, virtual_step, GuidingNet};
use crate::numeric::Rng;
use crate::stats::ScoreRefs;

const TAG_INIT: u64 = 1;
const TAG_BATCH: u64 = 2;
const TAG_CRITIC: u64 = 3;
const TAG_POLICY_NOISE: u64 = 4;
const TAG_GUIDE_BATCH: u64 = 5;
const TAG_DROPOUT: u64 = 6;
const TAG_GUIDE_INIT: u64 = 7;
const TAG_PROBE: u64 = 8;
const TAG_EVAL: u64 = 0x1_0000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-sample degrees from the meta-trained guiding net.
    Gorl,
    /// Constraint degree 1 on every sample.
    Baseline,
    /// Constraint degree `c` on every sample.
    FixedWeight(f64),
    /// Baseline on the offline data concatenated with the guiding set.
    MixedBaseline,
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Gorl => "gorl".into(),
            Mode::Baseline => "baseline".into(),
            Mode::FixedWeight(c) => format!("fixed_{c}"),
            Mode::MixedBaseline => "mixed_baseline".into(),
        }
    }

    fn constant_degree(&self) -> f64 {
        match self {
            Mode::FixedWeight(c) => *c,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub adapter: AdapterConfig,
    pub seed: u64,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
    /// `α_D`; also the virtual-step size.
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    /// Actor and target updates every this many steps (TD3+BC only).
    pub policy_freq: usize,
    /// `n_D`.
    pub batch_size: usize,
    /// `α_G`.
    pub guide_lr: f64,
    /// `n_G`.
    pub guide_batch: usize,
    /// Expert tuples extracted for the guiding set.
    pub guide_set_size: usize,
    /// Meta-update on policy steps at iterations that are multiples of this.
    pub guide_freq: usize,
    pub guide_hidden: usize,
    pub guide_log_input: bool,
    pub normalize_states: bool,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Evaluations averaged into the final score.
    pub final_evals: usize,
    pub loss_interval: usize,
    /// Probe transitions per quality bucket for intensity logging.
    pub intensity_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Td3Bc,
            mode: Mode::Gorl,
            adapter: AdapterConfig::default(),
            seed: 0,
            total_steps: 1_000_000,
            hidden: vec![256, 256],
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 5e-3,
            policy_noise: 0.2,
            noise_clip: 0.5,
            policy_freq: 2,
            batch_size: 256,
            guide_lr: 1e-5,
            guide_batch: 20,
            guide_set_size: 200,
            guide_freq: 500,
            guide_hidden: 100,
            guide_log_input: false,
            normalize_states: true,
            eval_interval: 5000,
            eval_episodes: 10,
            final_evals: 10,
            loss_interval: 1000,
            intensity_probes: 256,
        }
    }
}

impl TrainConfig {
    /// Every violated invariant, joined into one error.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Err(Error::Config(m)) = self.adapter.validate() {
            bad.push(m);
        }
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.guide_lr >= 0.0 && self.guide_lr.is_finite()) {
            bad.push(format!("guide_lr must be >= 0, got {}", self.guide_lr));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            bad.push(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if self.tau > 1.0 {
            bad.push(format!("tau must be <= 1, got {}", self.tau));
        }
        if !(self.policy_noise >= 0.0 && self.noise_clip >= 0.0) {
            bad.push("policy_noise and noise_clip must be >= 0".into());
        }
        let counts = [
            ("total_steps", self.total_steps),
            ("policy_freq", self.policy_freq),
            ("batch_size", self.batch_size),
            ("guide_batch", self.guide_batch),
            ("guide_set_size", self.guide_set_size),
            ("guide_freq", self.guide_freq),
            ("guide_hidden", self.guide_hidden),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("final_evals", self.final_evals),
            ("loss_interval", self.loss_interval),
            ("intensity_probes", self.intensity_probes),
        ];
        for (name, v) in counts {
            if v == 0 {
                bad.push(format!("{name} must be >= 1"));
            }
        }
        if self.guide_batch > self.guide_set_size {
            bad.push(format!(
                "guide_batch {} exceeds guide_set_size {}",
                self.guide_batch, self.guide_set_size
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad.push(format!("hidden layers must be nonempty and positive, got {:?}", self.hidden));
        }
        if let Mode::FixedWeight(c) = self.mode {
            if !(c >= 0.0 && c.is_finite()) {
                bad.push(format!("fixed weight must be >= 0, got {c}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::digest::fnv1a_hex(json.as_bytes())
    }

    fn critic_hyper(&self) -> CriticHyper {
        CriticHyper {
            gamma: self.gamma,
            lr: self.critic_lr,
            policy_noise: self.policy_noise,
            noise_clip: self.noise_clip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub raw_return: f64,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityRecord {
    pub step: usize,
    pub bucket: BehaviorKind,
    pub mean_degree: f64,
    pub mean_constraint: f64,
    /// Mean of `degree · L_pc` over the bucket's probes.
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub q_loss: f64,
    pub v_loss: f64,
    pub penalty: f64,
    pub policy_loss: f64,
    pub mean_degree: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideRecord {
    pub step: usize,
    pub mean_alignment: f64,
    pub delta_norm: f64,
    pub degree_mean_before: f64,
    pub degree_mean_after: f64,
    /// `max_k |d_k(w^(t+1)) − d_k(w^(t))|` on the batch.
    pub degree_shift: f64,
    /// The real step consumed the post-update degrees.
    pub fresh: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub evals: Vec<EvalRecord>,
    pub intensity: Vec<IntensityRecord>,
    pub losses: Vec<LossRecord>,
    pub guide_updates: Vec<GuideRecord>,
    /// Seconds per 1000 steps; never serialized.
    #[serde(skip)]
    pub wall_clock_per_1k: Vec<f64>,
}

pub const RUN_CSV_HEADER: &str = "event,step,bucket,raw_return,score,q_loss,v_loss,penalty,policy_loss,mean_degree,mean_constraint,intensity,mean_alignment,delta_norm,degree_shift";

impl RunLog {
    /// Final score: mean normalized score of the last `k` evaluations.
    pub fn final_score(&self, k: usize) -> Option<f64> {
        tail_mean(self.evals.iter().map(|e| e.score), k)
    }

    pub fn final_raw_return(&self, k: usize) -> Option<f64> {
        tail_mean(self.evals.iter().map(|e| e.raw_return), k)
    }

    /// Scores of the last `k` evaluations, oldest first.
    pub fn last_scores(&self, k: usize) -> Vec<f64> {
        let n = self.evals.len();
        self.evals[n.saturating_sub(k)..].iter().map(|e| e.score).collect()
    }

    /// One row per record, grouped by event kind, each group in step order.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{RUN_CSV_HEADER}")?;
        for e in &self.evals {
            writeln!(w, "eval,{},,{},{},,,,,,,,,,", e.step, e.raw_return, e.score)?;
        }
        for l in &self.losses {
            writeln!(
                w,
                "loss,{},,,,{},{},{},{},{},,,,,",
                l.step, l.q_loss, l.v_loss, l.penalty, l.policy_loss, l.mean_degree
            )?;
        }
        for r in &self.intensity {
            writeln!(
                w,
                "intensity,{},{},,,,,,,{},{},{},,,",
                r.step,
                r.bucket.as_str(),
                r.mean_degree,
                r.mean_constraint,
                r.intensity
            )?;
        }
        for g in &self.guide_updates {
            writeln!(
                w,
                "guide,{},,,,,,,,{},,,{},{},{}",
                g.step, g.degree_mean_after, g.mean_alignment, g.delta_norm, g.degree_shift
            )?;
        }
        Ok(())
    }
}

fn tail_mean(values: impl ExactSizeIterator<Item = f64>, k: usize) -> Option<f64> {
    let n = values.len();
    if n == 0 || k == 0 {
        return None;
    }
    let take = k.min(n);
    Some(values.skip(n - take).sum::<f64>() / take as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub mode_label: String,
    pub seed: u64,
    pub config_hash: String,
    pub env_fingerprint: String,
    pub steps: usize,
    pub final_score: f64,
    pub final_raw_return: f64,
    /// The scores averaged into `final_score`.
    pub final_scores: Vec<f64>,
    pub guide_updates: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub agent: Agent,
    pub guide: Option<GuidingNet>,
    pub norm: NormStats,
    pub log: RunLog,
    pub summary: RunSummary,
}

/// Fixed probe transitions of one quality bucket.
struct Probe {
    bucket: BehaviorKind,
    n: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    noise: Vec<f64>,
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Train with a freshly initialized guiding net (when the mode needs one).
pub fn train(
    cfg: &TrainConfig,
    env: &EnvSpec,
    d: &OfflineDataset,
    g: Option<&OfflineDataset>,
    refs: &ScoreRefs,
) -> Result<TrainOutput> {
    train_with_guide(cfg, env, d, g, refs, None)
}

/// As [`train`], optionally starting GORL from the given guiding net
/// instead of a random one.
pub fn train_with_guide(
    cfg: &TrainConfig,
    env: &EnvSpec,
    d: &OfflineDataset,
    g: Option<&OfflineDataset>,
    refs: &ScoreRefs,
    initial_guide: Option<GuidingNet>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    refs.validate()?;
    env.validate()?;
    d.validate()?;
    if d.is_empty() {
        return Err(Error::InvalidInput("offline dataset is empty".into()));
    }
    if d.state_dim() != env.state_dim() || d.action_dim() != env.action_dim() {
        return Err(Error::Dimension(format!(
            "dataset dims ({}, {}) do not match the environment ({}, {})",
            d.state_dim(),
            d.action_dim(),
            env.state_dim(),
            env.action_dim()
        )));
    }
    let needs_g = matches!(cfg.mode, Mode::Gorl | Mode::MixedBaseline);
    let g = match (needs_g, g) {
        (true, Some(g)) if !g.is_empty() => {
            g.validate()?;
            if cfg.mode == Mode::Gorl && g.len() < cfg.guide_batch {
                return Err(Error::InvalidInput(format!(
                    "guiding set has {} tuples, fewer than guide_batch {}",
                    g.len(),
                    cfg.guide_batch
                )));
            }
            Some(g)
        }
        (true, _) => {
            return Err(Error::InvalidInput(format!("mode {} needs a nonempty guiding set", cfg.mode.label())));
        }
        (false, _) => None,
    };

    let raw = match (cfg.mode, g) {
        (Mode::MixedBaseline, Some(g)) => mix(d, g)?,
        _ => d.clone(),
    };
    let norm = if cfg.normalize_states {
        NormStats::compute(&raw)?
    } else {
        NormStats::identity(raw.state_dim())
    };
    let data = raw.normalized(&norm)?;
    let guide_data = match (cfg.mode, g) {
        (Mode::Gorl, Some(g)) => Some(g.normalized(&norm)?),
        _ => None,
    };

    let seed = cfg.seed;
    let mut agent = Agent::new(
        cfg.algorithm,
        cfg.adapter.clone(),
        env.state_dim(),
        env.action_dim(),
        &cfg.hidden,
        env.action_bound,
        &mut Rng::derived(seed, TAG_INIT),
    )?;
    let mut guide = match cfg.mode {
        Mode::Gorl => Some(match initial_guide {
            Some(gn) => gn,
            None => GuidingNet::new(cfg.guide_hidden, cfg.guide_log_input, &mut Rng::derived(seed, TAG_GUIDE_INIT))?,
        }),
        _ => None,
    };
    let probes = build_probes(&data, cfg, &agent)?;

    let mut batch_rng = Rng::derived(seed, TAG_BATCH);
    let mut critic_rng = Rng::derived(seed, TAG_CRITIC);
    let mut noise_rng = Rng::derived(seed, TAG_POLICY_NOISE);
    let mut guide_rng = Rng::derived(seed, TAG_GUIDE_BATCH);
    let mut dropout_rng = Rng::derived(seed, TAG_DROPOUT);
    let hp = cfg.critic_hyper();
    let n = cfg.batch_size;
    let delayed = cfg.algorithm.delayed_policy();

    let mut log = RunLog::default();
    let mut last_policy_loss = f64::NAN;
    let mut last_mean_degree = f64::NAN;
    let mut clock = Instant::now();

    for t in 0..cfg.total_steps {
        let idx = sample_batch(data.len(), n, &mut batch_rng)?;
        let batch = data.gather(&idx);
        let critic = agent.critic_update(&batch, &hp, &mut critic_rng)?;

        if !delayed || t % cfg.policy_freq == 0 {
            let states = agent.dropout_states(&batch, &mut dropout_rng);
            let noise = normals(agent.actor.noise_len(n), &mut noise_rng);
            let terms = agent.policy_terms(&states, &batch.actions, n, &noise)?;
            let degrees = match guide.as_mut() {
                Some(gn) if t % cfg.guide_freq == 0 => {
                    let gd = guide_data.as_ref().expect("guiding data present in gorl mode");
                    let gi = sample_batch(gd.len(), cfg.guide_batch, &mut guide_rng)?;
                    let gb = gd.gather(&gi);
                    let virt = virtual_step(&agent.actor, &terms, gn, cfg.actor_lr)?;
                    let gg = guiding_grad_average(&virt, &gb.states, &gb.actions, cfg.guide_batch)?;
                    let upd = meta_update_from_virtual(gn, &virt, &gg, cfg.actor_lr, cfg.guide_lr)?;
                    let after = gn.degrees(&terms.guide_input)?;
                    let shift = after
                        .iter()
                        .zip(&virt.degrees)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    let used = gn.degrees(&terms.guide_input)?;
                    log.guide_updates.push(GuideRecord {
                        step: t,
                        mean_alignment: mean(&upd.alignment),
                        delta_norm: upd.delta.norm(),
                        degree_mean_before: mean(&virt.degrees),
                        degree_mean_after: mean(&after),
                        degree_shift: shift,
                        fresh: used == after,
                    });
                    used
                }
                Some(gn) => gn.degrees(&terms.guide_input)?,
                None => vec![cfg.mode.constant_degree(); n],
            };
            let grad = terms.actor_grad(&agent.actor, &degrees)?;
            agent.apply_actor_grad(&grad, cfg.actor_lr)?;
            agent.soft_update_targets(cfg.tau);
            last_policy_loss = terms.loss(&degrees)?;
            last_mean_degree = mean(&degrees);
        }

        let step = t + 1;
        if step % cfg.loss_interval == 0 {
            log.losses.push(LossRecord {
                step,
                q_loss: critic.q_loss,
                v_loss: critic.v_loss,
                penalty: critic.penalty,
                policy_loss: last_policy_loss,
                mean_degree: last_mean_degree,
            });
        }
        if step % cfg.eval_interval == 0 {
            let eval_idx = log.evals.len() as u64;
            let raw_return = evaluate(&agent, &norm, env, cfg.eval_episodes, Rng::derived(seed, TAG_EVAL + eval_idx))?;
            log.evals.push(EvalRecord {
                step,
                raw_return,
                score: refs.normalize(raw_return)?,
            });
            log_intensity(&mut log, step, &probes, &agent, guide.as_ref(), cfg.mode)?;
        }
        if step % 1000 == 0 {
            log.wall_clock_per_1k.push(clock.elapsed().as_secs_f64());
            clock = Instant::now();
        }
    }

    let k = cfg.final_evals;
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        mode: cfg.mode,
        mode_label: cfg.mode.label(),
        seed,
        config_hash: cfg.hash(),
        env_fingerprint: env.fingerprint(),
        steps: cfg.total_steps,
        final_score: log.final_score(k).unwrap_or(f64::NAN),
        final_raw_return: log.final_raw_return(k).unwrap_or(f64::NAN),
        final_scores: log.last_scores(k),
        guide_updates: log.guide_updates.len(),
    };
    if log.evals.is_empty() {
        return Err(Error::Config(format!(
            "total_steps {} is shorter than eval_interval {}; no evaluation would run",
            cfg.total_steps, cfg.eval_interval
        )));
    }
    Ok(TrainOutput {
        agent,
        guide,
        norm,
        log,
        summary,
    })
}

/// Mean return of the actor's mode action on normalized observations.
pub fn evaluate(agent: &Agent, norm: &NormStats, env: &EnvSpec, episodes: usize, mut rng: Rng) -> Result<f64> {
    let mut failure = None;
    let ret = evaluate_policy(
        env,
        |s| match agent.actor.act(&norm.normalize(s)) {
            Ok(a) => a,
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; env.action_dim()]
            }
        },
        episodes,
        &mut rng,
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(ret),
    }
}

fn build_probes(data: &OfflineDataset, cfg: &TrainConfig, agent: &Agent) -> Result<Vec<Probe>> {
    let mut rng = Rng::derived(cfg.seed, TAG_PROBE);
    let mut probes = Vec::new();
    for (bucket, indices) in data.bucket_indices() {
        if indices.is_empty() {
            continue;
        }
        let m = cfg.intensity_probes.min(indices.len());
        let mut pick: Vec<usize> = rng.choose_distinct(indices.len(), m).into_iter().map(|i| indices[i]).collect();
        pick.sort_unstable();
        let b = data.gather(&pick);
        probes.push(Probe {
            bucket,
            n: m,
            noise: normals(agent.actor.noise_len(m), &mut rng),
            states: b.states,
            actions: b.actions,
        });
    }
    Ok(probes)
}

fn log_intensity(
    log: &mut RunLog,
    step: usize,
    probes: &[Probe],
    agent: &Agent,
    guide: Option<&GuidingNet>,
    mode: Mode,
) -> Result<()> {
    for p in probes {
        let terms = agent.policy_terms(&p.states, &p.actions, p.n, &p.noise)?;
        let degrees = match guide {
            Some(gn) => gn.degrees(&terms.guide_input)?,
            None => vec![mode.constant_degree(); p.n],
        };
        let weighted: Vec<f64> = degrees.iter().zip(&terms.constraint_loss).map(|(d, l)| d * l).collect();
        log.intensity.push(IntensityRecord {
            step,
            bucket: p.bucket,
            mean_degree: mean(&degrees),
            mean_constraint: mean(&terms.constraint_loss),
            intensity: mean(&weighted),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityCurve {
    pub bucket: BehaviorKind,
    pub steps: Vec<usize>,
    pub raw: Vec<f64>,
    /// Min-max scaled to `[0, 1]`; a flat curve maps to all zeros.
    pub normalized: Vec<f64>,
}

/// `(v − min)/(max − min)`, or zeros when the span is zero.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Per-bucket intensity curves, each min-max normalized on its own.
///
/// Fails when the log has no bucketed intensity records or fewer than two
/// logged intervals; callers skip the report with a warning.
pub fn constraint_intensity_report(log: &RunLog) -> Result<Vec<IntensityCurve>> {
    let mut curves: Vec<IntensityCurve> = Vec::new();
    for r in &log.intensity {
        let c = match curves.iter_mut().find(|c| c.bucket == r.bucket) {
            Some(c) => c,
            None => {
                curves.push(IntensityCurve {
                    bucket: r.bucket,
                    steps: Vec::new(),
                    raw: Vec::new(),
                    normalized: Vec::new(),
                });
                curves.last_mut().unwrap()
            }
        };
        c.steps.push(r.step);
        c.raw.push(r.intensity);
    }
    if curves.is_empty() {
        return Err(Error::InvalidInput("run log has no bucketed intensity records".into()));
    }
    if curves.iter().any(|c| c.steps.len() < 2) {
        return Err(Error::InvalidInput("intensity report needs at least two logged intervals".into()));
    }
    curves.sort_by_key(|c| c.bucket);
    for c in &mut curves {
        c.normalized = min_max_normalize(&c.raw);
    }
    Ok(curves)
}
