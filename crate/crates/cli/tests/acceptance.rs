//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero when any fails.
//!
//! `GORL_ACCEPTANCE=1,8,10` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use gorl_core::agents::Algorithm;
use gorl_core::datasets::{extract_tuples, mix, OfflineDataset, TupleSampling};
use gorl_core::envs::{generate_dataset, BehaviorKind, BehaviorPolicy, EnvSpec};
use gorl_core::guidance::GuidingNet;
use gorl_core::numeric::{sigmoid, Rng};
use gorl_core::stats::{paired_t_test, t_cdf, ScoreRefs, TTestResult, REF_EPISODES, REF_SEED};
use gorl_core::theory::{theorem2_grid, verify_gradients_with, verify_theorem1, verify_theorem2, GradDist};
use gorl_core::trainer::{train, train_with_guide, Mode, RunSummary, TrainConfig, TrainOutput};

// Pinned tolerances and budgets.
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const GRAD_INSTANCES: usize = 50;
const GRAD_BUDGET_S: f64 = 30.0;
const T1_INSTANCES: usize = 100;
const T1_MIN_COSINE: f64 = 0.9999;
const T1_MAX_REL_ERR: f64 = 1e-3;
const T1_BUDGET_S: f64 = 120.0;
const T2_TRIALS: usize = 10_000;
const T2_STDERRS: f64 = 3.0;
const T2_SLOPE: (f64, f64) = (-1.2, -0.8);
const T2_MIN_R2: f64 = 0.99;
const T2_BUDGET_S: f64 = 300.0;
const ALPHA: f64 = 0.05;
const SEEDS: u64 = 5;
const C4_BUDGET_S: f64 = 1800.0;
const C5_MARGIN: f64 = 5.0;
const C5_WEIGHTS: [f64; 4] = [0.0, 0.1, 0.5, 1.0];
const C5_BUDGET_S: f64 = 2400.0;
const C6_MIN_SEEDS: usize = 4;
const CAUCHY_TOL: f64 = 1e-10;
const QUAD_TOL: f64 = 1e-6;

const MEDIUM_EPISODES: usize = 500;
const EXPERT_POOL_EPISODES: usize = 50;
const EXPERT_TUPLES: usize = 200;

/// Desk-scale training setup shared by criteria 4 to 7.
fn desk(algorithm: Algorithm, mode: Mode, seed: u64) -> TrainConfig {
    let guide_lr = match algorithm {
        Algorithm::Td3Bc | Algorithm::SacBc => 10.0,
        Algorithm::Iql | Algorithm::Cql => 1.0,
    };
    TrainConfig {
        algorithm,
        mode,
        seed,
        total_steps: 10_000,
        hidden: vec![64, 64],
        eval_interval: 500,
        eval_episodes: 10,
        final_evals: 10,
        guide_freq: 10,
        guide_lr,
        ..TrainConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Data and cached runs shared between criteria.
struct Desk {
    env: EnvSpec,
    refs: ScoreRefs,
    medium: OfflineDataset,
    mixed: OfflineDataset,
    g: OfflineDataset,
    /// (algorithm, mode label) → per-seed summaries, seed order.
    medium_runs: BTreeMap<(Algorithm, String), Vec<RunSummary>>,
    mixed_runs: BTreeMap<String, Vec<TrainOutput>>,
}

impl Desk {
    fn new() -> Self {
        let env = EnvSpec::default();
        let refs = ScoreRefs::compute(&env, 0.99, REF_EPISODES, REF_SEED).unwrap();
        let pol = |k| BehaviorPolicy::for_kind(&env, k, 0.99).unwrap();
        let medium = generate_dataset(&env, &pol(BehaviorKind::Medium), MEDIUM_EPISODES, 101).unwrap();
        let pool = generate_dataset(&env, &pol(BehaviorKind::Expert), EXPERT_POOL_EPISODES, 102).unwrap();
        let g = extract_tuples(&pool, EXPERT_TUPLES, TupleSampling::Uniform, &mut Rng::new(103)).unwrap();
        let third = MEDIUM_EPISODES / 3;
        let r = generate_dataset(&env, &pol(BehaviorKind::Random), third + 1, 104).unwrap();
        let m = generate_dataset(&env, &pol(BehaviorKind::Medium), third + 1, 105).unwrap();
        let e = generate_dataset(&env, &pol(BehaviorKind::Expert), third, 106).unwrap();
        let mixed = mix(&mix(&r, &m).unwrap(), &e).unwrap();
        Self {
            env,
            refs,
            medium,
            mixed,
            g,
            medium_runs: BTreeMap::new(),
            mixed_runs: BTreeMap::new(),
        }
    }

    fn medium_runs(&mut self, algorithm: Algorithm, mode: Mode) -> &[RunSummary] {
        let key = (algorithm, mode.label());
        if !self.medium_runs.contains_key(&key) {
            let runs = (0..SEEDS)
                .map(|seed| {
                    let t = Instant::now();
                    let out = train(&desk(algorithm, mode, seed), &self.env, &self.medium, Some(&self.g), &self.refs).unwrap();
                    eprintln!(
                        "    {} {} seed {seed}: final {:.3} ({:.0}s)",
                        algorithm.as_str(),
                        mode.label(),
                        out.summary.final_score,
                        t.elapsed().as_secs_f64()
                    );
                    out.summary
                })
                .collect();
            self.medium_runs.insert(key.clone(), runs);
        }
        &self.medium_runs[&key]
    }

    fn mixed_runs(&mut self, mode: Mode) -> &[TrainOutput] {
        let key = mode.label();
        if !self.mixed_runs.contains_key(&key) {
            let runs = (0..SEEDS)
                .map(|seed| {
                    let t = Instant::now();
                    let out = train(&desk(Algorithm::Td3Bc, mode, seed), &self.env, &self.mixed, Some(&self.g), &self.refs).unwrap();
                    eprintln!("    mixed {} seed {seed}: final {:.3} ({:.0}s)", mode.label(), out.summary.final_score, t.elapsed().as_secs_f64());
                    out
                })
                .collect();
            self.mixed_runs.insert(key.clone(), runs);
        }
        &self.mixed_runs[&key]
    }

    /// Paired over (seed, evaluation index) of the last evaluations.
    fn paired(&mut self, algorithm: Algorithm, reference: Mode, other: Mode) -> TTestResult {
        let xs: Vec<f64> = self.medium_runs(algorithm, reference).iter().flat_map(|s| s.final_scores.clone()).collect();
        let ys: Vec<f64> = self.medium_runs(algorithm, other).iter().flat_map(|s| s.final_scores.clone()).collect();
        assert_eq!(xs.len(), (SEEDS as usize) * 10);
        paired_t_test(&xs, &ys).unwrap()
    }
}

fn central_difference(x: &[f64], f: &mut dyn FnMut(&[f64]) -> gorl_core::Result<f64>) -> gorl_core::Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x0 = p[i];
        p[i] = x0 + GRAD_FD_STEP;
        let hi = f(&p)?;
        p[i] = x0 - GRAD_FD_STEP;
        let lo = f(&p)?;
        p[i] = x0;
        g[i] = (hi - lo) / (2.0 * GRAD_FD_STEP);
    }
    Ok(g)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let r = verify_gradients_with(GRAD_INSTANCES, 2024, &central_difference).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = r.checks.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err));
    let mut components: Vec<&str> = r.checks.iter().map(|c| c.component.as_str()).collect();
    components.sort_unstable();
    components.dedup();
    let instances = r.checks.iter().map(|c| c.instance).max().map_or(0, |i| i + 1);
    outcome(
        worst < GRAD_MAX_REL_ERR && instances == GRAD_INSTANCES && secs < GRAD_BUDGET_S,
        format!(
            "{} checks over {instances} instances ({}), max rel err {worst:.2e} < {GRAD_MAX_REL_ERR:e}, {secs:.1}s < {GRAD_BUDGET_S}s",
            r.checks.len(),
            components.join(" ")
        ),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let r = verify_theorem1(T1_INSTANCES, 7).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let min_cos = r.trials.iter().map(|t| t.cosine).fold(f64::INFINITY, f64::min);
    let max_err = r.trials.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    outcome(
        r.trials.len() == T1_INSTANCES && min_cos > T1_MIN_COSINE && max_err < T1_MAX_REL_ERR && secs < T1_BUDGET_S,
        format!(
            "{} instances, min cosine {min_cos:.8} > {T1_MIN_COSINE}, max rel L2 err {max_err:.2e} < {T1_MAX_REL_ERR:e}, {secs:.1}s < {T1_BUDGET_S}s",
            r.trials.len()
        ),
    )
}

/// Least-squares slope and R² of `y` on `x`.
fn fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, slope * sxy / syy)
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let (mut cells, mut bad_rows, mut bad_rates) = (0, Vec::new(), Vec::new());
    for cfg in theorem2_grid(T2_TRIALS, 11) {
        assert_ne!(cfg.dist, GradDist::Degenerate);
        let r = verify_theorem2(&cfg).unwrap();
        cells += 1;
        let d = (cfg.d1 * cfg.d2) as f64;
        for row in &r.rows {
            assert_eq!(cfg.trials, T2_TRIALS);
            let bound = d * cfg.delta / (row.eps * row.eps * row.n as f64);
            let se = (row.empirical * (1.0 - row.empirical) / T2_TRIALS as f64).sqrt();
            if row.empirical > bound + T2_STDERRS * se {
                bad_rows.push(format!("{} n={} eps={}: {:.4} > {:.4}", r.label, row.n, row.eps, row.empirical, bound));
            }
        }
        let mut per_n: Vec<(f64, f64)> = r.rows.iter().map(|row| ((row.n as f64).ln(), row.mean_sq_gap.ln())).collect();
        per_n.dedup_by(|a, b| a.0 == b.0);
        let (xs, ys): (Vec<f64>, Vec<f64>) = per_n.into_iter().unzip();
        let (slope, r2) = fit(&xs, &ys);
        if !(slope >= T2_SLOPE.0 && slope <= T2_SLOPE.1 && r2 > T2_MIN_R2) {
            bad_rates.push(format!("{} slope {slope:.3} r2 {r2:.4}", r.label));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let mut detail = format!(
        "{cells} cells x {T2_TRIALS} trials, {} bound violations beyond {T2_STDERRS} stderr, {} rate failures (slope in [{}, {}], R2 > {T2_MIN_R2}), {secs:.1}s < {T2_BUDGET_S}s",
        bad_rows.len(),
        bad_rates.len(),
        T2_SLOPE.0,
        T2_SLOPE.1
    );
    for b in bad_rows.iter().chain(&bad_rates) {
        detail.push_str("\n      ");
        detail.push_str(b);
    }
    outcome(bad_rows.is_empty() && bad_rates.is_empty() && secs < T2_BUDGET_S, detail)
}

fn criterion_4(desk: &mut Desk) -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for algo in Algorithm::ALL {
        let r = desk.paired(algo, Mode::Baseline, Mode::Gorl);
        let ok = if algo == Algorithm::Td3Bc {
            r.p_value < ALPHA && r.t > 0.0
        } else {
            r.p_less >= ALPHA
        };
        pass &= ok;
        parts.push(format!(
            "{} diff {:+.3} t {:.2} p {:.2e} p(worse) {:.3}{}",
            algo.as_str(),
            r.mean_diff,
            r.t,
            r.p_value,
            r.p_less,
            if ok { "" } else { " [x]" }
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        pass && secs < C4_BUDGET_S,
        format!(
            "td3_bc needs p < {ALPHA} with gain, others p(worse) >= {ALPHA}; {}; {secs:.0}s < {C4_BUDGET_S}s",
            parts.join("; ")
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn criterion_5(desk: &mut Desk) -> Outcome {
    let t = Instant::now();
    let adaptive = mean(&desk.mixed_runs(Mode::Gorl).iter().map(|o| o.summary.final_score).collect::<Vec<_>>());
    let mut fixed = Vec::new();
    for w in C5_WEIGHTS {
        fixed.push((w, mean(&desk.mixed_runs(Mode::FixedWeight(w)).iter().map(|o| o.summary.final_score).collect::<Vec<_>>())));
    }
    let (best_w, best) = fixed.iter().cloned().fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let secs = t.elapsed().as_secs_f64();
    let table: Vec<String> = fixed.iter().map(|(w, s)| format!("{w}: {s:.3}")).collect();
    outcome(
        adaptive >= best - C5_MARGIN && secs < C5_BUDGET_S,
        format!(
            "adaptive {adaptive:.3} >= best fixed ({best_w}: {best:.3}) - {C5_MARGIN}; fixed [{}]; {secs:.0}s < {C5_BUDGET_S}s",
            table.join(", ")
        ),
    )
}

fn criterion_6(desk: &mut Desk) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for out in desk.mixed_runs(Mode::Gorl) {
        let last = out.log.intensity.iter().map(|r| r.step).max().unwrap();
        let degree = |k: BehaviorKind| {
            out.log.intensity.iter().find(|r| r.step == last && r.bucket == k).map(|r| r.mean_degree).unwrap()
        };
        let (e, r) = (degree(BehaviorKind::Expert), degree(BehaviorKind::Random));
        wins += usize::from(e > r);
        parts.push(format!("s{} {e:.5}/{r:.5}", out.summary.seed));
    }
    outcome(
        wins >= C6_MIN_SEEDS,
        format!("expert > random final degree in {wins}/{SEEDS} seeds (need {C6_MIN_SEEDS}); expert/random: {}", parts.join(", ")),
    )
}

fn criterion_7(desk: &mut Desk) -> Outcome {
    let mixing = desk.paired(Algorithm::Td3Bc, Mode::Baseline, Mode::MixedBaseline);
    let guided = desk.paired(Algorithm::Td3Bc, Mode::Baseline, Mode::Gorl);
    let mixing_wins = mixing.p_value < ALPHA && mixing.t > 0.0;
    let guided_wins = guided.p_value < ALPHA && guided.t > 0.0;
    outcome(
        !mixing_wins && guided_wins,
        format!(
            "mix(D, G) vs D: diff {:+.3} p {:.3} (must not be a significant gain); GORL vs D: diff {:+.3} p {:.2e} (must be)",
            mixing.mean_diff, mixing.p_value, guided.mean_diff, guided.p_value
        ),
    )
}

/// Student-t density without its normalizing constant.
fn t_kernel(x: f64, df: f64) -> f64 {
    (1.0 + x * x / df).powf(-(df + 1.0) / 2.0)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    simpson(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), 1e-13, 50)
}

/// Two-sided p-value by quadrature of the t density under `x = tan θ`,
/// normalized by the quadrature of the whole line.
fn quadrature_p(t: f64, df: f64) -> f64 {
    let g = |th: f64| {
        let c = th.cos();
        if c <= 0.0 {
            return if df == 1.0 { 1.0 } else { 0.0 };
        }
        t_kernel(th.tan(), df) / (c * c)
    };
    let half = std::f64::consts::FRAC_PI_2;
    let tail = integrate(&g, t.abs().atan(), half);
    let total = integrate(&g, -half, half);
    (2.0 * tail / total).min(1.0)
}

fn criterion_8() -> Outcome {
    let mut cauchy_err = 0.0f64;
    for i in 0..=10_000 {
        let x = -50.0 + i as f64 * 0.01;
        let exact = 0.5 + x.atan() / std::f64::consts::PI;
        cauchy_err = cauchy_err.max((t_cdf(x, 1.0).unwrap() - exact).abs());
    }
    let mut quad_err = 0.0f64;
    for k in 0..20 {
        let n = 3 + 2 * k;
        let xs: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 + k as f64).sin() * 4.0 + 50.0).collect();
        let ys: Vec<f64> = (0..n)
            .map(|i| xs[i] + 0.08 * k as f64 - 0.4 + (2.1 * i as f64 * (k + 1) as f64).cos())
            .collect();
        let d: Vec<f64> = ys.iter().zip(&xs).map(|(y, x)| y - x).collect();
        let md = mean(&d);
        let sd = (d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let t = md / (sd / (n as f64).sqrt());
        let oracle = quadrature_p(t, (n - 1) as f64);
        let r = paired_t_test(&xs, &ys).unwrap();
        quad_err = quad_err.max((r.p_value - oracle).abs());
    }
    outcome(
        cauchy_err < CAUCHY_TOL && quad_err < QUAD_TOL,
        format!("df=1 CDF max err {cauchy_err:.2e} < {CAUCHY_TOL:e} on [-50, 50]; paired p vs quadrature max err {quad_err:.2e} < {QUAD_TOL:e} on 20 vectors"),
    )
}

fn gorl(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_gorl"))
        .args(args)
        .current_dir(dir)
        .env_remove("GORL_SEED")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn files(dir: &Path, base: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files(&p, base, out);
        } else {
            out.insert(p.strip_prefix(base).unwrap().display().to_string(), std::fs::read(&p).unwrap());
        }
    }
}

fn criterion_9() -> Outcome {
    let config = r#"{"dataset": "d.gorlds", "guide_data": "g.gorlds", "hidden": [16, 16], "total_steps": 600,
      "eval_interval": 100, "eval_episodes": 3, "final_evals": 3, "batch_size": 32, "loss_interval": 100,
      "guide_freq": 10, "guide_lr": 10, "intensity_probes": 32"#;
    let script: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--quality", "medium", "--episodes", "20", "--seed", "5", "--out", "d.gorlds"],
        vec!["gen-data", "--quality", "expert", "--episodes", "10", "--tuples", "200", "--seed", "6", "--out", "g.gorlds"],
        vec!["train", "--config", "train.json"],
        vec!["sweep", "--config", "sweep.json", "--jobs", "2"],
        vec!["verify", "--theorem", "1", "--trials", "5", "--seed", "3", "--out", "v"],
        vec!["verify", "--theorem", "2", "--trials", "200", "--seed", "3", "--out", "v"],
        vec!["verify", "--theorem", "gradients", "--trials", "3", "--seed", "3", "--out", "v"],
        vec!["report", "--runs", "sweep_out", "--out", "rep"],
    ];
    let mut trees = Vec::new();
    let mut failed = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.json"), format!("{config}, \"mode\": \"gorl\", \"seed\": 1}}")).unwrap();
        std::fs::write(
            dir.path().join("sweep.json"),
            format!("{config}, \"modes\": [\"baseline\", \"gorl\", \"mixed_baseline\"], \"fixed_weights\": [0.5], \"seeds\": [0, 1], \"out_dir\": \"sweep_out\"}}"),
        )
        .unwrap();
        for args in &script {
            // Theorem 2 at this trial count may legitimately fail its
            // thresholds; only its outputs matter here.
            if !gorl(dir.path(), args) && args[..2] != ["verify", "--theorem"] {
                failed.push(args.join(" "));
            }
        }
        let mut tree = BTreeMap::new();
        files(dir.path(), dir.path(), &mut tree);
        trees.push(tree);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).chain(b.keys().filter(|k| !a.contains_key(*k))).collect();
    let kinds = |ext: &str| a.keys().filter(|k| k.ends_with(ext)).count();
    outcome(
        failed.is_empty() && differing.is_empty() && kinds(".svg") >= 4 && kinds(".csv") >= 6,
        format!(
            "{} output files ({} csv, {} json, {} svg) compared across two identical invocations; {} differ; failed commands: {:?}",
            a.len(),
            kinds(".csv"),
            kinds(".json"),
            kinds(".svg"),
            differing.len(),
            failed
        ),
    )
}

fn criterion_10() -> Outcome {
    let env = EnvSpec::default();
    let refs = ScoreRefs::compute(&env, 0.99, REF_EPISODES, REF_SEED).unwrap();
    let pol = |k| BehaviorPolicy::for_kind(&env, k, 0.99).unwrap();
    let d = generate_dataset(&env, &pol(BehaviorKind::Medium), 30, 201).unwrap();
    let pool = generate_dataset(&env, &pol(BehaviorKind::Expert), 5, 202).unwrap();
    let g = extract_tuples(&pool, 100, TupleSampling::Uniform, &mut Rng::new(203)).unwrap();
    let base = |mode| TrainConfig {
        total_steps: 1500,
        hidden: vec![32, 32],
        batch_size: 64,
        eval_interval: 250,
        eval_episodes: 3,
        final_evals: 3,
        loss_interval: 250,
        guide_freq: 5,
        ..desk(Algorithm::Td3Bc, mode, 4)
    };
    let mut mismatches = Vec::new();
    for bias in [-1.5, 0.0, 0.8, 2.5] {
        let c = sigmoid(bias);
        let mut frozen = base(Mode::Gorl);
        frozen.guide_lr = 0.0;
        let guide = GuidingNet::constant(frozen.guide_hidden, bias).unwrap();
        let a = train_with_guide(&frozen, &env, &d, Some(&g), &refs, Some(guide)).unwrap();
        let b = train(&base(Mode::FixedWeight(c)), &env, &d, None, &refs).unwrap();
        let same = a.agent.actor == b.agent.actor
            && a.agent.critics == b.agent.critics
            && a.log.evals == b.log.evals
            && a.log.losses == b.log.losses
            && a.log.intensity == b.log.intensity;
        if !same {
            mismatches.push(format!("c={c:.4}"));
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("td3_bc fixed_weight(c) vs frozen constant guide at 4 values of c: bitwise mismatches {mismatches:?}"),
    )
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("GORL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let wanted = |i: u32| selected.as_ref().is_none_or(|s| s.contains(&i));
    let names = [
        "gradient fidelity",
        "meta-update identity",
        "concentration bound",
        "guided improvement",
        "fixed vs adaptive",
        "intensity ordering",
        "mixing harm",
        "statistics",
        "determinism",
        "fixed-weight equivalence",
    ];
    let mut desk: Option<Desk> = None;
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    for i in 1..=10u32 {
        if !wanted(i) {
            continue;
        }
        let t = Instant::now();
        eprintln!("criterion {i} ({}) running", names[i as usize - 1]);
        let o = match i {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(desk.get_or_insert_with(Desk::new)),
            5 => criterion_5(desk.get_or_insert_with(Desk::new)),
            6 => criterion_6(desk.get_or_insert_with(Desk::new)),
            7 => criterion_7(desk.get_or_insert_with(Desk::new)),
            8 => criterion_8(),
            9 => criterion_9(),
            _ => criterion_10(),
        };
        let line = format!(
            "criterion {i:>2} [{}]: {} ({:.1}s) {}",
            names[i as usize - 1],
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        println!("{line}");
        lines.push(line);
        if !o.pass {
            failures.push(i);
        }
    }
    println!("\nacceptance summary:");
    for l in &lines {
        println!("  {}", l.lines().next().unwrap_or(""));
    }
    if failures.is_empty() {
        println!("all selected criteria passed");
    } else {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
