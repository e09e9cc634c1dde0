//! Normalized scores, Student-t distribution, and the paired t-test.

use serde::{Deserialize, Serialize};

use crate::envs::{evaluate_policy, BehaviorPolicy, EnvSpec};
use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const SIGNIFICANCE: f64 = 0.05;
pub const BETA_TOL: f64 = 1e-14;
pub const BETA_MAX_ITER: usize = 300;
pub const REF_EPISODES: usize = 100;
pub const REF_SEED: u64 = 0x5C0E;

/// Mean returns of the random and expert policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRefs {
    pub random_ref: f64,
    pub expert_ref: f64,
}

impl ScoreRefs {
    pub fn validate(&self) -> Result<()> {
        if !(self.random_ref.is_finite() && self.expert_ref.is_finite()) || self.expert_ref <= self.random_ref {
            return Err(Error::InvalidInput(format!(
                "score references need expert > random, got expert {} random {}",
                self.expert_ref, self.random_ref
            )));
        }
        Ok(())
    }

    /// `100·(raw − random)/(expert − random)`.
    pub fn normalize(&self, raw: f64) -> Result<f64> {
        self.validate()?;
        Ok(100.0 * (raw - self.random_ref) / (self.expert_ref - self.random_ref))
    }

    /// References for `spec` from `episodes` rollouts each, with a fixed seed.
    pub fn compute(spec: &EnvSpec, gamma: f64, episodes: usize, seed: u64) -> Result<Self> {
        let random = BehaviorPolicy::random();
        let expert = BehaviorPolicy::for_kind(spec, crate::envs::BehaviorKind::Expert, gamma)?;
        let mut act_rng = Rng::derived(seed, 1);
        let random_ref = evaluate_policy(spec, |s| random.act(spec, s, &mut act_rng), episodes, &mut Rng::derived(seed, 2))?;
        let expert_ref = evaluate_policy(spec, |s| expert.act(spec, s, &mut act_rng), episodes, &mut Rng::derived(seed, 2))?;
        let refs = Self { random_ref, expert_ref };
        refs.validate()?;
        Ok(refs)
    }
}

/// `100·(raw − random)/(expert − random)`; errors on invalid refs.
pub fn normalized_score(raw: f64, refs: &ScoreRefs) -> Result<f64> {
    refs.normalize(raw)
}

/// Sidecar file holding refs for one environment fingerprint.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RefsSidecar {
    spec_hash: String,
    episodes: usize,
    seed: u64,
    refs: ScoreRefs,
}

/// Cached refs: reuses `path` when it matches `spec`, otherwise computes and rewrites it.
pub fn load_or_compute_refs(path: &std::path::Path, spec: &EnvSpec, gamma: f64, episodes: usize, seed: u64) -> Result<ScoreRefs> {
    let spec_hash = spec.fingerprint();
    if let Ok(text) = std::fs::read_to_string(path) {
        if let Ok(side) = serde_json::from_str::<RefsSidecar>(&text) {
            if side.spec_hash == spec_hash && side.episodes == episodes && side.seed == seed && side.refs.validate().is_ok() {
                return Ok(side.refs);
            }
        }
    }
    let refs = ScoreRefs::compute(spec, gamma, episodes, seed)?;
    let side = RefsSidecar {
        spec_hash,
        episodes,
        seed,
        refs,
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(refs)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < BETA_TOL {
            return Ok(h);
        }
    }
    Err(Error::NoConvergence(format!(
        "incomplete beta continued fraction (x={x}, a={a}, b={b})"
    )))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return Err(Error::InvalidInput(format!("inc_beta({x}, {a}, {b}) out of domain")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_cf(1.0 - x, b, a)? / b)
    }
}

/// `P(T ≤ x)` for Student's t with `df` degrees of freedom.
pub fn t_cdf(x: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) {
        return Err(Error::InvalidInput(format!("t distribution needs df >= 1, got {df}")));
    }
    if x.is_nan() {
        return Err(Error::NonFinite("t_cdf argument".into()));
    }
    if x.is_infinite() {
        return Ok(if x > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = 0.5 * inc_beta(df / (df + x * x), 0.5 * df, 0.5)?;
    Ok(if x >= 0.0 { 1.0 - tail } else { tail })
}

/// `P(|T| ≥ |t|)`.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df >= 1.0) {
        return Err(Error::InvalidInput(format!("t distribution needs df >= 1, got {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    inc_beta(df / (df + t * t), 0.5 * df, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    /// `P(T ≥ t)`: small when `ys` exceed `xs`.
    pub p_greater: f64,
    /// `P(T ≤ t)`: small when `ys` fall short of `xs`.
    pub p_less: f64,
    pub mean_diff: f64,
    pub significant: bool,
}

/// Paired t-test on `d = ys − xs`.
///
/// Zero-variance differences follow fixed conventions: nonzero mean gives
/// `p = 0`, zero mean gives `p = 1`.
pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTestResult> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - x).collect();
    crate::error::ensure_finite(&d, "paired differences")?;
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let df = (n - 1) as f64;
    let (t, p, p_greater, p_less) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0, 0.5, 0.5)
        } else {
            let t = f64::INFINITY.copysign(mean);
            (t, 0.0, if mean > 0.0 { 0.0 } else { 1.0 }, if mean > 0.0 { 1.0 } else { 0.0 })
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let cdf = t_cdf(t, df)?;
        (t, t_two_sided_p(t, df)?, 1.0 - cdf, cdf)
    };
    Ok(TTestResult {
        t,
        df,
        p_value: p,
        p_greater,
        p_less,
        mean_diff: mean,
        significant: p < SIGNIFICANCE,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let n = xs.len();
    let mean = if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 };
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary {
        n,
        mean,
        std,
        min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
        max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Ordinary least squares `y = a + b x`; returns `(slope, intercept, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}
