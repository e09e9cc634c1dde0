//! Aggregation of finished runs: results table, paired t-tests against the
//! baseline, and score / constraint-intensity plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gorl_core::envs::BehaviorKind;
use gorl_core::stats::{paired_t_test, TTestResult};
use gorl_core::trainer::{constraint_intensity_report, Mode, RunLog};

use crate::error::{io_at, CliError, CliResult};
use crate::run::{read_json, read_log, RunRecord, SUMMARY_FILE};
use crate::svg::{line_plot, Series};

pub const AGGREGATE_FILE: &str = "results.csv";
pub const TTEST_FILE: &str = "ttest.csv";
pub const SCORES_SVG: &str = "scores.svg";
pub const INTENSITY_SVG: &str = "intensity.svg";
pub const REFERENCE_MODE: &str = "baseline";

pub struct LoadedRun {
    pub record: RunRecord,
    pub log: RunLog,
}

/// A t-test of one (dataset, mode) group against the baseline group of the
/// same dataset, paired by (seed, evaluation index).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTest {
    pub dataset: String,
    pub mode: String,
    pub seeds: usize,
    pub pairs: usize,
    pub mean_reference: f64,
    pub mean_mode: f64,
    pub result: TTestResult,
}

/// Every run directory under `dir` (recursively), ordered by
/// (dataset, mode, seed).
pub fn load_runs(dir: &Path) -> CliResult<Vec<LoadedRun>> {
    let mut found = Vec::new();
    collect_summaries(dir, &mut found)?;
    let mut runs = Vec::with_capacity(found.len());
    for run_dir in found {
        let record: RunRecord = read_json(&run_dir.join(SUMMARY_FILE))?;
        let log = read_log(&run_dir)?;
        runs.push(LoadedRun { record, log });
    }
    runs.sort_by(|a, b| {
        (&a.record.dataset, &a.record.mode, a.record.summary.seed).cmp(&(&b.record.dataset, &b.record.mode, b.record.summary.seed))
    });
    Ok(runs)
}

fn collect_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    let mut entries: Vec<PathBuf> = io_at(std::fs::read_dir(dir), dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    if entries.iter().any(|p| p.file_name().is_some_and(|n| n == SUMMARY_FILE)) {
        out.push(dir.to_path_buf());
    }
    for p in entries {
        if p.is_dir() {
            collect_summaries(&p, out)?;
        }
    }
    Ok(())
}

type GroupKey = (String, String);

fn groups(runs: &[LoadedRun]) -> BTreeMap<GroupKey, Vec<&LoadedRun>> {
    let mut g: BTreeMap<GroupKey, Vec<&LoadedRun>> = BTreeMap::new();
    for r in runs {
        g.entry((r.record.dataset.clone(), r.record.mode.clone())).or_default().push(r);
    }
    g
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Paired t-tests of every non-baseline group against its dataset's
/// baseline; groups without a usable pairing are skipped.
pub fn group_tests(runs: &[LoadedRun]) -> Vec<GroupTest> {
    let groups = groups(runs);
    let mut tests = Vec::new();
    for ((dataset, mode), members) in &groups {
        if mode == REFERENCE_MODE {
            continue;
        }
        let Some(reference) = groups.get(&(dataset.clone(), REFERENCE_MODE.to_string())) else {
            continue;
        };
        let (mut xs, mut ys, mut seeds) = (Vec::new(), Vec::new(), 0);
        for m in members {
            let seed = m.record.summary.seed;
            let Some(r) = reference.iter().find(|r| r.record.summary.seed == seed) else {
                continue;
            };
            let (a, b) = (&r.record.summary.final_scores, &m.record.summary.final_scores);
            if a.len() == b.len() && !a.is_empty() {
                xs.extend_from_slice(a);
                ys.extend_from_slice(b);
                seeds += 1;
            }
        }
        if xs.len() < 2 {
            continue;
        }
        if let Ok(result) = paired_t_test(&xs, &ys) {
            tests.push(GroupTest {
                dataset: dataset.clone(),
                mode: mode.clone(),
                seeds,
                pairs: xs.len(),
                mean_reference: mean(&xs),
                mean_mode: mean(&ys),
                result,
            });
        }
    }
    tests
}

pub fn results_table(runs: &[LoadedRun], tests: &[GroupTest]) -> String {
    let mut out = String::from("dataset,mode,seed,score,p_value,significant\n");
    for r in runs {
        let t = tests.iter().find(|t| t.dataset == r.record.dataset && t.mode == r.record.mode);
        let (p, sig) = match t {
            Some(t) => (format!("{:.6e}", t.result.p_value), t.result.significant.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{},{},{},{:.6},{p},{sig}", r.record.dataset, r.record.mode, r.record.summary.seed, r.record.summary.final_score);
    }
    out
}

pub fn ttest_table(tests: &[GroupTest]) -> String {
    let mut out = String::from("dataset,mode,reference,seeds,pairs,mean_reference,mean_mode,mean_diff,t,df,p_value,p_greater,p_less,significant\n");
    for t in tests {
        let r = &t.result;
        let _ = writeln!(
            out,
            "{},{},{REFERENCE_MODE},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6e},{:.6e},{:.6e},{}",
            t.dataset,
            t.mode,
            t.seeds,
            t.pairs,
            t.mean_reference,
            t.mean_mode,
            r.mean_diff,
            r.t,
            r.df,
            r.p_value,
            r.p_greater,
            r.p_less,
            r.significant
        );
    }
    out
}

/// Seed-averaged score curve per (dataset, mode) group, over the
/// evaluation steps every member logged.
pub fn score_plot(runs: &[LoadedRun]) -> String {
    let mut series = Vec::new();
    for ((dataset, mode), members) in groups(runs) {
        let n = members.iter().map(|m| m.log.evals.len()).min().unwrap_or(0);
        let points = (0..n)
            .map(|i| {
                let step = members[0].log.evals[i].step as f64;
                (step, mean(&members.iter().map(|m| m.log.evals[i].score).collect::<Vec<_>>()))
            })
            .collect();
        series.push(Series {
            name: format!("{dataset}/{mode}"),
            points,
        });
    }
    line_plot("Normalized score", "training step", "score", &series)
}

/// Per-bucket relative constraint intensity, min-max scaled within each
/// run and averaged over the GORL runs (all runs when none are GORL).
pub fn intensity_plot(runs: &[LoadedRun]) -> String {
    let gorl: Vec<&LoadedRun> = runs.iter().filter(|r| r.record.summary.mode == Mode::Gorl).collect();
    let chosen: Vec<&LoadedRun> = if gorl.is_empty() { runs.iter().collect() } else { gorl };
    let mut acc: BTreeMap<BehaviorKind, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in chosen {
        let Ok(curves) = constraint_intensity_report(&r.log) else { continue };
        for c in curves {
            let per_step = acc.entry(c.bucket).or_default();
            for (s, v) in c.steps.iter().zip(&c.normalized) {
                let e = per_step.entry(*s).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let series: Vec<Series> = acc
        .into_iter()
        .map(|(bucket, per_step)| Series {
            name: bucket.as_str().to_string(),
            points: per_step.into_iter().map(|(s, (sum, n))| (s as f64, sum / n as f64)).collect(),
        })
        .collect();
    line_plot("Relative constraint intensity", "training step", "min-max scaled intensity", &series)
}

/// Writes the results table, the t-test table and both plots into `out`.
pub fn write_report(runs_dir: &Path, out: &Path) -> CliResult<(Vec<LoadedRun>, Vec<GroupTest>)> {
    if !runs_dir.is_dir() {
        return Err(CliError::Failed(format!("{} is not a directory", runs_dir.display())));
    }
    let runs = load_runs(runs_dir)?;
    if runs.is_empty() {
        return Err(CliError::Failed(format!("no run summaries under {}", runs_dir.display())));
    }
    let tests = group_tests(&runs);
    io_at(std::fs::create_dir_all(out), out)?;
    for (name, text) in [
        (AGGREGATE_FILE, results_table(&runs, &tests)),
        (TTEST_FILE, ttest_table(&tests)),
        (SCORES_SVG, score_plot(&runs)),
        (INTENSITY_SVG, intensity_plot(&runs)),
    ] {
        let path = out.join(name);
        io_at(std::fs::write(&path, text), &path)?;
    }
    Ok((runs, tests))
}
