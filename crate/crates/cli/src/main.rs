mod config;
mod error;
mod report;
mod run;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use gorl_core::datasets::{extract_tuples, OfflineDataset, TupleSampling};
use gorl_core::envs::{generate_dataset, BehaviorKind, BehaviorPolicy, EnvSpec, DEFAULT_ENV_ID};
use gorl_core::numeric::Rng;
use gorl_core::theory::{theorem2_grid, verify_gradients, verify_theorem1, verify_theorem2, BOUND_CSV_HEADER};

use config::{ExperimentConfig, SEED_ENV};
use error::{io_at, CliError, CliResult};

/// Discount used to solve for the expert behind generated data.
const DATA_GAMMA: f64 = 0.99;

#[derive(Parser)]
#[command(name = "gorl", version, about = "Guided offline RL: data generation, training, sweeps, checks and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quality {
    Random,
    Medium,
    Expert,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    /// Distinct transitions drawn across all episodes.
    Uniform,
    /// One contiguous run at a random offset.
    Contiguous,
}

#[derive(Clone, Copy, ValueEnum)]
enum Theorem {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Gradients,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write a dataset file.
    GenData {
        #[arg(long, default_value = DEFAULT_ENV_ID)]
        env: String,
        #[arg(long, value_enum)]
        quality: Quality,
        #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        /// Keep only this many transitions, drawn uniformly.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        tuples: Option<u64>,
        /// How `--tuples` are drawn.
        #[arg(long, value_enum, default_value = "uniform")]
        sampling: Sampling,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single run described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train every cell of a config's sweep axes, then write the report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Rerun cells that already have a summary.
        #[arg(long)]
        force: bool,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        jobs: u64,
    },
    /// Numerical checks of the meta-gradient identity, the concentration
    /// bound, or every analytic gradient.
    Verify {
        #[arg(long, value_enum)]
        theorem: Theorem,
        #[arg(long)]
        seed: Option<u64>,
        /// Random instances (theorem 1, gradients) or trials per cell (theorem 2).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        trials: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Aggregate finished runs into tables and plots.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData {
            env,
            quality,
            episodes,
            tuples,
            sampling,
            seed,
            out,
        } => {
            let sampling = match sampling {
                Sampling::Uniform => TupleSampling::Uniform,
                Sampling::Contiguous => TupleSampling::Contiguous,
            };
            gen_data(&env, quality, episodes as usize, tuples.map(|t| (t as usize, sampling)), resolve_seed(seed)?, &out)
        }
        Command::Train { config } => train(&config),
        Command::Sweep { config, force, jobs } => sweep(&config, force, jobs as usize),
        Command::Verify { theorem, seed, trials, out } => verify(theorem, resolve_seed(seed)?, trials.map(|t| t as usize), &out),
        Command::Report { runs, out } => {
            let (runs, tests) = report::write_report(&runs, &out)?;
            eprintln!("report: {} runs, {} t-tests written to {}", runs.len(), tests.len(), out.display());
            print!("{}", report::results_table(&runs, &tests));
            Ok(())
        }
    }
}

/// The flag wins; `GORL_SEED` applies only when no flag is given.
fn resolve_seed(flag: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn gen_data(env_id: &str, quality: Quality, episodes: usize, tuples: Option<(usize, TupleSampling)>, seed: u64, out: &Path) -> CliResult<()> {
    if env_id != DEFAULT_ENV_ID {
        return Err(CliError::Usage(format!("unknown env `{env_id}`; available: {DEFAULT_ENV_ID}")));
    }
    let env = EnvSpec::default();
    let kind = match quality {
        Quality::Random => BehaviorKind::Random,
        Quality::Medium => BehaviorKind::Medium,
        Quality::Expert => BehaviorKind::Expert,
    };
    let policy = BehaviorPolicy::for_kind(&env, kind, DATA_GAMMA)?;
    let full = generate_dataset(&env, &policy, episodes, seed)?;
    let returns = full.episode_returns();
    let mean_return = returns.iter().sum::<f64>() / returns.len() as f64;
    let ds: OfflineDataset = match tuples {
        Some((n, sampling)) => extract_tuples(&full, n, sampling, &mut Rng::derived(seed, 0x7u64 << 32))
            .map_err(|e| CliError::Usage(e.to_string()))?,
        None => full,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        io_at(std::fs::create_dir_all(dir), dir)?;
    }
    ds.save(out).map_err(|e| CliError::Failed(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} transitions ({} quality, {episodes} episodes, mean episode return {mean_return:.4}) to {}",
        ds.len(),
        kind.as_str(),
        out.display()
    );
    Ok(())
}

fn train(path: &Path) -> CliResult<()> {
    let cfg = ExperimentConfig::load(path)?;
    let cells = cfg.cells();
    let [cell] = cells.as_slice() else {
        return Err(CliError::Usage(format!("config describes {} runs; use `gorl sweep` for more than one", cells.len())));
    };
    let inputs = run::Inputs::load(&cfg)?;
    let started = Instant::now();
    let (record, per_1k) = run::run_cell(&cfg, &inputs, cell)?;
    eprintln!("train: {:.1}s total, {per_1k:.3}s per 1k steps", started.elapsed().as_secs_f64());
    let s = &record.summary;
    println!(
        "{} {} seed {}: final score {:.4} (raw return {:.4}) over the last {} evaluations; output in {}",
        s.algorithm.as_str(),
        record.mode,
        s.seed,
        s.final_score,
        s.final_raw_return,
        s.final_scores.len(),
        run::cell_dir(&cfg, cell).display()
    );
    Ok(())
}

fn sweep(path: &Path, force: bool, jobs: usize) -> CliResult<()> {
    let cfg = ExperimentConfig::load(path)?;
    run::run_sweep(&cfg, force, jobs)?;
    let (runs, tests) = report::write_report(&cfg.out_dir.join("runs").join(&cfg.label), &cfg.out_dir)?;
    print!("{}", report::results_table(&runs, &tests));
    Ok(())
}

fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut Vec<u8>) -> gorl_core::Result<()>) -> CliResult<PathBuf> {
    io_at(std::fs::create_dir_all(dir), dir)?;
    let mut buf = Vec::new();
    body(&mut buf)?;
    let path = dir.join(name);
    io_at(std::fs::write(&path, buf), &path)?;
    Ok(path)
}

fn verify(theorem: Theorem, seed: u64, trials: Option<usize>, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let outcome = match theorem {
        Theorem::One => {
            let r = verify_theorem1(trials.unwrap_or(100), seed)?;
            let path = write_file(out, "theorem1.csv", |w| r.write_csv(w))?;
            println!(
                "theorem 1: {} instances, min cosine {:.8}, max rel err {:.3e} -> {}",
                r.trials.len(),
                r.min_cosine,
                r.max_rel_err,
                path.display()
            );
            (r.pass(), r.failing_seeds())
        }
        Theorem::Two => {
            let mut reports = Vec::new();
            for cfg in theorem2_grid(trials.unwrap_or(10_000), seed) {
                reports.push(verify_theorem2(&cfg)?);
            }
            let path = write_file(out, "theorem2.csv", |w| {
                use std::io::Write;
                writeln!(w, "{BOUND_CSV_HEADER}")?;
                reports.iter().try_for_each(|r| r.write_csv_rows(&mut *w))
            })?;
            let mut failing = Vec::new();
            for r in &reports {
                let bad = r.rows.iter().filter(|row| !row.pass).count();
                println!(
                    "theorem 2 {}: {} of {} rows within the bound, slope {:.3}, r2 {:.4}{}",
                    r.label,
                    r.rows.len() - bad,
                    r.rows.len(),
                    r.slope,
                    r.r2,
                    if r.pass() { "" } else { "  FAIL" }
                );
                if !r.pass() {
                    failing.push(r.label.clone());
                }
            }
            println!("theorem 2 report -> {}", path.display());
            if !failing.is_empty() {
                eprintln!("failing cells: {}", failing.join(", "));
            }
            (failing.is_empty(), Vec::new())
        }
        Theorem::Gradients => {
            let r = verify_gradients(trials.unwrap_or(50), seed)?;
            let path = write_file(out, "gradients.csv", |w| r.write_csv(w))?;
            println!("gradients: {} checks, max rel err {:.3e} -> {}", r.checks.len(), r.max_rel_err(), path.display());
            (r.pass(), r.failing_seeds())
        }
    };
    eprintln!("verify: {:.1}s", started.elapsed().as_secs_f64());
    match outcome {
        (true, _) => Ok(()),
        (false, seeds) if !seeds.is_empty() => Err(CliError::Failed(format!("thresholds violated; failing instance seeds: {seeds:?}"))),
        (false, _) => Err(CliError::Failed("thresholds violated".into())),
    }
}
