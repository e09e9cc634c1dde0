//! Executing training runs and sweeps, and the files each run leaves behind.

use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use gorl_core::datasets::{extract_tuples, mix, OfflineDataset, TupleSampling};
use gorl_core::envs::EnvSpec;
use gorl_core::numeric::Rng;
use gorl_core::stats::{load_or_compute_refs, ScoreRefs, REF_EPISODES, REF_SEED};
use gorl_core::trainer::{train, RunLog, RunSummary};
use serde::{Deserialize, Serialize};

use crate::config::{uses_guide_data, Cell, ExperimentConfig};
use crate::error::{io_at, CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "log.json";
pub const RUN_CSV_FILE: &str = "run.csv";
pub const REFS_FILE: &str = "score_refs.json";

/// What `summary.json` holds: the trainer summary plus the sweep context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub dataset: String,
    /// Mode label including the expert-set size, if one was drawn.
    pub mode: String,
    pub expert_size: Option<usize>,
    pub summary: RunSummary,
}

/// Inputs shared by every cell of an experiment.
pub struct Inputs {
    pub env: EnvSpec,
    pub d: OfflineDataset,
    pub g: Option<OfflineDataset>,
    pub refs: ScoreRefs,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> CliResult<Self> {
        let env = EnvSpec::default();
        let mut d: Option<OfflineDataset> = None;
        for path in &cfg.dataset {
            let part = load_dataset(path)?;
            d = Some(match d {
                None => part,
                Some(prev) => mix(&prev, &part)?,
            });
        }
        let d = d.ok_or_else(|| CliError::Usage("no dataset given".into()))?;
        let g = cfg.guide_data.as_deref().map(load_dataset).transpose()?;
        if let (Some(g), Some(&k)) = (&g, cfg.expert_sizes.iter().max()) {
            if k > g.len() {
                return Err(CliError::Usage(format!("expert size {k} exceeds the {} tuples in guide_data", g.len())));
            }
        }
        io_at(std::fs::create_dir_all(&cfg.out_dir), &cfg.out_dir)?;
        let refs = load_or_compute_refs(&cfg.out_dir.join(REFS_FILE), &env, cfg.train.gamma, REF_EPISODES, REF_SEED)?;
        Ok(Self { env, d, g, refs })
    }

    /// G as seen by `cell`: a seeded uniform subset when a size is set.
    fn guide_for(&self, cfg: &ExperimentConfig, cell: &Cell) -> CliResult<Option<OfflineDataset>> {
        if !uses_guide_data(cell.mode) {
            return Ok(None);
        }
        let g = self.g.as_ref().ok_or_else(|| CliError::Usage("mode needs guide_data".into()))?;
        Ok(Some(match cell.expert_size {
            Some(k) => extract_tuples(g, k, TupleSampling::Uniform, &mut Rng::derived(cfg.expert_seed, k as u64))?,
            None => g.clone(),
        }))
    }
}

pub fn load_dataset(path: &Path) -> CliResult<OfflineDataset> {
    OfflineDataset::load(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn cell_dir(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cfg.out_dir.join("runs").join(&cfg.label).join(cell.id())
}

/// Trains one cell and writes `log.json`, `run.csv` and, last,
/// `summary.json`. Returns the record and mean seconds per 1000 steps.
pub fn run_cell(cfg: &ExperimentConfig, inputs: &Inputs, cell: &Cell) -> CliResult<(RunRecord, f64)> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.mode = cell.mode;
    train_cfg.seed = cell.seed;
    let g = inputs.guide_for(cfg, cell)?;
    let out = train(&train_cfg, &inputs.env, &inputs.d, g.as_ref(), &inputs.refs)?;
    let dir = cell_dir(cfg, cell);
    io_at(std::fs::create_dir_all(&dir), &dir)?;
    write_json(&dir.join(LOG_FILE), &out.log)?;
    let csv = dir.join(RUN_CSV_FILE);
    out.log.write_csv(BufWriter::new(io_at(std::fs::File::create(&csv), &csv)?))?;
    let record = RunRecord {
        dataset: cfg.label.clone(),
        mode: cell.mode_label(),
        expert_size: cell.expert_size,
        summary: out.summary,
    };
    write_json(&dir.join(SUMMARY_FILE), &record)?;
    let w = &out.log.wall_clock_per_1k;
    let per_1k = if w.is_empty() { 0.0 } else { w.iter().sum::<f64>() / w.len() as f64 };
    Ok((record, per_1k))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io_at(std::fs::write(path, text), path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = io_at(std::fs::read_to_string(path), path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

pub fn read_log(run_dir: &Path) -> CliResult<RunLog> {
    read_json(&run_dir.join(LOG_FILE))
}

/// Runs every cell whose summary is missing (or all of them with `force`),
/// using up to `jobs` worker threads. Cells are independent, so the files
/// each writes do not depend on scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, force: bool, jobs: usize) -> CliResult<Vec<RunRecord>> {
    let inputs = Inputs::load(cfg)?;
    let cells = cfg.cells();
    let todo: Vec<&Cell> = cells.iter().filter(|c| force || !cell_dir(cfg, c).join(SUMMARY_FILE).exists()).collect();
    eprintln!("sweep: {} cells, {} to run, {} already complete", cells.len(), todo.len(), cells.len() - todo.len());
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let started = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = todo.get(i) else { break };
                let t = Instant::now();
                match run_cell(cfg, &inputs, cell) {
                    Ok((r, per_1k)) => eprintln!(
                        "  {} final score {:.3} ({:.1}s, {:.3}s per 1k steps)",
                        cell.id(),
                        r.summary.final_score,
                        t.elapsed().as_secs_f64(),
                        per_1k
                    ),
                    Err(e) => failures.lock().unwrap().push(format!("{}: {e}", cell.id())),
                }
            });
        }
    });
    eprintln!("sweep: finished in {:.1}s", started.elapsed().as_secs_f64());
    let failures = failures.into_inner().unwrap();
    if !failures.is_empty() {
        return Err(CliError::Failed(format!("{} cell(s) failed:\n  {}", failures.len(), failures.join("\n  "))));
    }
    cells.iter().map(|c| read_json(&cell_dir(cfg, c).join(SUMMARY_FILE))).collect()
}
