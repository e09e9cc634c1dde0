//! Experiment configuration: a flat JSON object holding any `TrainConfig`
//! field plus the sweep axes and file locations below.

use std::path::{Path, PathBuf};

use gorl_core::trainer::{Mode, TrainConfig};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{io_at, CliError, CliResult};

pub const SEED_ENV: &str = "GORL_SEED";

/// Keys owned by the experiment layer rather than by `TrainConfig`.
const EXPERIMENT_KEYS: [&str; 9] = [
    "dataset",
    "guide_data",
    "label",
    "out_dir",
    "modes",
    "fixed_weights",
    "expert_sizes",
    "expert_seed",
    "seeds",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// Offline data files, concatenated in order.
    pub dataset: Vec<PathBuf>,
    /// Expert set G.
    pub guide_data: Option<PathBuf>,
    /// Dataset name in result tables.
    pub label: String,
    pub out_dir: PathBuf,
    pub modes: Vec<Mode>,
    pub fixed_weights: Vec<f64>,
    /// Sizes of G subsets drawn for modes that use G; empty uses all of G.
    pub expert_sizes: Vec<usize>,
    pub expert_seed: u64,
    pub seeds: Vec<u64>,
}

/// One training run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub mode: Mode,
    pub seed: u64,
    pub expert_size: Option<usize>,
}

impl Cell {
    pub fn mode_label(&self) -> String {
        match self.expert_size {
            Some(k) => format!("{}@g{k}", self.mode.label()),
            None => self.mode.label(),
        }
    }

    pub fn id(&self) -> String {
        format!("{}_s{}", self.mode_label().replace('@', "_"), self.seed)
    }
}

pub fn uses_guide_data(mode: Mode) -> bool {
    matches!(mode, Mode::Gorl | Mode::MixedBaseline)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = io_at(std::fs::read_to_string(path), path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, std::env::var(SEED_ENV).ok().as_deref())
    }

    /// Parses and validates, listing every problem found. Relative paths
    /// resolve against `base`; `env_seed` is used only when the document
    /// names neither `seed` nor `seeds`.
    pub fn parse(text: &str, base: &Path, env_seed: Option<&str>) -> CliResult<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
        let Value::Object(doc) = doc else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        let train_keys = train_keys();
        let mut problems = Vec::new();
        let unknown: Vec<&String> = doc
            .keys()
            .filter(|k| !EXPERIMENT_KEYS.contains(&k.as_str()) && !train_keys.contains(k))
            .collect();
        for k in unknown {
            problems.push(format!("unknown key `{k}`"));
        }

        let mut train_doc: Map<String, Value> = doc.iter().filter(|(k, _)| train_keys.contains(k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let has_seed = doc.contains_key("seed") || doc.contains_key("seeds");
        if let (false, Some(s)) = (has_seed, env_seed) {
            match s.trim().parse::<u64>() {
                Ok(v) => {
                    train_doc.insert("seed".into(), Value::from(v));
                }
                Err(_) => problems.push(format!("{SEED_ENV}={s:?} is not an unsigned integer")),
            }
        }
        let mut train = TrainConfig::default();
        for (k, v) in &train_doc {
            let mut one = Map::new();
            one.insert(k.clone(), v.clone());
            if let Err(e) = serde_json::from_value::<TrainConfig>(Value::Object(one)) {
                problems.push(format!("`{k}`: {e}"));
            }
        }
        if problems.is_empty() {
            match serde_json::from_value::<TrainConfig>(Value::Object(train_doc)) {
                Ok(t) => train = t,
                Err(e) => problems.push(e.to_string()),
            }
        }

        let dataset: Vec<PathBuf> = match doc.get("dataset") {
            None => {
                problems.push("missing key `dataset`".into());
                Vec::new()
            }
            Some(Value::String(s)) => vec![PathBuf::from(s)],
            Some(v) => field::<Vec<PathBuf>>(v, "dataset", &mut problems).unwrap_or_default(),
        };
        if doc.contains_key("dataset") && dataset.is_empty() && problems.iter().all(|p| !p.starts_with("`dataset`")) {
            problems.push("`dataset` must name at least one file".into());
        }
        let guide_data: Option<PathBuf> = opt_field(&doc, "guide_data", &mut problems);
        let out_dir: PathBuf = opt_field(&doc, "out_dir", &mut problems).unwrap_or_else(|| PathBuf::from("runs"));
        let modes: Vec<Mode> = opt_field(&doc, "modes", &mut problems).unwrap_or_default();
        let fixed_weights: Vec<f64> = opt_field(&doc, "fixed_weights", &mut problems).unwrap_or_default();
        let expert_sizes: Vec<usize> = opt_field(&doc, "expert_sizes", &mut problems).unwrap_or_default();
        let expert_seed: u64 = opt_field(&doc, "expert_seed", &mut problems).unwrap_or(0);
        let seeds: Vec<u64> = opt_field(&doc, "seeds", &mut problems).unwrap_or_else(|| vec![train.seed]);
        let label: Option<String> = opt_field(&doc, "label", &mut problems);

        for w in &fixed_weights {
            if !(0.0..=1.0).contains(w) {
                problems.push(format!("fixed weight {w} outside [0, 1]"));
            }
        }
        if expert_sizes.contains(&0) {
            problems.push("expert sizes must be positive".into());
        }
        if seeds.is_empty() {
            problems.push("`seeds` must not be empty".into());
        }
        let mut seen = seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != seeds.len() {
            problems.push("`seeds` contains duplicates".into());
        }
        if problems.is_empty() {
            if let Err(e) = train.validate() {
                problems.push(e.to_string());
            }
        }
        let all_modes: Vec<Mode> = if modes.is_empty() && fixed_weights.is_empty() { vec![train.mode] } else { modes.clone() };
        let needs_g = all_modes.iter().any(|m| uses_guide_data(*m));
        if needs_g && guide_data.is_none() && problems.is_empty() {
            problems.push("modes gorl and mixed_baseline need `guide_data`".into());
        }
        if !problems.is_empty() {
            return Err(CliError::Usage(format!("config has {} problem(s):\n  {}", problems.len(), problems.join("\n  "))));
        }

        let label = label.unwrap_or_else(|| {
            dataset
                .iter()
                .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
                .collect::<Vec<_>>()
                .join("+")
        });
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        Ok(Self {
            train,
            dataset: dataset.into_iter().map(resolve).collect(),
            guide_data: guide_data.map(resolve),
            label,
            out_dir: resolve(out_dir),
            modes: all_modes,
            fixed_weights,
            expert_sizes,
            expert_seed,
            seeds,
        })
    }

    /// Every run of the sweep: modes in order, then fixed weights, each
    /// crossed with expert sizes (for modes that use G) and seeds.
    pub fn cells(&self) -> Vec<Cell> {
        let modes = self.modes.iter().copied().chain(self.fixed_weights.iter().map(|w| Mode::FixedWeight(*w)));
        let mut cells = Vec::new();
        for mode in modes {
            let sizes: Vec<Option<usize>> = if uses_guide_data(mode) && !self.expert_sizes.is_empty() {
                self.expert_sizes.iter().map(|k| Some(*k)).collect()
            } else {
                vec![None]
            };
            for expert_size in sizes {
                for &seed in &self.seeds {
                    cells.push(Cell { mode, seed, expert_size });
                }
            }
        }
        cells
    }
}

fn train_keys() -> Vec<String> {
    match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => unreachable!("TrainConfig serializes to an object"),
    }
}

fn field<T: DeserializeOwned>(v: &Value, key: &str, problems: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            problems.push(format!("`{key}`: {e}"));
            None
        }
    }
}

fn opt_field<T: DeserializeOwned>(doc: &Map<String, Value>, key: &str, problems: &mut Vec<String>) -> Option<T> {
    doc.get(key).and_then(|v| field(v, key, problems))
}
