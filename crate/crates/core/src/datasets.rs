//! Columnar transition storage, normalization, mixing, sampling and the
//! `GORLDS01` file format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! magic   8 bytes   "GORLDS01"
//! hlen    u32       length of the JSON header in bytes
//! header  hlen      UTF-8 JSON: version, state_dim, action_dim, n, columns, meta
//! states       n × state_dim  f64
//! actions      n × action_dim f64
//! next_states  n × state_dim  f64
//! rewards      n              f64
//! dones        n              f64 (0.0 or 1.0)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::BehaviorKind;
use crate::error::{Error, Result};
use crate::numeric::Rng;

pub const MAGIC: &[u8; 8] = b"GORLDS01";
pub const FORMAT_VERSION: u32 = 1;
pub const COLUMNS: [&str; 5] = ["states", "actions", "next_states", "rewards", "dones"];
pub const STD_FLOOR: f64 = 1e-3;

/// Contiguous block of transitions produced by one behavior policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub kind: BehaviorKind,
    pub seed: u64,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpan {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub sources: Vec<SourceSpan>,
    /// Complete episodes only; tuple subsets carry none.
    pub episodes: Vec<EpisodeSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    next_states: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<f64>,
    pub meta: DatasetMeta,
}

/// Gathered minibatch, flat row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub next_states: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    /// `[s, a]` rows, the critic's input layout.
    pub fn state_actions(&self) -> Vec<f64> {
        concat_rows(&self.states, self.state_dim, &self.actions, self.action_dim, self.len)
    }
}

/// Row-wise concatenation of two flat `(n × d)` buffers.
pub fn concat_rows(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (da + db));
    for i in 0..n {
        out.extend_from_slice(&a[i * da..(i + 1) * da]);
        out.extend_from_slice(&b[i * db..(i + 1) * db]);
    }
    out
}

impl OfflineDataset {
    pub fn empty(state_dim: usize, action_dim: usize) -> Self {
        Self::with_capacity(state_dim, action_dim, 0)
    }

    pub fn with_capacity(state_dim: usize, action_dim: usize, n: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::with_capacity(n * state_dim),
            actions: Vec::with_capacity(n * action_dim),
            next_states: Vec::with_capacity(n * state_dim),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            meta: DatasetMeta::default(),
        }
    }

    pub fn push(&mut self, s: &[f64], a: &[f64], s_next: &[f64], r: f64, done: bool) {
        assert_eq!(s.len(), self.state_dim);
        assert_eq!(a.len(), self.action_dim);
        assert_eq!(s_next.len(), self.state_dim);
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(a);
        self.next_states.extend_from_slice(s_next);
        self.rewards.push(r);
        self.dones.push(if done { 1.0 } else { 0.0 });
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn actions(&self) -> &[f64] {
        &self.actions
    }

    pub fn next_states(&self) -> &[f64] {
        &self.next_states
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn dones(&self) -> &[f64] {
        &self.dones
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Behavior kind of transition `i`, from the source metadata.
    pub fn bucket_of(&self, i: usize) -> Option<BehaviorKind> {
        self.meta
            .sources
            .iter()
            .find(|s| i >= s.start && i < s.start + s.len)
            .map(|s| s.kind)
    }

    /// Indices grouped by behavior kind; empty when metadata is missing.
    pub fn bucket_indices(&self) -> Vec<(BehaviorKind, Vec<usize>)> {
        let mut out: Vec<(BehaviorKind, Vec<usize>)> = Vec::new();
        for src in &self.meta.sources {
            let range = src.start..src.start + src.len;
            match out.iter_mut().find(|(k, _)| *k == src.kind) {
                Some((_, v)) => v.extend(range),
                None => out.push((src.kind, range.collect())),
            }
        }
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.states.len() != n * self.state_dim
            || self.next_states.len() != n * self.state_dim
            || self.actions.len() != n * self.action_dim
            || self.dones.len() != n
        {
            return Err(Error::Dimension("dataset columns have inconsistent lengths".into()));
        }
        for (name, col) in [
            ("states", &self.states),
            ("actions", &self.actions),
            ("next_states", &self.next_states),
            ("rewards", &self.rewards),
            ("dones", &self.dones),
        ] {
            crate::error::ensure_finite(col, name)?;
        }
        Ok(())
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut b = Batch {
            len: indices.len(),
            state_dim: sd,
            action_dim: ad,
            states: Vec::with_capacity(indices.len() * sd),
            actions: Vec::with_capacity(indices.len() * ad),
            next_states: Vec::with_capacity(indices.len() * sd),
            rewards: Vec::with_capacity(indices.len()),
            dones: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            b.states.extend_from_slice(self.state(i));
            b.actions.extend_from_slice(self.action(i));
            b.next_states.extend_from_slice(self.next_state(i));
            b.rewards.push(self.rewards[i]);
            b.dones.push(self.dones[i]);
        }
        b
    }

    /// Dataset containing only `indices`, in order. Episode metadata is
    /// dropped; source spans are rebuilt from per-transition buckets.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.state_dim, self.action_dim, indices.len());
        let mut sources: Vec<SourceSpan> = Vec::new();
        for (j, &i) in indices.iter().enumerate() {
            out.push(
                self.state(i),
                self.action(i),
                self.next_state(i),
                self.rewards[i],
                self.dones[i] != 0.0,
            );
            let src = self.meta.sources.iter().find(|s| i >= s.start && i < s.start + s.len);
            if let Some(src) = src {
                match sources.last_mut() {
                    Some(last) if last.kind == src.kind && last.seed == src.seed && last.start + last.len == j => {
                        last.len += 1
                    }
                    _ => sources.push(SourceSpan {
                        kind: src.kind,
                        seed: src.seed,
                        start: j,
                        len: 1,
                    }),
                }
            }
        }
        out.meta = DatasetMeta {
            env_id: self.meta.env_id.clone(),
            sources,
            episodes: Vec::new(),
        };
        out
    }

    /// Undiscounted return of every complete episode recorded in the metadata.
    pub fn episode_returns(&self) -> Vec<f64> {
        self.meta
            .episodes
            .iter()
            .map(|e| self.rewards[e.start..e.start + e.len].iter().sum())
            .collect()
    }

    /// Copy with states and next states mapped through `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        if stats.mean.len() != self.state_dim {
            return Err(Error::Dimension("normalization stats do not match state dim".into()));
        }
        let mut out = self.clone();
        stats.apply_in_place(&mut out.states);
        stats.apply_in_place(&mut out.next_states);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            version: FORMAT_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            n: self.len(),
            columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Io(e.to_string()))?;
        let n = self.len();
        let mut buf = Vec::with_capacity(12 + json.len() + 8 * n * (2 * self.state_dim + self.action_dim + 2));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for col in [&self.states, &self.actions, &self.next_states, &self.rewards, &self.dones] {
            for v in col.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}, expected \"GORLDS01\"", String::from_utf8_lossy(magic)),
            });
        }
        let hlen = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let header_at = cur.pos as u64;
        let header: Header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::Format {
            offset: header_at,
            msg: format!("invalid JSON header: {e}"),
        })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: header_at,
                msg: format!("unsupported format version {}", header.version),
            });
        }
        if header.columns != COLUMNS {
            return Err(Error::Format {
                offset: header_at,
                msg: format!("unexpected column list {:?}", header.columns),
            });
        }
        let (n, sd, ad) = (header.n, header.state_dim, header.action_dim);
        let mut read_col = |len: usize| -> Result<Vec<f64>> {
            let raw = cur.take(len * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let states = read_col(n * sd)?;
        let actions = read_col(n * ad)?;
        let next_states = read_col(n * sd)?;
        let rewards = read_col(n)?;
        let dones = read_col(n)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - cur.pos),
            });
        }
        let ds = Self {
            state_dim: sd,
            action_dim: ad,
            states,
            actions,
            next_states,
            rewards,
            dones,
            meta: header.meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// One transition per row with a header row; the last column is the
    /// behavior kind when known.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header: Vec<String> = Vec::new();
        header.extend((0..self.state_dim).map(|i| format!("s{i}")));
        header.extend((0..self.action_dim).map(|i| format!("a{i}")));
        header.extend((0..self.state_dim).map(|i| format!("ns{i}")));
        header.extend(["reward", "done", "kind"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = Vec::new();
            row.extend(self.state(i).iter().map(|v| v.to_string()));
            row.extend(self.action(i).iter().map(|v| v.to_string()));
            row.extend(self.next_state(i).iter().map(|v| v.to_string()));
            row.push(self.rewards[i].to_string());
            row.push(self.dones[i].to_string());
            row.push(self.bucket_of(i).map_or("", |k| k.as_str()).to_string());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    state_dim: usize,
    action_dim: usize,
    n: usize,
    columns: Vec<String>,
    meta: DatasetMeta,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: needed {len} bytes, {} remain", self.bytes.len() - self.pos),
            }),
        }
    }
}

/// Per-dimension state mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Stats of the `states` column; std floored at 1e-3.
    pub fn compute(ds: &OfflineDataset) -> Result<Self> {
        let n = ds.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("normalization needs at least 2 transitions, got {n}")));
        }
        let d = ds.state_dim();
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(ds.state(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((acc, v), m) in var.iter_mut().zip(ds.state(i)).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    fn apply_in_place(&self, flat: &mut [f64]) {
        let d = self.mean.len();
        for row in flat.chunks_exact_mut(d) {
            for ((v, m), sd) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / sd;
            }
        }
    }
}

/// `n` indices drawn uniformly with replacement from `0..len`.
pub fn sample_batch(len: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::InvalidInput("cannot sample from an empty dataset".into()));
    }
    Ok((0..n).map(|_| rng.below(len)).collect())
}

/// Concatenation of `d` followed by `g`; metadata spans are shifted.
pub fn mix(d: &OfflineDataset, g: &OfflineDataset) -> Result<OfflineDataset> {
    if g.is_empty() {
        return Ok(d.clone());
    }
    if d.state_dim != g.state_dim || d.action_dim != g.action_dim {
        return Err(Error::Dimension(format!(
            "cannot mix ({}, {}) with ({}, {})",
            d.state_dim, d.action_dim, g.state_dim, g.action_dim
        )));
    }
    let off = d.len();
    let mut out = d.clone();
    out.states.extend_from_slice(&g.states);
    out.actions.extend_from_slice(&g.actions);
    out.next_states.extend_from_slice(&g.next_states);
    out.rewards.extend_from_slice(&g.rewards);
    out.dones.extend_from_slice(&g.dones);
    out.meta.sources.extend(g.meta.sources.iter().map(|s| SourceSpan {
        start: s.start + off,
        ..s.clone()
    }));
    out.meta.episodes.extend(g.meta.episodes.iter().map(|e| EpisodeSpan {
        start: e.start + off,
        len: e.len,
    }));
    if out.meta.env_id.is_empty() {
        out.meta.env_id = g.meta.env_id.clone();
    }
    Ok(out)
}

/// How individual tuples are drawn out of a larger (expert) dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TupleSampling {
    /// Distinct transitions uniformly across all episodes.
    #[default]
    Uniform,
    /// One contiguous run starting at a random offset.
    Contiguous,
}

pub fn extract_tuples(ds: &OfflineDataset, n: usize, mode: TupleSampling, rng: &mut Rng) -> Result<OfflineDataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::InvalidInput(format!("cannot extract {n} tuples from {}", ds.len())));
    }
    let indices: Vec<usize> = match mode {
        TupleSampling::Uniform => {
            let mut idx = rng.choose_distinct(ds.len(), n);
            idx.sort_unstable();
            idx
        }
        TupleSampling::Contiguous => {
            let start = rng.below(ds.len() - n + 1);
            (start..start + n).collect()
        }
    };
    Ok(ds.subset(&indices))
}
