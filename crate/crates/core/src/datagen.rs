//! Constrained sampling of task sequences, pressure-test construction and
//! JSONL dataset files.
//!
//! Every sequence draws from its own ChaCha8 stream: the dataset seed picks
//! the key and the sequence index picks the stream number. A dataset is
//! therefore a pure function of `(config, seed, index)` and sequences can be
//! produced in any order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{
    self, Bit, LangError, Operation, Split, TaskSequence, Token, TokenStream, IGNORE_INDEX,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("target length {0} cannot be reached by a valid sequence")]
    UnreachableLength(usize),
    #[error("pressure config infeasible: {0}")]
    ConfigInfeasible(String),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Schema { path: String, line: usize, reason: String },
}

/// Random source used throughout the crate.
pub type SeqRng = ChaCha8Rng;

/// The generator for sequence `index` of a dataset seeded with `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> SeqRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Classic Flip-Flop: no undo operator.
    Standard,
    Undo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub p_ignore: f64,
    pub p_read: f64,
    pub p_write: f64,
    pub p_undo: f64,
    pub id_len_range: [usize; 2],
    pub ood_len_range: [usize; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            p_ignore: 0.8,
            p_read: 0.1,
            p_write: 0.05,
            p_undo: 0.05,
            id_len_range: [3, 50],
            ood_len_range: [51, 100],
        }
    }
}

impl GenConfig {
    /// The same distribution with the undo mass moved onto writes.
    pub fn standard(&self) -> Self {
        Self { p_write: self.p_write + self.p_undo, p_undo: 0.0, ..self.clone() }
    }

    pub fn for_task(&self, task: Task) -> Self {
        match task {
            Task::Standard => self.standard(),
            Task::Undo => self.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ps = [self.p_ignore, self.p_read, self.p_write, self.p_undo];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig("probabilities must sum to 1".into()));
        }
        if self.p_read <= 0.0 && self.p_ignore <= 0.0 {
            return Err(DataError::InvalidConfig("need a one-token operation to fill lengths".into()));
        }
        let [id_lo, id_hi] = self.id_len_range;
        let [ood_lo, ood_hi] = self.ood_len_range;
        if id_lo < 3 || id_lo > id_hi || ood_lo > ood_hi {
            return Err(DataError::InvalidConfig("length ranges must be non-empty and start at 3 or more".into()));
        }
        if id_hi >= ood_lo {
            return Err(DataError::InvalidConfig("ID lengths must lie below OOD lengths".into()));
        }
        Ok(())
    }

    pub fn len_range(&self, split: Split) -> [usize; 2] {
        match split {
            Split::Ood => self.ood_len_range,
            Split::Id | Split::Pressure => self.id_len_range,
        }
    }
}

/// Draws an operation list of exactly `target_len` tokens.
///
/// After the opening write, each step draws from the four operations with the
/// configured weights restricted to the currently legal ones: undo needs depth
/// above one, and a write is not allowed when only two tokens remain (it would
/// leave no room for the final read). With one token left the read is forced.
pub fn sample_ops(cfg: &GenConfig, target_len: usize, rng: &mut impl Rng) -> Result<Vec<Operation>, DataError> {
    if target_len < 3 {
        return Err(DataError::UnreachableLength(target_len));
    }
    let mut ops = vec![Operation::Write(Bit::from_bool(rng.gen()))];
    let mut remaining = target_len - 2;
    let mut depth = 1usize;
    loop {
        if remaining == 1 {
            ops.push(Operation::Read);
            return Ok(ops);
        }
        let undo_ok = depth > 1;
        let write_ok = remaining >= 3;
        let weights = [
            cfg.p_ignore,
            cfg.p_read,
            if write_ok { cfg.p_write } else { 0.0 },
            if undo_ok { cfg.p_undo } else { 0.0 },
        ];
        let total: f64 = weights.iter().sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut choice = 0;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                choice = i;
                if draw < *w {
                    break;
                }
                draw -= w;
            }
        }
        let op = match choice {
            0 => Operation::Ignore,
            1 => Operation::Read,
            2 => Operation::Write(Bit::from_bool(rng.gen())),
            _ => Operation::Undo,
        };
        match op {
            Operation::Write(_) => depth += 1,
            Operation::Undo => depth -= 1,
            _ => {}
        }
        remaining -= op.token_cost();
        ops.push(op);
    }
}

pub fn sample_sequence(
    cfg: &GenConfig,
    target_len: usize,
    split: Split,
    rng: &mut impl Rng,
) -> Result<TaskSequence, DataError> {
    let ops = sample_ops(cfg, target_len, rng)?;
    Ok(lang::label(&ops, split)?)
}

/// Standard Flip-Flop: `cfg` with its undo probability folded into writes.
pub fn sample_standard_flipflop(
    cfg: &GenConfig,
    target_len: usize,
    split: Split,
    rng: &mut impl Rng,
) -> Result<TaskSequence, DataError> {
    sample_sequence(&cfg.standard(), target_len, split, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub sequences: Vec<TaskSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// The first `n` sequences (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        Dataset {
            split: self.split,
            seed: self.seed,
            sequences: self.sequences.iter().take(n).cloned().collect(),
        }
    }
}

/// `n` sequences with lengths uniform over the split's range.
pub fn make_split(cfg: &GenConfig, n: usize, split: Split, seed: u64) -> Result<Dataset, DataError> {
    cfg.validate()?;
    if n == 0 {
        return Err(DataError::InvalidConfig("dataset size must be at least 1".into()));
    }
    if split == Split::Pressure {
        return Err(DataError::InvalidConfig("pressure sets come from make_pressure_set".into()));
    }
    let [lo, hi] = cfg.len_range(split);
    let sequences = (0..n)
        .map(|i| {
            let mut rng = sequence_rng(seed, i as u64);
            let len = rng.gen_range(lo..=hi);
            sample_sequence(cfg, len, split, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { split, seed, sequences })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PressureConfig {
    pub rollback_depth: usize,
    pub total_len: usize,
    pub count: usize,
}

impl Default for PressureConfig {
    fn default() -> Self {
        Self { rollback_depth: 10, total_len: 50, count: 1000 }
    }
}

impl PressureConfig {
    /// Shortest stream holding `D + 1` writes, `D` undos and the read.
    pub fn min_len(&self) -> usize {
        3 * self.rollback_depth + 3
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.rollback_depth == 0 {
            return Err(DataError::ConfigInfeasible("rollback depth must be positive".into()));
        }
        if self.min_len() > self.total_len {
            return Err(DataError::ConfigInfeasible(format!(
                "depth {} needs at least {} tokens, total_len is {}",
                self.rollback_depth,
                self.min_len(),
                self.total_len
            )));
        }
        if self.total_len > 50 {
            return Err(DataError::ConfigInfeasible("pressure sequences stay within 50 tokens".into()));
        }
        Ok(())
    }
}

/// Build phase of `D + 1` writes, `D` undos, ignore padding, final read.
pub fn pressure_ops(pcfg: &PressureConfig, rng: &mut impl Rng) -> Result<Vec<Operation>, DataError> {
    pcfg.validate()?;
    let d = pcfg.rollback_depth;
    let mut ops = Vec::with_capacity(pcfg.total_len);
    ops.extend((0..=d).map(|_| Operation::Write(Bit::from_bool(rng.gen()))));
    ops.extend(std::iter::repeat_n(Operation::Undo, d));
    ops.extend(std::iter::repeat_n(Operation::Ignore, pcfg.total_len - pcfg.min_len()));
    ops.push(Operation::Read);
    Ok(ops)
}

pub fn build_pressure_sequence(pcfg: &PressureConfig, rng: &mut impl Rng) -> Result<TaskSequence, DataError> {
    let ops = pressure_ops(pcfg, rng)?;
    Ok(lang::label(&ops, Split::Pressure)?)
}

pub fn make_pressure_set(pcfg: &PressureConfig, seed: u64) -> Result<Dataset, DataError> {
    pcfg.validate()?;
    let sequences = (0..pcfg.count)
        .map(|i| build_pressure_sequence(pcfg, &mut sequence_rng(seed, i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { split: Split::Pressure, seed, sequences })
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    tokens: Vec<i64>,
    labels: Vec<i64>,
    split: String,
    seed: u64,
}

fn record_line(seq: &TaskSequence, seed: u64) -> String {
    let rec = Record {
        tokens: seq.tokens.ids().into_iter().map(|i| i as i64).collect(),
        labels: seq.labels.clone(),
        split: seq.split.as_str().to_string(),
        seed,
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

/// The exact bytes `write_jsonl` produces.
pub fn to_jsonl(ds: &Dataset) -> String {
    let mut out = String::new();
    for seq in &ds.sequences {
        out.push_str(&record_line(seq, ds.seed));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for seq in &ds.sequences {
        writeln!(w, "{}", record_line(seq, ds.seed)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_record(line: &str) -> Result<(TaskSequence, u64), String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let split = Split::parse(&rec.split).ok_or_else(|| format!("unknown split {:?}", rec.split))?;
    if rec.tokens.len() != rec.labels.len() {
        return Err("tokens and labels differ in length".into());
    }
    let tokens = TokenStream::from_ids(&rec.tokens).map_err(|e| e.to_string())?;
    let ops = tokens.decode();
    lang::validate_ops(&ops).map_err(|r| r.to_string())?;
    for (pos, (&t, &l)) in rec.tokens.iter().zip(&rec.labels).enumerate() {
        let is_read = t == Token::R.id() as i64;
        if is_read != (l != IGNORE_INDEX) {
            return Err(format!("label at position {pos} does not match the read mask"));
        }
    }
    let expected = lang::label(&ops, split).map_err(|e| e.to_string())?;
    if expected.labels != rec.labels {
        return Err("labels disagree with the stack oracle".into());
    }
    Ok((expected, rec.seed))
}

/// Reads a dataset file; any bad line rejects the whole file.
pub fn read_jsonl(path: &Path) -> Result<Dataset, DataError> {
    let name = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DataError::Io { path: name.clone(), source })?;
    let mut sequences = Vec::new();
    let mut meta: Option<(Split, u64)> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataError::Io { path: name.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |reason: String| DataError::Schema { path: name.clone(), line: line_no, reason };
        let (seq, seed) = parse_record(&line).map_err(schema)?;
        match meta {
            None => meta = Some((seq.split, seed)),
            Some((split, s)) if split != seq.split || s != seed => {
                return Err(schema("split or seed differs from earlier records".into()));
            }
            Some(_) => {}
        }
        sequences.push(seq);
    }
    let (split, seed) = meta.ok_or_else(|| DataError::Schema {
        path: name.clone(),
        line: 0,
        reason: "file holds no records".into(),
    })?;
    Ok(Dataset { split, seed, sequences })
}
