//! Sequence-level evaluation, the pressure test and the two causal probes.
//!
//! Both probes work on counterfactual copies of pressure sequences the
//! predictor got fully right:
//!
//! * the toggle probe flips the operand of a write that is popped before the
//!   read, which cannot change the true answer. A predictor that changes its
//!   output is using the discarded bit.
//! * the history probe flips the buried write that determines the answer,
//!   which always flips the true answer. A predictor that does not follow is
//!   not reading the stored history.
//!
//! Every counterfactual is checked against the stack oracle before use.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{self, DataError, Dataset, PressureConfig};
use crate::lang::{self, Bit, LangError, Operation, Split, TaskSequence, Token, TokenStream};
use crate::model::{self, ModelError, ParamSet, TokenBatch};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lang(#[from] LangError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sequence {index} has no write that is popped before a read")]
    NoEligibleWrite { index: usize },
    #[error("counterfactual for sequence {index} broke the probe contract: {reason}")]
    Unsound { index: usize, reason: String },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

/// The predicted answer at one read. `None` means the predictor emitted a
/// token that is not a bit (only possible in full-vocabulary mode).
pub type ReadPrediction = Option<Bit>;

/// Anything that answers the reads of a token stream.
pub trait Predictor {
    fn name(&self) -> String;

    /// One prediction per `r` token, for every stream.
    fn predict(&self, streams: &[&TokenStream]) -> Result<Vec<Vec<ReadPrediction>>, ProbeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Argmax over the two bit-token logits only.
    #[default]
    Bits,
    /// Argmax over the whole vocabulary; non-bit winners count as wrong.
    FullVocab,
}

/// Wraps trained parameters.
pub struct ModelPredictor {
    pub params: ParamSet<f32>,
    pub mode: PredictionMode,
    pub batch_size: usize,
    pub label: String,
}

impl ModelPredictor {
    pub fn new(params: ParamSet<f32>) -> Self {
        let label = format!("model({}-layer)", params.config.n_layers);
        Self { params, mode: PredictionMode::Bits, batch_size: 64, label }
    }
}

impl Predictor for ModelPredictor {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn predict(&self, streams: &[&TokenStream]) -> Result<Vec<Vec<ReadPrediction>>, ProbeError> {
        let mut out = Vec::with_capacity(streams.len());
        let vocab = self.params.config.vocab_size;
        for chunk in streams.chunks(self.batch_size.max(1)) {
            let batch = TokenBatch::from_streams(chunk.iter().copied());
            let logits = model::logits(&self.params, &batch)?;
            let data = logits.data();
            for (b, s) in chunk.iter().enumerate() {
                let preds = s
                    .read_positions()
                    .into_iter()
                    .map(|pos| {
                        let row = &data[(b * batch.time + pos) * vocab..(b * batch.time + pos + 1) * vocab];
                        match self.mode {
                            PredictionMode::Bits => {
                                let (z, o) = (row[Token::Bit0.id()], row[Token::Bit1.id()]);
                                Some(if o > z { Bit::One } else { Bit::Zero })
                            }
                            PredictionMode::FullVocab => {
                                let mut best = 0;
                                for j in 1..vocab {
                                    if row[j] > row[best] {
                                        best = j;
                                    }
                                }
                                Token::from_id(best as i64).and_then(Token::as_bit)
                            }
                        }
                    })
                    .collect();
                out.push(preds);
            }
        }
        Ok(out)
    }
}

/// Symbolic predictors used to calibrate the probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// True stack semantics.
    Oracle,
    /// One active bit: writes set it, undo inverts it.
    Toggle,
    Constant(Bit),
    /// Uniform bits, fixed per (seed, input).
    Random(u64),
}

impl Policy {
    pub fn parse(s: &str) -> Option<Policy> {
        Some(match s {
            "oracle" => Policy::Oracle,
            "toggle" => Policy::Toggle,
            "constant" | "constant0" => Policy::Constant(Bit::Zero),
            "constant1" => Policy::Constant(Bit::One),
            "random" => Policy::Random(0),
            _ => {
                let seed = s.strip_prefix("random:")?.parse().ok()?;
                Policy::Random(seed)
            }
        })
    }

    /// Answers for a decoded operation list.
    pub fn answer_ops(&self, ops: &[Operation], tokens: &TokenStream) -> Vec<Bit> {
        match self {
            Policy::Oracle => {
                let mut stack = Vec::new();
                let mut out = Vec::new();
                for op in ops {
                    match op {
                        Operation::Write(b) => stack.push(*b),
                        Operation::Undo => {
                            if stack.len() > 1 {
                                stack.pop();
                            }
                        }
                        Operation::Read => out.push(stack.last().copied().unwrap_or(Bit::Zero)),
                        Operation::Ignore => {}
                    }
                }
                out
            }
            Policy::Toggle => {
                let mut state = Bit::Zero;
                let mut out = Vec::new();
                for op in ops {
                    match op {
                        Operation::Write(b) => state = *b,
                        Operation::Undo => state = state.flipped(),
                        Operation::Read => out.push(state),
                        Operation::Ignore => {}
                    }
                }
                out
            }
            Policy::Constant(b) => ops.iter().filter(|o| **o == Operation::Read).map(|_| *b).collect(),
            Policy::Random(seed) => {
                // FNV-1a over the token ids keys the stream, so equal inputs get equal answers.
                let mut h: u64 = 0xcbf29ce484222325;
                for t in tokens.tokens() {
                    h ^= t.id() as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
                ops.iter().filter(|o| **o == Operation::Read).map(|_| Bit::from_bool(rng.gen())).collect()
            }
        }
    }
}

impl Predictor for Policy {
    fn name(&self) -> String {
        match self {
            Policy::Oracle => "oracle".into(),
            Policy::Toggle => "toggle".into(),
            Policy::Constant(b) => format!("constant{b}"),
            Policy::Random(s) => format!("random:{s}"),
        }
    }

    fn predict(&self, streams: &[&TokenStream]) -> Result<Vec<Vec<ReadPrediction>>, ProbeError> {
        Ok(streams
            .iter()
            .map(|s| self.answer_ops(&s.decode(), s).into_iter().map(Some).collect())
            .collect())
    }
}

pub fn reference_policies(random_seed: u64) -> Vec<Policy> {
    vec![Policy::Oracle, Policy::Toggle, Policy::Constant(Bit::Zero), Policy::Random(random_seed)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub min_len: usize,
    pub max_len: usize,
    pub n_sequences: usize,
    pub n_correct: usize,
    pub exact_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub predictor: String,
    pub n_sequences: usize,
    pub n_correct: usize,
    pub exact_match: f64,
    /// Fraction of individual reads answered correctly.
    pub read_accuracy: f64,
    pub buckets: Vec<LengthBucket>,
}

/// Width of the per-length buckets in [`EvalReport`].
pub const BUCKET_WIDTH: usize = 10;

fn sequence_correct(seq: &TaskSequence, preds: &[ReadPrediction]) -> (bool, usize) {
    let answers = seq.answers();
    let hits = answers.iter().zip(preds).filter(|(a, p)| Some(**a) == **p).count();
    (hits == answers.len() && preds.len() == answers.len(), hits)
}

/// Per-sequence exact-match verdicts.
pub fn verdicts(pred: &dyn Predictor, seqs: &[&TaskSequence]) -> Result<Vec<bool>, ProbeError> {
    let streams: Vec<&TokenStream> = seqs.iter().map(|s| &s.tokens).collect();
    let preds = pred.predict(&streams)?;
    Ok(seqs.iter().zip(&preds).map(|(s, p)| sequence_correct(s, p).0).collect())
}

/// A sequence scores 1 when every read is answered correctly.
pub fn exact_match(pred: &dyn Predictor, ds: &Dataset) -> Result<EvalReport, ProbeError> {
    if ds.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let streams: Vec<&TokenStream> = ds.sequences.iter().map(|s| &s.tokens).collect();
    let preds = pred.predict(&streams)?;
    let mut n_correct = 0;
    let (mut reads, mut read_hits) = (0usize, 0usize);
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (seq, p) in ds.sequences.iter().zip(&preds) {
        let (ok, hits) = sequence_correct(seq, p);
        reads += seq.answers().len();
        read_hits += hits;
        n_correct += ok as usize;
        let entry = buckets.entry((seq.len() - 1) / BUCKET_WIDTH).or_default();
        entry.0 += 1;
        entry.1 += ok as usize;
    }
    let buckets = buckets
        .into_iter()
        .map(|(b, (n, c))| LengthBucket {
            min_len: b * BUCKET_WIDTH + 1,
            max_len: (b + 1) * BUCKET_WIDTH,
            n_sequences: n,
            n_correct: c,
            exact_match: c as f64 / n as f64,
        })
        .collect();
    Ok(EvalReport {
        split: ds.split,
        predictor: pred.name(),
        n_sequences: ds.len(),
        n_correct,
        exact_match: n_correct as f64 / ds.len() as f64,
        read_accuracy: if reads == 0 { 1.0 } else { read_hits as f64 / reads as f64 },
        buckets,
    })
}

/// Outcome of the pressure test before any ablation.
#[derive(Debug, Clone)]
pub struct PressureRun {
    pub dataset: Dataset,
    pub correct: Vec<bool>,
    pub predictions: Vec<Vec<ReadPrediction>>,
}

impl PressureRun {
    pub fn n_correct(&self) -> usize {
        self.correct.iter().filter(|c| **c).count()
    }

    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            0.0
        } else {
            self.n_correct() as f64 / self.correct.len() as f64
        }
    }

    /// Indices of fully-correct sequences.
    pub fn correct_set(&self) -> Vec<usize> {
        self.correct.iter().enumerate().filter(|(_, c)| **c).map(|(i, _)| i).collect()
    }
}

pub fn run_pressure_test(pred: &dyn Predictor, pcfg: &PressureConfig, seed: u64) -> Result<PressureRun, ProbeError> {
    let dataset = datagen::make_pressure_set(pcfg, seed)?;
    let streams: Vec<&TokenStream> = dataset.sequences.iter().map(|s| &s.tokens).collect();
    let predictions = pred.predict(&streams)?;
    let correct = dataset.sequences.iter().zip(&predictions).map(|(s, p)| sequence_correct(s, p).0).collect();
    Ok(PressureRun { dataset, correct, predictions })
}

/// Which popped write the toggle probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToggleTarget {
    /// The most recent popped write: the bit a toggle shortcut keys on.
    #[default]
    MostRecent,
    /// The popped write pushed at the lowest stack position.
    Deepest,
}

/// Write positions (indices into `ops`) whose value is popped before any
/// later read, with the stack depth at which each was pushed.
fn popped_writes(ops: &[Operation]) -> Vec<(usize, usize)> {
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut eligible = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Operation::Write(_) => {
                let depth = stack.len() + 1;
                stack.push((i, depth));
                open.push(i);
            }
            Operation::Undo => {
                if let Some((w, depth)) = stack.pop() {
                    if open.contains(&w) {
                        eligible.push((w, depth));
                    }
                }
            }
            // A write that is visible at a read is no longer "discarded".
            Operation::Read => open.clear(),
            Operation::Ignore => {}
        }
    }
    eligible
}

/// Index into `ops` of the write that is on top of the stack at the final read.
fn answer_write(ops: &[Operation]) -> Option<usize> {
    let mut stack = Vec::new();
    for (i, op) in ops.iter().enumerate() {
        match op {
            Operation::Write(_) => stack.push(i),
            Operation::Undo => {
                stack.pop();
            }
            _ => {}
        }
    }
    stack.last().copied()
}

fn flip_write(ops: &[Operation], at: usize) -> Vec<Operation> {
    let mut out = ops.to_vec();
    if let Operation::Write(b) = out[at] {
        out[at] = Operation::Write(b.flipped());
    }
    out
}

/// Events counted by one probe over the correct set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRate {
    pub events: usize,
    pub total: usize,
    /// `events / total`; `None` when the correct set is empty.
    pub rate: Option<f64>,
    /// Per examined sequence: (pressure index, event flag).
    pub flags: Vec<(usize, bool)>,
}

impl ProbeRate {
    fn from_flags(flags: Vec<(usize, bool)>) -> Self {
        let events = flags.iter().filter(|(_, f)| *f).count();
        let total = flags.len();
        let rate = (total > 0).then(|| events as f64 / total as f64);
        Self { events, total, rate, flags }
    }
}

/// Flips a popped write in every correct sequence; an event is a change in
/// the predictor's output.
pub fn toggle_probe(pred: &dyn Predictor, run: &PressureRun, target: ToggleTarget) -> Result<ProbeRate, ProbeError> {
    let mut variants = Vec::new();
    let indices = run.correct_set();
    for &i in &indices {
        let seq = &run.dataset.sequences[i];
        let ops = seq.ops();
        let eligible = popped_writes(&ops);
        let chosen = match target {
            ToggleTarget::MostRecent => eligible.iter().max_by_key(|(w, _)| *w),
            ToggleTarget::Deepest => eligible.iter().min_by_key(|(w, d)| (*d, *w)),
        }
        .ok_or(ProbeError::NoEligibleWrite { index: i })?;
        let cf = flip_write(&ops, chosen.0);
        if lang::oracle_answers(&cf)? != lang::oracle_answers(&ops)? {
            return Err(ProbeError::Unsound { index: i, reason: "flipping a popped write changed the answer".into() });
        }
        variants.push(lang::encode(&cf)?);
    }
    let refs: Vec<&TokenStream> = variants.iter().collect();
    let preds = pred.predict(&refs)?;
    let flags = indices.iter().zip(preds).map(|(&i, p)| (i, p != run.predictions[i])).collect();
    Ok(ProbeRate::from_flags(flags))
}

/// Flips the answer-determining write in every correct sequence; an event is
/// a prediction that fails to follow the new answer.
pub fn history_probe(pred: &dyn Predictor, run: &PressureRun) -> Result<ProbeRate, ProbeError> {
    let mut variants = Vec::new();
    let mut truths = Vec::new();
    let indices = run.correct_set();
    for &i in &indices {
        let ops = run.dataset.sequences[i].ops();
        let w = answer_write(&ops).ok_or(ProbeError::NoEligibleWrite { index: i })?;
        let cf = flip_write(&ops, w);
        let before = lang::oracle_answers(&ops)?;
        let after = lang::oracle_answers(&cf)?;
        if before.last().map(|b| b.flipped()) != after.last().copied() {
            return Err(ProbeError::Unsound { index: i, reason: "flipping the buried write left the answer unchanged".into() });
        }
        variants.push(lang::encode(&cf)?);
        truths.push(after);
    }
    let refs: Vec<&TokenStream> = variants.iter().collect();
    let preds = pred.predict(&refs)?;
    let flags = indices
        .iter()
        .zip(preds.iter().zip(&truths))
        .map(|(&i, (p, truth))| (i, p.last().copied().flatten() != truth.last().copied()))
        .collect();
    Ok(ProbeRate::from_flags(flags))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceVerdict {
    pub index: usize,
    pub truth: Bit,
    pub prediction: ReadPrediction,
    pub correct: bool,
    pub toggle_event: Option<bool>,
    pub history_loss_event: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub predictor: String,
    pub rollback_depth: usize,
    pub total_len: usize,
    pub seed: u64,
    pub n_sequences: usize,
    pub pressure_accuracy: f64,
    pub n_correct: usize,
    pub toggle_target: ToggleTarget,
    /// One counterfactual per sequence per probe.
    pub perturbations_per_sequence: usize,
    pub toggle_events: usize,
    pub toggle_rate: Option<f64>,
    pub history_loss_events: usize,
    pub history_loss_rate: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub verdicts: Vec<SequenceVerdict>,
}

/// Pressure test followed by both ablations.
pub fn probe(pred: &dyn Predictor, pcfg: &PressureConfig, seed: u64, target: ToggleTarget) -> Result<ProbeReport, ProbeError> {
    let run = run_pressure_test(pred, pcfg, seed)?;
    let toggle = toggle_probe(pred, &run, target)?;
    let history = history_probe(pred, &run)?;
    let toggle_flags: BTreeMap<usize, bool> = toggle.flags.iter().copied().collect();
    let history_flags: BTreeMap<usize, bool> = history.flags.iter().copied().collect();
    let verdicts = run
        .dataset
        .sequences
        .iter()
        .enumerate()
        .map(|(i, seq)| SequenceVerdict {
            index: i,
            truth: *seq.answers().last().expect("pressure sequences end in a read"),
            prediction: run.predictions[i].last().copied().flatten(),
            correct: run.correct[i],
            toggle_event: toggle_flags.get(&i).copied(),
            history_loss_event: history_flags.get(&i).copied(),
        })
        .collect();
    Ok(ProbeReport {
        predictor: pred.name(),
        rollback_depth: pcfg.rollback_depth,
        total_len: pcfg.total_len,
        seed,
        n_sequences: run.correct.len(),
        pressure_accuracy: run.accuracy(),
        n_correct: run.n_correct(),
        toggle_target: target,
        perturbations_per_sequence: 1,
        toggle_events: toggle.events,
        toggle_rate: toggle.rate,
        history_loss_events: history.events,
        history_loss_rate: history.rate,
        verdicts,
    })
}

/// Partition of the pressure set for the decomposition chart. A correct
/// sequence flagged by both probes is counted as toggle-flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub total: usize,
    pub correct_by_retrieval: usize,
    pub correct_toggle_flagged: usize,
    pub history_loss_flagged: usize,
    pub incorrect: usize,
    pub flagged_by_both: usize,
}

impl Decomposition {
    /// `(label, proportion)` in chart order.
    pub fn proportions(&self) -> Vec<(&'static str, f64)> {
        let n = self.total.max(1) as f64;
        vec![
            ("correct-by-retrieval", self.correct_by_retrieval as f64 / n),
            ("correct-but-toggle-flagged", self.correct_toggle_flagged as f64 / n),
            ("history-loss-flagged", self.history_loss_flagged as f64 / n),
            ("incorrect", self.incorrect as f64 / n),
        ]
    }
}

pub fn behavioural_decomposition(report: &ProbeReport) -> Decomposition {
    let mut d = Decomposition {
        total: report.verdicts.len(),
        correct_by_retrieval: 0,
        correct_toggle_flagged: 0,
        history_loss_flagged: 0,
        incorrect: 0,
        flagged_by_both: 0,
    };
    for v in &report.verdicts {
        let toggle = v.toggle_event.unwrap_or(false);
        let history = v.history_loss_event.unwrap_or(false);
        if !v.correct {
            d.incorrect += 1;
        } else if toggle {
            d.correct_toggle_flagged += 1;
            d.flagged_by_both += history as usize;
        } else if history {
            d.history_loss_flagged += 1;
        } else {
            d.correct_by_retrieval += 1;
        }
    }
    d
}

/// Exact match of trained parameters on a dataset (bit-restricted argmax).
pub fn model_exact_match(params: &ParamSet<f32>, ds: &Dataset) -> Result<f64, ProbeError> {
    Ok(exact_match(&ModelPredictor::new(params.clone()), ds)?.exact_match)
}
