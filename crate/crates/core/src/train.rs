//! Masked next-token training with AdamW and periodic ID evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::lang::IGNORE_INDEX;
use crate::model::{self, ModelConfig, ModelError, ParamSet, TokenBatch};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::probes::{self, ProbeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch has no supervised position")]
    ZeroSupervision,
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
    #[error("{0} non-finite steps, giving up")]
    TooManyNonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(NumericsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NoSupervision => TrainError::ZeroSupervision,
            other => TrainError::Numerics(other),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once ID exact-match on the eval subset reaches this.
    pub convergence_threshold: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Abort after this many steps with non-finite gradients.
    pub max_non_finite_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 16,
            max_epochs: 100,
            eval_every_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            convergence_threshold: 1.0,
            grad_clip: None,
            max_non_finite_steps: 100,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("convergence_threshold", self.convergence_threshold),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every_steps == 0 {
            return Err(TrainError::Config("batch_size, max_epochs and eval_every_steps must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments, one buffer per tensor in [`ParamSet::named`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    decay_mask: Vec<bool>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let named = params.named();
        Self {
            step: 0,
            m: named.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            v: named.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            decay_mask: named.iter().map(|(n, _)| model::decays(n)).collect(),
        }
    }
}

/// Mean cross-entropy over positions whose label is not the ignore index.
pub fn loss_fn<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[i64]) -> Result<Var, TrainError> {
    Ok(tape.masked_cross_entropy(logits, labels, IGNORE_INDEX)?)
}

/// One decoupled-weight-decay Adam update. Non-finite gradients leave both
/// the parameters and the optimizer state untouched.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    opt: &mut OptState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() {
        return Err(TrainError::Config(format!("{} gradients for {} parameters", grads.len(), names.len())));
    }
    let mut sq_norm = 0.0;
    for (g, name) in grads.iter().zip(&names) {
        for x in g.data() {
            let x = x.as_f64();
            if !x.is_finite() {
                return Err(TrainError::NonFinite(name.clone()));
            }
            sq_norm += x * x;
        }
    }
    let clip_scale = match cfg.grad_clip {
        Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
        _ => 1.0,
    };

    opt.step += 1;
    let t = opt.step as i32;
    let lr = cfg.learning_rate;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let c = |v: f64| T::from_f64(v);
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        let decay = if opt.decay_mask[k] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        for ((pi, gi), (mi, vi)) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = *gi * c(clip_scale);
            *mi = c(b1) * *mi + c(1.0 - b1) * g;
            *vi = c(b2) * *vi + c(1.0 - b2) * g * g;
            let m_hat = *mi / c(bc1);
            let v_hat = *vi / c(bc2);
            *pi = *pi * c(decay) - c(lr) * m_hat / (v_hat.sqrt() + c(cfg.adam_eps));
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients<T: Scalar>(
    params: &ParamSet<T>,
    batch: &TokenBatch,
    labels: &[i64],
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let mut tape = Tape::new();
    let pass = model::forward(params, &mut tape, batch)?;
    let loss = loss_fn(&mut tape, pass.logits, labels)?;
    let value = tape.value(loss).data()[0].as_f64();
    let grads = tape.backward(loss)?;
    Ok((value, pass.params.vars.iter().map(|&v| grads.get_or_zero(v)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
    pub id_exact_match: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

pub const CSV_HEADER: &str = "step,epoch,loss,id_exact_match,seconds";

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:.6},{:.6},{:.3}", self.step, self.epoch, self.loss, self.id_exact_match, self.seconds)
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log_csv(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.json")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.json")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ParamSet<f32>,
    pub best_params: ParamSet<f32>,
    pub best_id_exact_match: f64,
    pub log: TrainLog,
    pub converged: bool,
    /// Epoch during which training stopped (1-based).
    pub epochs: usize,
    pub steps: usize,
    pub sequences_consumed: usize,
    pub skipped_batches: usize,
    pub non_finite_steps: usize,
    /// Sequences left over per epoch when the set size is not a multiple of the batch size.
    pub dropped_per_epoch: usize,
}

impl TrainOutcome {
    pub fn final_id_exact_match(&self) -> f64 {
        self.log.records.last().map_or(0.0, |r| r.id_exact_match)
    }
}

/// Runs the epoch loop from freshly initialized parameters.
///
/// Batches are drawn from a seeded shuffle of `train_set` each epoch. The ID
/// exact-match on `eval_set` is measured every `eval_every_steps` optimizer
/// steps and once more at the end if the last step was not an eval step.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "training set has {} sequences, fewer than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if eval_set.is_empty() {
        return Err(TrainError::Config("evaluation set is empty".into()));
    }
    let mut csv = match outputs {
        Some(o) => {
            fs::create_dir_all(&o.dir).map_err(io_err(&o.dir))?;
            let path = o.log_csv();
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(w, "{CSV_HEADER}").map_err(io_err(&path))?;
            Some((w, path))
        }
        None => None,
    };

    let mut params: ParamSet<f32> = model::init_params(model_cfg)?;
    let mut opt = OptState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let dropped_per_epoch = train_set.len() % cfg.batch_size;
    if dropped_per_epoch > 0 {
        log::warn!("{dropped_per_epoch} sequences per epoch do not fill a batch and are skipped");
    }

    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut best_params = params.clone();
    let mut best = f64::NEG_INFINITY;
    let (mut step, mut consumed, mut skipped, mut non_finite) = (0usize, 0usize, 0usize, 0usize);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut converged = false;
    let mut epoch = 0;

    let mut evaluate = |params: &ParamSet<f32>,
                        step: usize,
                        epoch: usize,
                        loss: f64,
                        log: &mut TrainLog,
                        best: &mut f64,
                        best_params: &mut ParamSet<f32>|
     -> Result<f64, TrainError> {
        let em = probes::model_exact_match(params, eval_set)?;
        let rec = LogRecord { step, epoch, loss, id_exact_match: em, seconds: start.elapsed().as_secs_f64() };
        log::info!("step {step} epoch {epoch} loss {loss:.4} id_exact_match {em:.4}");
        if let Some((w, path)) = csv.as_mut() {
            writeln!(w, "{}", rec.csv_row()).and_then(|_| w.flush()).map_err(io_err(path))?;
        }
        log.records.push(rec);
        if em > *best {
            *best = em;
            *best_params = params.clone();
            if let Some(o) = outputs {
                let meta = serde_json::json!({ "kind": "best", "step": step, "epoch": epoch, "id_exact_match": em });
                let path = o.best_checkpoint();
                model::save_checkpoint(params, &path, meta).map_err(io_err(&path))?;
            }
        }
        Ok(em)
    };

    'epochs: while epoch < cfg.max_epochs {
        epoch += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let seqs: Vec<_> = chunk.iter().map(|&i| &train_set.sequences[i]).collect();
            let batch = TokenBatch::from_streams(seqs.iter().map(|s| &s.tokens));
            let labels: Vec<&[i64]> = seqs.iter().map(|s| s.labels.as_slice()).collect();
            let labels = batch.pad_labels(&labels);
            let (loss, grads) = match batch_gradients(&params, &batch, &labels) {
                Ok(r) => r,
                Err(TrainError::ZeroSupervision) => {
                    skipped += 1;
                    log::warn!("skipping batch without supervised positions (epoch {epoch})");
                    continue;
                }
                Err(e) => return Err(e),
            };
            match adamw_step(&mut params, &grads, &mut opt, cfg) {
                Ok(()) => {}
                Err(TrainError::NonFinite(name)) => {
                    non_finite += 1;
                    log::warn!("non-finite gradient in {name}; step skipped ({non_finite} so far)");
                    if non_finite > cfg.max_non_finite_steps {
                        return Err(TrainError::TooManyNonFinite(non_finite));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            }
            step += 1;
            consumed += chunk.len();
            loss_sum += loss;
            loss_n += 1;
            if step % cfg.eval_every_steps == 0 {
                let mean = loss_sum / loss_n as f64;
                (loss_sum, loss_n) = (0.0, 0);
                let em = evaluate(&params, step, epoch, mean, &mut log, &mut best, &mut best_params)?;
                if em >= cfg.convergence_threshold {
                    converged = true;
                    break 'epochs;
                }
            }
        }
    }
    if log.records.last().is_none_or(|r| r.step != step) {
        let mean = if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN };
        let em = evaluate(&params, step, epoch, mean, &mut log, &mut best, &mut best_params)?;
        converged = em >= cfg.convergence_threshold;
    }
    if let Some(o) = outputs {
        let meta = serde_json::json!({
            "kind": "final",
            "step": step,
            "epoch": epoch,
            "converged": converged,
            "id_exact_match": log.records.last().map(|r| r.id_exact_match),
        });
        let path = o.final_checkpoint();
        model::save_checkpoint(&params, &path, meta).map_err(io_err(&path))?;
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_id_exact_match: best,
        log,
        converged,
        epochs: epoch,
        steps: step,
        sequences_consumed: consumed,
        skipped_batches: skipped,
        non_finite_steps: non_finite,
        dropped_per_epoch,
    })
}
