//! A minimal Mamba-2 style language model.
//!
//! Each layer is a pre-norm residual block:
//!
//! ```text
//! h  = h + out_proj( ssm(silu(conv(x))) * silu(z) ),   (x, z) = in_proj(rmsnorm(h))
//! ```
//!
//! The selective SSM keeps a `[head_dim, d_state]` state per head. Every
//! entry of a head's state decays by the same scalar each step:
//!
//! ```text
//! dt_t = softplus(w_dt . x_t + dt_bias)            one per head
//! a_t  = exp(-dt_t * exp(A_log))                   in (0, 1)
//! H_t  = a_t * H_{t-1} + dt_t * x_t (outer) B_t
//! y_t  = H_t C_t + D * x_t
//! ```
//!
//! `B_t`, `C_t` and `dt_t` are linear in the convolved input, which is what
//! makes the recurrence selective.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{Token, TokenStream, VOCAB_SIZE};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    InvalidToken { id: usize, vocab: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            n_layers: 2,
            n_heads: 2,
            vocab_size: VOCAB_SIZE,
            norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_layers(n_layers: usize) -> Self {
        Self { n_layers, ..Self::default() }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner() / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.d_state == 0 || self.d_conv == 0 || self.expand == 0 {
            return err("dimensions must be positive");
        }
        if self.n_layers == 0 {
            return err("need at least one layer");
        }
        if self.n_heads == 0 || !self.d_inner().is_multiple_of(self.n_heads) {
            return err("n_heads must divide d_inner");
        }
        if self.vocab_size < VOCAB_SIZE {
            return err("vocabulary smaller than the task's token set");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub norm: Tensor<T>,
    /// `[d_model, 2 * d_inner]`: the x branch then the z gate.
    pub in_proj: Tensor<T>,
    /// `[d_inner, d_conv]`, last tap on the current step.
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
    /// `[d_inner, n_heads + 2 * d_state]`: dt, then B, then C.
    pub x_proj: Tensor<T>,
    pub dt_bias: Tensor<T>,
    pub a_log: Tensor<T>,
    pub d_skip: Tensor<T>,
    pub out_proj: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub config: ModelConfig,
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] =
    ["norm", "in_proj", "conv_weight", "conv_bias", "x_proj", "dt_bias", "a_log", "d_skip", "out_proj"];

impl<T: Scalar> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 9] {
        [
            &self.norm,
            &self.in_proj,
            &self.conv_weight,
            &self.conv_bias,
            &self.x_proj,
            &self.dt_bias,
            &self.a_log,
            &self.d_skip,
            &self.out_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.norm,
            &mut self.in_proj,
            &mut self.conv_weight,
            &mut self.conv_bias,
            &mut self.x_proj,
            &mut self.dt_bias,
            &mut self.a_log,
            &mut self.d_skip,
            &mut self.out_proj,
        ]
    }
}

impl<T: Scalar> ParamSet<T> {
    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable view in the same order as [`ParamSet::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm: l.norm.cast(),
                    in_proj: l.in_proj.cast(),
                    conv_weight: l.conv_weight.cast(),
                    conv_bias: l.conv_bias.cast(),
                    x_proj: l.x_proj.cast(),
                    dt_bias: l.dt_bias.cast(),
                    a_log: l.a_log.cast(),
                    d_skip: l.d_skip.cast(),
                    out_proj: l.out_proj.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Initial per-step decay `exp(-softplus(dt_bias) * exp(A_log))` of each
    /// head, ignoring the input-dependent part of dt.
    pub fn base_decays(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                l.dt_bias
                    .data()
                    .iter()
                    .zip(l.a_log.data())
                    .map(|(&b, &a)| {
                        let dt = b.as_f64().exp().ln_1p();
                        (-dt * a.as_f64().exp()).exp()
                    })
                    .collect()
            })
            .collect()
    }
}

/// True for tensors that weight decay should touch (the matrices).
pub fn decays(name: &str) -> bool {
    !(name.ends_with("norm") || name.ends_with("a_log") || name.ends_with("bias") || name.ends_with("d_skip"))
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ParamSet<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dm, di, ds, h) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.n_heads);
    let embedding = uniform(&mut rng, vec![cfg.vocab_size, dm], 1.0);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let in_proj = uniform(&mut rng, vec![dm, 2 * di], 1.0 / (dm as f64).sqrt());
        let conv_bound = 1.0 / (cfg.d_conv as f64).sqrt();
        let conv_weight = uniform(&mut rng, vec![di, cfg.d_conv], conv_bound);
        let conv_bias = uniform(&mut rng, vec![di], conv_bound);
        let x_proj = uniform(&mut rng, vec![di, h + 2 * ds], 1.0 / (di as f64).sqrt());
        // dt log-uniform on [1e-3, 1e-1]; with A = 1 the base decay is in [0.905, 0.999].
        let dt_bias = (0..h)
            .map(|_| {
                let dt: f64 = rng.gen_range(0.001f64.ln()..0.1f64.ln()).exp();
                T::from_f64(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        layers.push(LayerParams {
            norm: Tensor::filled(vec![dm], T::one()),
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_bias: Tensor::new(vec![h], dt_bias)?,
            a_log: Tensor::zeros(vec![h]),
            d_skip: Tensor::filled(vec![h], T::one()),
            out_proj: uniform(&mut rng, vec![di, dm], 1.0 / (di as f64).sqrt()),
        });
    }
    let lm_head = uniform(&mut rng, vec![dm, cfg.vocab_size], 1.0 / (dm as f64).sqrt());
    Ok(ParamSet {
        config: cfg.clone(),
        embedding,
        layers,
        final_norm: Tensor::filled(vec![dm], T::one()),
        lm_head,
    })
}

/// Right-padded batch of token streams. Padding uses the ignore token and
/// never influences earlier positions because every layer is causal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub time: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_streams<'a>(streams: impl IntoIterator<Item = &'a TokenStream>) -> Self {
        let streams: Vec<&TokenStream> = streams.into_iter().collect();
        let time = streams.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(streams.len() * time);
        for s in &streams {
            ids.extend(s.ids());
            ids.extend(std::iter::repeat_n(Token::I.id(), time - s.len()));
        }
        Self { ids, batch: streams.len(), time, lengths: streams.iter().map(|s| s.len()).collect() }
    }

    pub fn from_ids(ids: Vec<usize>, batch: usize, time: usize) -> Self {
        assert_eq!(ids.len(), batch * time);
        Self { ids, batch, time, lengths: vec![time; batch] }
    }

    /// Labels padded with the ignore index to the batch layout.
    pub fn pad_labels(&self, labels: &[&[i64]]) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.batch * self.time);
        for l in labels {
            out.extend_from_slice(l);
            out.extend(std::iter::repeat_n(crate::lang::IGNORE_INDEX, self.time - l.len()));
        }
        out
    }
}

/// Parameter leaves registered on a tape, in [`ParamSet::named`] order.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

struct LayerVars {
    norm: Var,
    in_proj: Var,
    conv_weight: Var,
    conv_bias: Var,
    x_proj: Var,
    dt_bias: Var,
    a_log: Var,
    d_skip: Var,
    out_proj: Var,
}

/// Values the selective SSM computed, kept for inspection.
pub struct SsmOutput {
    pub y: Var,
    /// `[rows, n_heads]` per-step decay.
    pub decay: Var,
    pub dt: Var,
}

pub struct ForwardPass {
    /// `[batch * time, vocab]`.
    pub logits: Var,
    pub params: ParamVars,
    pub ssm: Vec<SsmOutput>,
}

fn layer_vars(v: &[Var]) -> LayerVars {
    LayerVars {
        norm: v[0],
        in_proj: v[1],
        conv_weight: v[2],
        conv_bias: v[3],
        x_proj: v[4],
        dt_bias: v[5],
        a_log: v[6],
        d_skip: v[7],
        out_proj: v[8],
    }
}

fn selective_ssm_vars<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    x: Var,
    l: &LayerVars,
    batch: usize,
    time: usize,
) -> Result<SsmOutput, NumericsError> {
    let (h, n, p) = (cfg.n_heads, cfg.d_state, cfg.head_dim());
    let proj = tape.matmul(x, l.x_proj)?;
    let dt_raw = tape.slice_cols(proj, 0, h)?;
    let b = tape.slice_cols(proj, h, n)?;
    let c = tape.slice_cols(proj, h + n, n)?;
    let dt_pre = tape.add_row(dt_raw, l.dt_bias)?;
    let dt = tape.softplus(dt_pre);
    let a_pos = tape.exp(l.a_log);
    let a_neg = tape.scale(a_pos, T::from_f64(-1.0));
    let log_decay = tape.mul_row(dt, a_neg)?;
    let decay = tape.exp(log_decay);
    let dt_per_channel = tape.repeat_cols(dt, p);
    let x_dt = tape.mul(x, dt_per_channel)?;
    let read = tape.selective_scan(decay, x_dt, b, c, batch, time)?;
    let d_per_channel = tape.repeat_cols(l.d_skip, p);
    let skip = tape.mul_row(x, d_per_channel)?;
    let y = tape.add(read, skip)?;
    Ok(SsmOutput { y, decay, dt })
}

/// Runs the selective SSM alone on `x` (`[batch * time, d_inner]`) with the
/// parameters of one layer.
pub fn selective_ssm<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    layer: &LayerParams<T>,
    x: Var,
    batch: usize,
    time: usize,
) -> Result<SsmOutput, NumericsError> {
    let vars: Vec<Var> = layer.fields().iter().map(|t| tape.constant((*t).clone())).collect();
    selective_ssm_vars(tape, cfg, x, &layer_vars(&vars), batch, time)
}

/// Forward pass with parameters registered as differentiable leaves.
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    tape: &mut Tape<T>,
    batch: &TokenBatch,
) -> Result<ForwardPass, ModelError> {
    check_tokens(&params.config, batch)?;
    let vars: Vec<Var> = params.named().into_iter().map(|(_, t)| tape.param(t.clone())).collect();
    let (logits, ssm) = run_layers(&params.config, tape, batch, &vars)?;
    Ok(ForwardPass { logits, params: ParamVars { vars }, ssm })
}

/// Forward pass over leaves already on `tape`, in [`ParamSet::named`] order.
/// Used where something else owns the parameter leaves, such as the
/// gradient checker.
pub fn forward_with_vars<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    batch: &TokenBatch,
    vars: &[Var],
) -> Result<Var, ModelError> {
    check_tokens(cfg, batch)?;
    Ok(run_layers(cfg, tape, batch, vars)?.0)
}

fn check_tokens(cfg: &ModelConfig, batch: &TokenBatch) -> Result<(), ModelError> {
    match batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        Some(&id) => Err(ModelError::InvalidToken { id, vocab: cfg.vocab_size }),
        None => Ok(()),
    }
}

fn run_layers<T: Scalar>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    batch: &TokenBatch,
    vars: &[Var],
) -> Result<(Var, Vec<SsmOutput>), NumericsError> {
    let (bsz, time) = (batch.batch, batch.time);
    let di = cfg.d_inner();
    let eps = T::from_f64(cfg.norm_eps);

    let mut hidden = tape.embedding(vars[0], &batch.ids)?;
    let mut ssm = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let l = layer_vars(&vars[1 + 9 * i..1 + 9 * (i + 1)]);
        let normed = tape.rmsnorm(hidden, l.norm, eps)?;
        let xz = tape.matmul(normed, l.in_proj)?;
        let x = tape.slice_cols(xz, 0, di)?;
        let z = tape.slice_cols(xz, di, di)?;
        let x = tape.causal_conv1d(x, l.conv_weight, l.conv_bias, bsz, time)?;
        let x = tape.silu(x);
        let out = selective_ssm_vars(tape, cfg, x, &l, bsz, time)?;
        let gate = tape.silu(z);
        let gated = tape.mul(out.y, gate)?;
        let projected = tape.matmul(gated, l.out_proj)?;
        hidden = tape.add(hidden, projected)?;
        ssm.push(out);
    }
    let n = vars.len();
    let normed = tape.rmsnorm(hidden, vars[n - 2], eps)?;
    let logits = tape.matmul(normed, vars[n - 1])?;
    Ok((logits, ssm))
}

/// Logits `[batch * time, vocab]` without keeping the tape.
pub fn logits<T: Scalar>(params: &ParamSet<T>, batch: &TokenBatch) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let pass = forward(params, &mut tape, batch)?;
    Ok(tape.value(pass.logits).clone())
}

const CHECKPOINT_FORMAT: &str = "undo-flipflop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    tensors: Vec<NamedArray>,
}

/// Serializes `params` as a JSON container; `f32` values round-trip exactly.
pub fn checkpoint_json(params: &ParamSet<f32>, metadata: serde_json::Value) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        seed: params.config.seed,
        metadata,
        tensors: params
            .named()
            .into_iter()
            .map(|(name, t)| NamedArray { name, shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect(),
    };
    serde_json::to_string(&file).expect("checkpoint serializes")
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path, metadata: serde_json::Value) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, checkpoint_json(params, metadata))?;
    fs::rename(tmp, path)
}

pub fn parse_checkpoint(text: &str, path: &str) -> Result<ParamSet<f32>, ModelError> {
    let bad = |reason: String| ModelError::Checkpoint { path: path.to_string(), reason };
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format {} v{}", file.format, file.version)));
    }
    let mut params: ParamSet<f32> = init_params(&file.config)?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != file.tensors.len() {
        return Err(bad(format!("expected {} tensors, found {}", expected.len(), file.tensors.len())));
    }
    for ((slot, (name, shape)), arr) in params.tensors_mut().into_iter().zip(expected).zip(file.tensors) {
        if arr.name != name || arr.shape != shape {
            return Err(bad(format!("tensor {} {:?} where {name} {shape:?} was expected", arr.name, arr.shape)));
        }
        *slot = Tensor::new(arr.shape, arr.data).map_err(|e| bad(e.to_string()))?;
    }
    Ok(params)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>, ModelError> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint { path: name.clone(), reason: e.to_string() })?;
    parse_checkpoint(&text, &name)
}
