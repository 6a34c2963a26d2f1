//! Mini-batch Adam training, evaluation and checkpoint persistence.
//!
//! Training is single-threaded and bit-reproducible: parameter init, the
//! per-epoch shuffle and the data are each driven by their own seed.
//! Evaluation may fan out over worker threads (`ASCNET_THREADS` caps the
//! count); per-segment results do not depend on the split.

mod checkpoint;
mod eval;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{
    denoise_record, denoise_record_with, evaluate, predict_segments, stitch_starts, triangular_weights, Method,
};

use std::io;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Tape, Tensor, Var};
use crate::model::{self, init_params, Mode, ModelConfig, ModelError, Overrides, Parameters};
use crate::pipeline::{PipelineError, Segment, SegmentSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (epoch {epoch}): loss {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Seeds the per-epoch shuffle stream.
    pub seed: u64,
    /// Seeds parameter initialization.
    pub init_seed: u64,
    pub shuffle: bool,
    /// Global L2 norm limit for the gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 10,
            seed: 0,
            init_seed: 0,
            shuffle: true,
            grad_clip: Some(5.0),
            bn_momentum: model::BN_MOMENTUM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return bad("learning_rate must be >= 0 and eps > 0");
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }
}

/// First and second moment estimates; `t` counts completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update; advances `state.t` first.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::ShapeMismatch("parameter, gradient and moment counts differ".into()));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
            return Err(TrainError::ShapeMismatch(format!("{:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - cfg.beta1.powf(t);
    let c2 = 1.0 - cfg.beta2.powf(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Complete training state: enough to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: Parameters,
    /// Parameters after the epoch with the lowest validation loss.
    pub best_params: Parameters,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
}

impl Checkpoint {
    /// Freshly initialized state before any epoch.
    pub fn new(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let params = init_params(model_config, train_config.init_seed)?;
        Ok(Self {
            model_config: model_config.clone(),
            train_config: train_config.clone(),
            adam: AdamState::new(&params.tensors),
            best_params: params.clone(),
            params,
            best_val_loss: None,
            best_epoch: None,
            epoch: 0,
            history: Vec::new(),
            stale_epochs: 0,
            stopped_early: false,
        })
    }
}

/// Shuffle stream for one epoch, independent of every other random stream.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"shuffle");
    h.update(seed.to_le_bytes());
    h.update((epoch as u64).to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

fn stack(segs: &[&Segment], pick: fn(&Segment) -> &[f64], len: usize) -> Tensor {
    let data = segs.iter().flat_map(|s| pick(s).iter().copied()).collect();
    Tensor::new(&[segs.len(), 1, len], data).expect("segment length checked")
}

fn check_set(set: &SegmentSet, name: &'static str, cfg: &ModelConfig) -> Result<()> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset(name));
    }
    if set.length != cfg.segment_length || set.segments.iter().any(|s| s.clean.len() != cfg.segment_length) {
        return Err(TrainError::ConfigMismatch(format!(
            "{name} segments have length {}, model expects {}",
            set.length, cfg.segment_length
        )));
    }
    Ok(())
}

/// Forward, backward and one Adam step on a batch. Returns the batch loss.
fn train_step(ckpt: &mut Checkpoint, batch: &[&Segment]) -> Result<f64> {
    let cfg = &ckpt.model_config;
    let l = cfg.segment_length;
    let mut tape = Tape::new();
    let vars: Vec<Var> = ckpt.params.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let x = tape.leaf(stack(batch, |s| &s.noisy, l), false);
    let y = tape.leaf(stack(batch, |s| &s.clean, l), false);
    let out = model::forward(&mut tape, cfg, &vars, &ckpt.params.running, x, Mode::Train, &Overrides::default())?;
    let loss_var = model::loss(&mut tape, out.output, y)?;
    let loss = tape.value(loss_var).item().expect("scalar loss");
    if !loss.is_finite() {
        return Err(TrainError::Divergence { epoch: ckpt.epoch + 1, step: ckpt.adam.t + 1, loss });
    }
    tape.backward(loss_var).map_err(ModelError::from)?;
    let mut grads: Vec<Tensor> = vars
        .iter()
        .zip(&ckpt.params.tensors)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    if let Some(limit) = ckpt.train_config.grad_clip {
        clip_global_norm(&mut grads, limit);
    }
    adam_step(&mut ckpt.params.tensors, &grads, &mut ckpt.adam, &ckpt.train_config)?;
    for (r, s) in ckpt.params.running.iter_mut().zip(&out.batch_stats) {
        r.update(s, ckpt.train_config.bn_momentum);
    }
    Ok(loss)
}

/// Mean squared error of eval-mode predictions over every sample of `set`.
pub fn validation_loss(cfg: &ModelConfig, params: &Parameters, set: &SegmentSet) -> Result<f64> {
    let inputs: Vec<&[f64]> = set.segments.iter().map(|s| s.noisy.as_slice()).collect();
    let preds = predict_segments(cfg, params, &inputs)?;
    let mut sse = 0.0;
    for (s, p) in set.segments.iter().zip(&preds) {
        sse += s.clean.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(sse / (set.len() * set.length) as f64)
}

fn run_epoch(ckpt: &mut Checkpoint, train: &SegmentSet, val: &SegmentSet) -> Result<()> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    if ckpt.train_config.shuffle {
        order.shuffle(&mut epoch_rng(ckpt.train_config.seed, ckpt.epoch));
    }
    let mut weighted = 0.0;
    for chunk in order.chunks(ckpt.train_config.batch_size) {
        let batch: Vec<&Segment> = chunk.iter().map(|&i| &train.segments[i]).collect();
        weighted += train_step(ckpt, &batch)? * batch.len() as f64;
    }
    let train_loss = weighted / train.len() as f64;
    let val_loss = validation_loss(&ckpt.model_config, &ckpt.params, val)?;
    if !val_loss.is_finite() {
        return Err(TrainError::Divergence { epoch: ckpt.epoch + 1, step: ckpt.adam.t, loss: val_loss });
    }
    ckpt.epoch += 1;
    ckpt.history.push(EpochRecord { epoch: ckpt.epoch, train_loss, val_loss });
    if ckpt.best_val_loss.is_none_or(|b| val_loss < b) {
        ckpt.best_val_loss = Some(val_loss);
        ckpt.best_epoch = Some(ckpt.epoch);
        ckpt.best_params = ckpt.params.clone();
        ckpt.stale_epochs = 0;
    } else {
        ckpt.stale_epochs += 1;
        if ckpt.stale_epochs >= ckpt.train_config.early_stop_patience {
            ckpt.stopped_early = true;
        }
    }
    Ok(())
}

/// Trains from a fresh initialization for up to `train_cfg.max_epochs`.
pub fn train(
    train_set: &SegmentSet,
    val_set: &SegmentSet,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Checkpoint> {
    check_set(train_set, "train", model_cfg)?;
    check_set(val_set, "val", model_cfg)?;
    let ckpt = Checkpoint::new(model_cfg, train_cfg)?;
    resume(ckpt, train_set, val_set, train_cfg.max_epochs)
}

/// Continues training until `max_epochs` epochs are complete or early
/// stopping triggers. Training `k` epochs and resuming to `k + m` matches
/// training `k + m` epochs directly, bit for bit.
pub fn resume(
    mut ckpt: Checkpoint,
    train_set: &SegmentSet,
    val_set: &SegmentSet,
    max_epochs: usize,
) -> Result<Checkpoint> {
    ckpt.train_config.validate()?;
    ckpt.params.validate(&ckpt.model_config)?;
    check_set(train_set, "train", &ckpt.model_config)?;
    check_set(val_set, "val", &ckpt.model_config)?;
    ckpt.train_config.max_epochs = max_epochs;
    while ckpt.epoch < max_epochs && !ckpt.stopped_early {
        run_epoch(&mut ckpt, train_set, val_set)?;
    }
    Ok(ckpt)
}
