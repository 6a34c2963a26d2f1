//! The denoising network.
//!
//! Encoder blocks downsample with strided convolutions; decoder blocks
//! upsample with transposed convolutions, add a channel-averaged skip from
//! the encoder and gate the result with channel and spatial attention. Every
//! conv/BN pair is followed by an "improved ReLU" whose negative slope is
//! predicted per channel from the pooled positive and negative parts.
//!
//! Parameters are a flat list of tensors in [`param_layout`] order, so the
//! optimizer and the checkpoint code never need to know the topology.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, BatchStats, PoolKind, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] AutogradError),
    #[error("skip resolution {got} does not match decoder length {expected}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("parameters do not match config: {0}")]
    ConfigMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub stride: usize,
    pub skip_kernel: usize,
    pub attn_reduction: usize,
    pub spatial_attn_kernel: usize,
    pub segment_length: usize,
    pub final_kernel: usize,
    /// Decoder attention blocks on or off.
    pub attention: bool,
    /// `conv -> BN -> activation` when true, `conv -> activation -> BN` otherwise.
    pub bn_before_activation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            channels: vec![16, 32, 64, 64],
            kernels: vec![16, 16, 8, 8],
            stride: 2,
            skip_kernel: 3,
            attn_reduction: 4,
            spatial_attn_kernel: 7,
            segment_length: 1024,
            final_kernel: 16,
            attention: true,
            bn_before_activation: true,
        }
    }
}

impl ModelConfig {
    /// Two narrow blocks on 32 samples; small enough for finite differences.
    pub fn micro() -> Self {
        Self { n_blocks: 2, channels: vec![4, 4], kernels: vec![16, 16], segment_length: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_blocks < 2 {
            return bad(format!("n_blocks must be at least 2, got {}", self.n_blocks));
        }
        if self.channels.len() != self.n_blocks || self.kernels.len() != self.n_blocks {
            return bad("channels and kernels need one entry per block".into());
        }
        if self.kernels[0] != 16 || self.kernels[1] != 16 {
            return bad("the first two kernels must be 16".into());
        }
        if self.final_kernel != 16 {
            return bad("final_kernel must be 16".into());
        }
        if self.stride < 1 || self.skip_kernel < 1 || self.spatial_attn_kernel < 1 || self.attn_reduction < 1 {
            return bad("stride, kernels and reduction must be positive".into());
        }
        if self.kernels.contains(&0) {
            return bad("kernel sizes must be positive".into());
        }
        let factor = self.stride.checked_pow(self.n_blocks as u32).unwrap_or(usize::MAX);
        if self.segment_length == 0 || !self.segment_length.is_multiple_of(factor) {
            return bad(format!(
                "segment_length {} must be a positive multiple of stride^n_blocks = {factor}",
                self.segment_length
            ));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c < self.attn_reduction) {
            return bad(format!("channel count {c} below attention reduction {}", self.attn_reduction));
        }
        Ok(())
    }

    /// Output channels of decoder stage `j` (stages run from `n_blocks - 1` down to 0).
    fn dec_out(&self, j: usize) -> usize {
        if j == 0 {
            self.channels[0]
        } else {
            self.channels[j - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Glorot fan sum for weights; `None` marks biases and BN affine terms.
    #[serde(skip)]
    fan: Option<usize>,
    #[serde(skip)]
    fill: f64,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        Self { name, shape, fan: Some(fan_in + fan_out), fill: 0.0 }
    }

    fn constant(name: String, shape: Vec<usize>, fill: f64) -> Self {
        Self { name, shape, fan: None, fill }
    }
}

fn push_conv(out: &mut Vec<ParamSpec>, name: &str, c_out: usize, c_in: usize, k: usize) {
    out.push(ParamSpec::weight(format!("{name}.w"), vec![c_out, c_in, k], c_in * k, c_out * k));
    out.push(ParamSpec::constant(format!("{name}.b"), vec![c_out], 0.0));
}

fn push_tconv(out: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize, k: usize) {
    out.push(ParamSpec::weight(format!("{name}.w"), vec![c_in, c_out, k], c_in * k, c_out * k));
    out.push(ParamSpec::constant(format!("{name}.b"), vec![c_out], 0.0));
}

fn push_fc(out: &mut Vec<ParamSpec>, name: &str, f_out: usize, f_in: usize) {
    out.push(ParamSpec::weight(format!("{name}.w"), vec![f_out, f_in], f_in, f_out));
    out.push(ParamSpec::constant(format!("{name}.b"), vec![f_out], 0.0));
}

fn push_bn(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    out.push(ParamSpec::constant(format!("{name}.gamma"), vec![c], 1.0));
    out.push(ParamSpec::constant(format!("{name}.beta"), vec![c], 0.0));
}

/// Names and shapes of every trainable tensor, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut c_in = 1;
    for i in 0..cfg.n_blocks {
        let c = cfg.channels[i];
        push_conv(&mut out, &format!("enc{i}.conv"), c, c_in, cfg.kernels[i]);
        push_bn(&mut out, &format!("enc{i}.bn"), c);
        push_fc(&mut out, &format!("enc{i}.act"), c, 2 * c);
        c_in = c;
    }
    for j in (0..cfg.n_blocks).rev() {
        let (ci, co) = (cfg.channels[j], cfg.dec_out(j));
        push_tconv(&mut out, &format!("dec{j}.tconv"), ci, co, cfg.kernels[j]);
        push_bn(&mut out, &format!("dec{j}.bn"), co);
        push_fc(&mut out, &format!("dec{j}.act"), co, 2 * co);
        push_conv(&mut out, &format!("dec{j}.skip"), co, 1, cfg.skip_kernel);
        if cfg.attention {
            let hidden = co / cfg.attn_reduction;
            push_fc(&mut out, &format!("dec{j}.attn.fc1"), hidden, co);
            push_fc(&mut out, &format!("dec{j}.attn.fc2"), co, hidden);
            push_conv(&mut out, &format!("dec{j}.attn.spatial"), 1, 2, cfg.spatial_attn_kernel);
        }
    }
    push_conv(&mut out, "final", 1, cfg.dec_out(0), cfg.final_kernel);
    Ok(out)
}

/// BN layers in forward order with their channel counts.
fn bn_channels(cfg: &ModelConfig) -> Vec<usize> {
    let mut out = cfg.channels.clone();
    out.extend((0..cfg.n_blocks).rev().map(|j| cfg.dec_out(j)));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    /// Exponential moving average; the batch variance enters unbiased.
    pub fn update(&mut self, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let correction = n / (n - 1.0);
        for ch in 0..self.mean.len() {
            self.mean[ch] = (1.0 - momentum) * self.mean[ch] + momentum * stats.mean[ch];
            self.var[ch] = (1.0 - momentum) * self.var[ch] + momentum * stats.var[ch] * correction;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tensors: Vec<Tensor>,
    /// One entry per BN layer, encoder first.
    pub running: Vec<RunningStats>,
}

impl Parameters {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = param_layout(cfg)?;
        if layout.len() != self.tensors.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "expected {} tensors, got {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (spec, t) in layout.iter().zip(&self.tensors) {
            if spec.shape != t.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(ModelError::ConfigMismatch(format!("{} is not finite", spec.name)));
            }
        }
        let bn = bn_channels(cfg);
        if bn.len() != self.running.len()
            || bn.iter().zip(&self.running).any(|(c, r)| r.mean.len() != *c || r.var.len() != *c)
        {
            return Err(ModelError::ConfigMismatch("running statistics".into()));
        }
        Ok(())
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Glorot-uniform weights, zero biases, unit BN scale, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    let layout = param_layout(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .iter()
        .map(|spec| match spec.fan {
            Some(fan) => {
                let s = (6.0 / fan as f64).sqrt();
                let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
                let n = spec.shape.iter().product();
                Tensor::new(&spec.shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("layout shape")
            }
            None => Tensor::full(&spec.shape, spec.fill),
        })
        .collect();
    let running = bn_channels(cfg).into_iter().map(RunningStats::new).collect();
    Ok(Parameters { tensors, running })
}

/// Forced gate values, used to pin the learned maps in identity tests.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub relu_alpha: Option<f64>,
    pub channel_attention: Option<f64>,
    pub spatial_attention: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds the returned stats into running averages.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// A weight/bias pair on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub fc1: Dense,
    pub fc2: Dense,
    pub spatial: Dense,
}

fn constant_gate(tape: &mut Tape, shape: &[usize], value: f64) -> Var {
    tape.leaf(Tensor::full(shape, value), false)
}

/// `y = max(x, 0) + alpha * min(x, 0)` with a per-channel `alpha` predicted
/// from the spatially averaged positive and negative parts.
pub fn improved_relu(tape: &mut Tape, x: Var, fc: Dense, alpha_override: Option<f64>) -> Result<Var> {
    let (batch, c, _) = tape.value(x).dims3()?;
    let fc_shape = tape.value(fc.w).shape().to_vec();
    if fc_shape != [c, 2 * c] {
        return Err(AutogradError::ShapeMismatch(format!("improved relu fc {fc_shape:?} for {c} channels")).into());
    }
    let (pos, neg) = tape.split_posneg(x);
    let alpha = match alpha_override {
        Some(a) => constant_gate(tape, &[batch, c, 1], a),
        None => {
            let p = tape.pool_spatial(pos, PoolKind::Avg)?;
            let p = tape.reshape(p, &[batch, c])?;
            let q = tape.pool_spatial(neg, PoolKind::Avg)?;
            let q = tape.reshape(q, &[batch, c])?;
            let pq = tape.concat_channels(&[p, q])?;
            let z = tape.linear(pq, fc.w, fc.b)?;
            let a = tape.sigmoid(z);
            tape.reshape(a, &[batch, c, 1])?
        }
    };
    let scaled = tape.scale_channels(neg, alpha)?;
    Ok(tape.add(pos, scaled)?)
}

/// Averages the encoder activation over channels and maps it to the decoder
/// width with a stride-1 convolution.
pub fn skip_connect(tape: &mut Tape, enc_out: Var, conv: Dense, dec_len: usize) -> Result<Var> {
    let (_, _, n) = tape.value(enc_out).dims3()?;
    if n != dec_len {
        return Err(ModelError::ResolutionMismatch { expected: dec_len, got: n });
    }
    let avg = tape.pool_channel(enc_out, PoolKind::Avg)?;
    Ok(tape.conv1d(avg, conv.w, conv.b, 1)?)
}

fn shared_mlp(tape: &mut Tape, v: Var, p: &AttentionParams) -> Result<Var> {
    let h = tape.linear(v, p.fc1.w, p.fc1.b)?;
    let h = tape.relu(h);
    Ok(tape.linear(h, p.fc2.w, p.fc2.b)?)
}

/// Per-channel gate `[B, C, 1]` from average- and max-pooled descriptors
/// passed through a shared two-layer MLP.
pub fn channel_attention(tape: &mut Tape, x: Var, p: &AttentionParams) -> Result<Var> {
    let (batch, c, _) = tape.value(x).dims3()?;
    let avg = tape.pool_spatial(x, PoolKind::Avg)?;
    let avg = tape.reshape(avg, &[batch, c])?;
    let max = tape.pool_spatial(x, PoolKind::Max)?;
    let max = tape.reshape(max, &[batch, c])?;
    let a = shared_mlp(tape, avg, p)?;
    let m = shared_mlp(tape, max, p)?;
    let s = tape.add(a, m)?;
    let g = tape.sigmoid(s);
    Ok(tape.reshape(g, &[batch, c, 1])?)
}

/// Per-position gate `[B, 1, N]` from channel-average and channel-max maps.
pub fn spatial_attention(tape: &mut Tape, x: Var, conv: Dense) -> Result<Var> {
    let avg = tape.pool_channel(x, PoolKind::Avg)?;
    let max = tape.pool_channel(x, PoolKind::Max)?;
    let both = tape.concat_channels(&[avg, max])?;
    let z = tape.conv1d(both, conv.w, conv.b, 1)?;
    Ok(tape.sigmoid(z))
}

/// `mu = alpha_c * x`, then `y = alpha_s(mu) * mu`.
pub fn attention_block(tape: &mut Tape, x: Var, p: &AttentionParams, ov: &Overrides) -> Result<Var> {
    let (batch, c, n) = tape.value(x).dims3()?;
    let ac = match ov.channel_attention {
        Some(v) => constant_gate(tape, &[batch, c, 1], v),
        None => channel_attention(tape, x, p)?,
    };
    let mu = tape.scale_channels(x, ac)?;
    let as_ = match ov.spatial_attention {
        Some(v) => constant_gate(tape, &[batch, 1, n], v),
        None => spatial_attention(tape, mu, p.spatial)?,
    };
    Ok(tape.scale_positions(mu, as_)?)
}

pub struct ForwardOutput {
    pub output: Var,
    /// Batch statistics per BN layer (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        self.pos += 1;
        self.vars[self.pos - 1]
    }

    fn dense(&mut self) -> Dense {
        Dense { w: self.next(), b: self.next() }
    }
}

struct BnCtx<'a> {
    mode: Mode,
    running: &'a [RunningStats],
    layer: usize,
    stats: Vec<BatchStats>,
}

impl BnCtx<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let r = &self.running[self.layer];
        self.layer += 1;
        match self.mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push(s);
                Ok(y)
            }
            Mode::Eval => Ok(tape.batch_norm_eval(x, gamma, beta, &r.mean, &r.var, BN_EPS)?),
        }
    }
}

fn norm_act(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bn: &mut BnCtx,
    x: Var,
    cur: &mut Cursor,
    ov: &Overrides,
) -> Result<Var> {
    let (gamma, beta) = (cur.next(), cur.next());
    let act = cur.dense();
    if cfg.bn_before_activation {
        let y = bn.apply(tape, x, gamma, beta)?;
        improved_relu(tape, y, act, ov.relu_alpha)
    } else {
        let y = improved_relu(tape, x, act, ov.relu_alpha)?;
        bn.apply(tape, y, gamma, beta)
    }
}

/// Runs the network on `x [B, 1, L]`. `params` are tape variables in
/// [`param_layout`] order.
pub fn forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &[Var],
    running: &[RunningStats],
    x: Var,
    mode: Mode,
    ov: &Overrides,
) -> Result<ForwardOutput> {
    let (_, c_in, n) = tape.value(x).dims3()?;
    if c_in != 1 || n != cfg.segment_length {
        return Err(AutogradError::ShapeMismatch(format!(
            "model input must be [B, 1, {}], got {:?}",
            cfg.segment_length,
            tape.value(x).shape()
        ))
        .into());
    }
    let expected = param_layout(cfg)?.len();
    if params.len() != expected || running.len() != bn_channels(cfg).len() {
        return Err(ModelError::ConfigMismatch(format!("expected {expected} parameter tensors, got {}", params.len())));
    }
    let mut cur = Cursor { vars: params, pos: 0 };
    let mut bn = BnCtx { mode, running, layer: 0, stats: Vec::new() };

    let mut acts = vec![x];
    let mut h = x;
    for _ in 0..cfg.n_blocks {
        let conv = cur.dense();
        let y = tape.conv1d(h, conv.w, conv.b, cfg.stride)?;
        h = norm_act(tape, cfg, &mut bn, y, &mut cur, ov)?;
        acts.push(h);
    }
    for j in (0..cfg.n_blocks).rev() {
        let tconv = cur.dense();
        let y = tape.conv_transpose1d(h, tconv.w, tconv.b, cfg.stride)?;
        let y = norm_act(tape, cfg, &mut bn, y, &mut cur, ov)?;
        let skip_conv = cur.dense();
        let dec_len = tape.value(y).shape()[2];
        let skip = skip_connect(tape, acts[j], skip_conv, dec_len)?;
        h = tape.add(y, skip)?;
        if cfg.attention {
            let p = AttentionParams { fc1: cur.dense(), fc2: cur.dense(), spatial: cur.dense() };
            h = attention_block(tape, h, &p, ov)?;
        }
    }
    let fin = cur.dense();
    let output = tape.conv1d(h, fin.w, fin.b, 1)?;
    Ok(ForwardOutput { output, batch_stats: bn.stats })
}

/// Mean squared reconstruction error over batch and samples.
pub fn loss(tape: &mut Tape, denoised: Var, clean: Var) -> Result<Var> {
    Ok(tape.mse_loss(denoised, clean)?)
}

/// Eval-mode inference on `x [B, 1, L]` without recording gradients.
pub fn predict(cfg: &ModelConfig, params: &Parameters, x: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let xv = tape.leaf(x, false);
    let out = forward(&mut tape, cfg, &vars, &params.running, xv, Mode::Eval, &Overrides::default())?;
    Ok(tape.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autograd::gradcheck::check_gradients;
    use crate::pipeline;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_dense(tape: &mut Tape, w: &[usize], b: usize) -> Dense {
        Dense { w: tape.leaf(Tensor::zeros(w), true), b: tape.leaf(Tensor::zeros(&[b]), true) }
    }

    #[test]
    fn default_config_is_valid_and_layout_is_consistent() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let layout = param_layout(&cfg).unwrap();
        assert_eq!(layout.first().unwrap().shape, vec![16, 1, 16]);
        assert_eq!(layout.last().unwrap().name, "final.b");
        let names: std::collections::BTreeSet<_> = layout.iter().map(|p| &p.name).collect();
        assert_eq!(names.len(), layout.len());
        let p = init_params(&cfg, 1).unwrap();
        p.validate(&cfg).unwrap();
        assert_eq!(p.running.len(), 8);
    }

    #[test]
    fn config_validation() {
        let bad = [
            ModelConfig { kernels: vec![8, 16, 8, 8], ..Default::default() },
            ModelConfig { final_kernel: 8, ..Default::default() },
            ModelConfig { segment_length: 1000, ..Default::default() },
            ModelConfig { channels: vec![2, 32, 64, 64], ..Default::default() },
            ModelConfig { channels: vec![16, 32], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))), "{cfg:?}");
            assert!(init_params(&cfg, 0).is_err());
        }
    }

    #[test]
    fn improved_relu_overrides_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap(), true);
        let fc = zero_dense(&mut tape, &[1, 2], 1);
        let y0 = improved_relu(&mut tape, x, fc, Some(0.0)).unwrap();
        assert_eq!(tape.value(y0).data(), &[1.0, 0.0, 2.0, 0.0]);
        let y1 = improved_relu(&mut tape, x, fc, Some(1.0)).unwrap();
        assert_eq!(tape.value(y1).data(), tape.value(x).data());
        // Zero FC gives alpha = sigmoid(0) = 0.5.
        let yh = improved_relu(&mut tape, x, fc, None).unwrap();
        assert_eq!(tape.value(yh).data(), &[1.0, -0.5, 2.0, -1.0]);
    }

    #[test]
    fn improved_relu_pools_positive_and_negative_parts() {
        // fc picks p with weight 1 and q with weight 0: alpha = sigmoid(0.75).
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(&[1]), true);
        let y = improved_relu(&mut tape, x, Dense { w, b }, None).unwrap();
        let a = 1.0 / (1.0 + (-0.75f64).exp());
        assert!((tape.value(y).data()[1] + a).abs() < 1e-15);
        // and q with weight 1: alpha = sigmoid(-0.75).
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![1.0, -1.0, 2.0, -2.0]).unwrap(), true);
        let w = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap(), true);
        let b = tape.leaf(Tensor::zeros(&[1]), true);
        let y = improved_relu(&mut tape, x, Dense { w, b }, None).unwrap();
        assert!((tape.value(y).data()[1] + (1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn improved_relu_rejects_bad_fc() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4]), true);
        let fc = zero_dense(&mut tape, &[2, 2], 2);
        assert!(matches!(improved_relu(&mut tape, x, fc, None), Err(ModelError::Shape(_))));
    }

    #[test]
    fn skip_connect_averages_channels() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap(), true);
        let identity = Dense {
            w: tape.leaf(Tensor::new(&[1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap(), true),
            b: tape.leaf(Tensor::zeros(&[1]), true),
        };
        let y = skip_connect(&mut tape, e, identity, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

        let same = tape.leaf(Tensor::new(&[1, 3, 3], [0.5, -1.0, 2.0].repeat(3)).unwrap(), true);
        let y = skip_connect(&mut tape, same, identity, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);

        let zero = zero_dense(&mut tape, &[4, 1, 3], 4);
        let y = skip_connect(&mut tape, same, zero, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        assert_eq!(tape.value(y).shape(), &[1, 4, 3]);

        assert_eq!(
            skip_connect(&mut tape, same, zero, 6).unwrap_err(),
            ModelError::ResolutionMismatch { expected: 6, got: 3 }
        );
    }

    fn zero_attention(tape: &mut Tape, c: usize, r: usize) -> AttentionParams {
        AttentionParams {
            fc1: zero_dense(tape, &[c / r, c], c / r),
            fc2: zero_dense(tape, &[c, c / r], c),
            spatial: zero_dense(tape, &[1, 2, 7], 1),
        }
    }

    #[test]
    fn zero_attention_scales_by_a_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let xt = rand_tensor(&mut rng, &[2, 8, 12]);
        let x = tape.leaf(xt.clone(), true);
        let p = zero_attention(&mut tape, 8, 4);
        let ac = channel_attention(&mut tape, x, &p).unwrap();
        assert!(tape.value(ac).data().iter().all(|v| *v == 0.5));
        let as_ = spatial_attention(&mut tape, x, p.spatial).unwrap();
        assert_eq!(tape.value(as_).shape(), &[2, 1, 12]);
        assert!(tape.value(as_).data().iter().all(|v| *v == 0.5));
        let y = attention_block(&mut tape, x, &p, &Overrides::default()).unwrap();
        let expected: Vec<f64> = xt.data().iter().map(|v| 0.25 * v).collect();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn attention_overrides() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let xt = rand_tensor(&mut rng, &[3, 4, 5]);
        let x = tape.leaf(xt.clone(), true);
        let p = AttentionParams {
            fc1: Dense {
                w: tape.leaf(rand_tensor(&mut rng, &[1, 4]), true),
                b: tape.leaf(rand_tensor(&mut rng, &[1]), true),
            },
            fc2: Dense {
                w: tape.leaf(rand_tensor(&mut rng, &[4, 1]), true),
                b: tape.leaf(rand_tensor(&mut rng, &[4]), true),
            },
            spatial: Dense {
                w: tape.leaf(rand_tensor(&mut rng, &[1, 2, 7]), true),
                b: tape.leaf(rand_tensor(&mut rng, &[1]), true),
            },
        };
        let ones = Overrides { channel_attention: Some(1.0), spatial_attention: Some(1.0), ..Default::default() };
        let y = attention_block(&mut tape, x, &p, &ones).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
        let halves = Overrides { channel_attention: Some(0.5), spatial_attention: Some(0.5), ..Default::default() };
        let y = attention_block(&mut tape, x, &p, &halves).unwrap();
        let expected: Vec<f64> = xt.data().iter().map(|v| 0.25 * v).collect();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn attention_weights_stay_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let x = tape.leaf(rand_tensor(&mut rng, &[1, 4, 6]), false);
            let mut dense = |tape: &mut Tape, w: &[usize], b: usize| Dense {
                w: tape.leaf(rand_tensor(&mut rng, w), false),
                b: tape.leaf(rand_tensor(&mut rng, &[b]), false),
            };
            let p = AttentionParams {
                fc1: dense(&mut tape, &[1, 4], 1),
                fc2: dense(&mut tape, &[4, 1], 4),
                spatial: dense(&mut tape, &[1, 2, 7], 1),
            };
            let ac = channel_attention(&mut tape, x, &p).unwrap();
            let as_ = spatial_attention(&mut tape, x, p.spatial).unwrap();
            for v in tape.value(ac).data().iter().chain(tape.value(as_).data()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 4, 9]),
            rand_tensor(&mut rng, &[1, 4]),
            rand_tensor(&mut rng, &[1]),
            rand_tensor(&mut rng, &[4, 1]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[1, 2, 7]),
            rand_tensor(&mut rng, &[1]),
            rand_tensor(&mut rng, &[2, 4, 9]),
        ];
        let params = |v: &[Var]| AttentionParams {
            fc1: Dense { w: v[1], b: v[2] },
            fc2: Dense { w: v[3], b: v[4] },
            spatial: Dense { w: v[5], b: v[6] },
        };
        let weighted = |t: &mut Tape, y: Var, r: Var| -> crate::autograd::Result<Var> {
            let p = t.mul(y, r)?;
            Ok(t.sum(p))
        };
        let r = check_gradients(&inputs, 1e-5, |t, v| {
            let y = attention_block(t, v[0], &params(v), &Overrides::default()).unwrap();
            weighted(t, y, v[7])
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
        let relu_inputs =
            vec![inputs[0].clone(), rand_tensor(&mut rng, &[4, 8]), rand_tensor(&mut rng, &[4]), inputs[7].clone()];
        let r = check_gradients(&relu_inputs, 1e-5, |t, v| {
            let y = improved_relu(t, v[0], Dense { w: v[1], b: v[2] }, None).unwrap();
            weighted(t, y, v[3])
        })
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    fn run_forward(cfg: &ModelConfig, params: &Parameters, x: &Tensor, mode: Mode) -> (Tensor, Vec<BatchStats>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let xv = tape.leaf(x.clone(), false);
        let out = forward(&mut tape, cfg, &vars, &params.running, xv, mode, &Overrides::default()).unwrap();
        (tape.value(out.output).clone(), out.batch_stats)
    }

    #[test]
    fn forward_preserves_shape() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for b in [1, 4] {
            let x = rand_tensor(&mut rng, &[b, 1, 1024]);
            let (y, stats) = run_forward(&cfg, &params, &x, Mode::Train);
            assert_eq!(y.shape(), &[b, 1, 1024]);
            assert_eq!(stats.len(), 8);
            let y = predict(&cfg, &params, x.clone()).unwrap();
            assert_eq!(y.shape(), &[b, 1, 1024]);
            assert_eq!(y, predict(&cfg, &params, x).unwrap());
        }
    }

    #[test]
    fn forward_rejects_wrong_length_and_params() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg, 0).unwrap();
        assert!(matches!(predict(&cfg, &params, Tensor::zeros(&[1, 1, 16])), Err(ModelError::Shape(_))));
        let other = init_params(&ModelConfig { channels: vec![8, 8], ..ModelConfig::micro() }, 0).unwrap();
        assert!(matches!(other.validate(&cfg), Err(ModelError::ConfigMismatch(_))));
        let short = Parameters { tensors: params.tensors[1..].to_vec(), running: params.running.clone() };
        assert!(matches!(predict(&cfg, &short, Tensor::zeros(&[1, 1, 32])), Err(ModelError::ConfigMismatch(_))));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg, 9).unwrap();
        let x = Tensor::zeros(&[2, 1, 32]);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = run_forward(&cfg, &params, &x, mode);
            assert!(y.data().iter().all(|v| *v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn attention_flag_and_bn_order_change_the_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 1, 32]);
        for cfg in [
            ModelConfig { attention: false, ..ModelConfig::micro() },
            ModelConfig { bn_before_activation: false, ..ModelConfig::micro() },
        ] {
            let params = init_params(&cfg, 1).unwrap();
            params.validate(&cfg).unwrap();
            let (y, _) = run_forward(&cfg, &params, &x, Mode::Train);
            assert_eq!(y.shape(), &[2, 1, 32]);
        }
        let with = param_layout(&ModelConfig::micro()).unwrap().len();
        let without = param_layout(&ModelConfig { attention: false, ..ModelConfig::micro() }).unwrap().len();
        assert_eq!(with - without, 2 * 6);
    }

    #[test]
    fn micro_network_gradients_match_finite_differences() {
        let cfg = ModelConfig::micro();
        let params = init_params(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[2, 1, 32]);
        let clean = rand_tensor(&mut rng, &[2, 1, 32]);
        let running = params.running.clone();
        for mode in [Mode::Train, Mode::Eval] {
            let report = check_gradients(&params.tensors, 1e-5, |t, v| {
                let xv = t.leaf(x.clone(), false);
                let cv = t.leaf(clean.clone(), false);
                let out = forward(t, &cfg, v, &running, xv, mode, &Overrides::default()).unwrap();
                t.mse_loss(out.output, cv)
            })
            .unwrap();
            assert!(report.max_rel_error() < 1e-3, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn init_is_deterministic_and_uniform() {
        let cfg = ModelConfig::default();
        assert_eq!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 3).unwrap());
        assert_ne!(init_params(&cfg, 3).unwrap(), init_params(&cfg, 4).unwrap());
        let layout = param_layout(&cfg).unwrap();
        let params = init_params(&cfg, 3).unwrap();
        for (spec, t) in layout.iter().zip(&params.tensors) {
            if spec.name.ends_with(".gamma") {
                assert!(t.data().iter().all(|v| *v == 1.0));
            } else if spec.name.ends_with(".b") || spec.name.ends_with(".beta") {
                assert!(t.data().iter().all(|v| *v == 0.0));
            }
        }

        // One [64, 64, 8] weight over several seeds: 10^5+ draws from U(-s, s).
        let fan = 64 * 8 + 64 * 8;
        let s = (6.0f64 / fan as f64).sqrt();
        let mut draws = Vec::new();
        let mut seed = 0;
        while draws.len() < 100_000 {
            let p = init_params(&cfg, seed).unwrap();
            let idx = layout.iter().position(|p| p.name == "dec3.tconv.w").unwrap();
            assert_eq!(p.tensors[idx].shape(), &[64, 64, 8]);
            draws.extend_from_slice(p.tensors[idx].data());
            seed += 1;
        }
        let n = draws.len() as f64;
        assert!(draws.iter().all(|v| v.abs() <= s));
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected_var = s * s / 3.0;
        // Standard errors: mean s/sqrt(3n), variance ~ s^2 * sqrt(4/45n).
        assert!(mean.abs() < 5.0 * s / (3.0 * n).sqrt(), "mean {mean}");
        assert!((var - expected_var).abs() < 5.0 * s * s * (4.0 / (45.0 * n)).sqrt(), "var {var} vs {expected_var}");
        let max = draws.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > 0.99 * s);
    }

    #[test]
    fn loss_matches_pipeline_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, &[3, 1, 20]);
        let b = rand_tensor(&mut rng, &[3, 1, 20]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone(), false), tape.leaf(b.clone(), false));
        let l = loss(&mut tape, av, bv).unwrap();
        let oracle = pipeline::mse(a.data(), b.data()).unwrap();
        assert!((tape.value(l).item().unwrap() - oracle).abs() < 1e-15);
        let same = loss(&mut tape, av, av).unwrap();
        assert_eq!(tape.value(same).item(), Some(0.0));
        let shifted = tape.leaf(Tensor::new(&[3, 1, 20], a.data().iter().map(|v| v + 0.3).collect()).unwrap(), false);
        let off = loss(&mut tape, shifted, av).unwrap();
        assert!((tape.value(off).item().unwrap() - 0.09).abs() < 1e-12);
        let wrong = tape.leaf(Tensor::zeros(&[3, 1, 21]), false);
        assert!(loss(&mut tape, av, wrong).is_err());
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        let cfg = ModelConfig::micro();
        let mut failures = 0;
        for seed in 0..50u64 {
            let params = init_params(&cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let clean = rand_tensor(&mut rng, &[1, 1, 32]);
            let noisy =
                Tensor::new(&[1, 1, 32], clean.data().iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect())
                    .unwrap();
            let eval = |tensors: &[Tensor]| -> (f64, Vec<Tensor>) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
                let xv = tape.leaf(noisy.clone(), false);
                let cv = tape.leaf(clean.clone(), false);
                let out =
                    forward(&mut tape, &cfg, &vars, &params.running, xv, Mode::Train, &Overrides::default()).unwrap();
                let l = loss(&mut tape, out.output, cv).unwrap();
                let value = tape.value(l).item().unwrap();
                tape.backward(l).unwrap();
                (value, vars.iter().map(|v| tape.grad(*v).unwrap()).collect())
            };
            let (before, grads) = eval(&params.tensors);
            let stepped: Vec<Tensor> = params
                .tensors
                .iter()
                .zip(&grads)
                .map(|(t, g)| {
                    Tensor::new(t.shape(), t.data().iter().zip(g.data()).map(|(p, g)| p - 1e-4 * g).collect()).unwrap()
                })
                .collect();
            let (after, _) = eval(&stepped);
            if after >= before {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} seeds did not decrease");
    }

    #[test]
    fn running_stats_update() {
        let mut r = RunningStats::new(1);
        r.update(&BatchStats { mean: vec![2.0], var: vec![3.0], count: 4 }, 0.5);
        assert_eq!(r.mean, vec![1.0]);
        assert_eq!(r.var, vec![0.5 + 0.5 * 4.0]);
    }
}
