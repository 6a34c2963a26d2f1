use std::sync::OnceLock;

use super::conv::{self, Geometry};
use super::{shape_err, AutogradError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Per-channel batch statistics from a training-mode batch norm
/// (`var` is the biased variance used for normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values per channel (`batch * length`).
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: Geometry },
    ConvTranspose { x: Var, w: Var, b: Var, geom: Geometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    PoolSpatial { x: Var, kind: PoolKind, argmax: Vec<usize> },
    PoolChannel { x: Var, kind: PoolKind, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    NegPart(Var),
    Concat { parts: Vec<Var> },
    ScaleChannels { x: Var, gate: Var },
    ScalePositions { x: Var, gate: Var },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv1d",
            Op::ConvTranspose { .. } => "conv_transpose1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::PoolSpatial { .. } => "pool_spatial",
            Op::PoolChannel { .. } => "pool_channel",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::NegPart(_) => "neg_part",
            Op::Concat { .. } => "concat_channels",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ScalePositions { .. } => "scale_positions",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MseLoss(..) => "mse_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

fn check_finite_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("ASCNET_CHECK_FINITE").is_ok_and(|v| v == "1"))
}

/// A single-threaded record of operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients are kept only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("gradient shape"))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        if check_finite_enabled() {
            assert!(value.all_finite(), "non-finite output from {}", op.name());
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims3(&self, v: Var) -> Result<(usize, usize, usize)> {
        self.value(v).dims3()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn check_conv_params(&self, w: Var, b: Var, c_out: usize) -> Result<()> {
        if self.value(b).shape() != [c_out] {
            return Err(shape_err(format!("bias shape {:?}, expected [{c_out}]", self.value(b).shape())));
        }
        if self.value(w).dims3()?.2 == 0 {
            return Err(shape_err("kernel size must be at least 1"));
        }
        Ok(())
    }

    /// 1-D cross-correlation with "same" zero padding:
    /// `x [B, Cin, N]`, `w [Cout, Cin, K]`, `b [Cout]` → `[B, Cout, ceil(N / stride)]`.
    /// Asymmetric padding puts the extra zero on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, c_in, n) = self.dims3(x)?;
        let (c_out, wc_in, k) = self.dims3(w)?;
        if wc_in != c_in || stride == 0 {
            return Err(shape_err(format!("conv1d: input channels {c_in}, weight {wc_in}, stride {stride}")));
        }
        self.check_conv_params(w, b, c_out)?;
        let geom = Geometry::same(batch, c_in, c_out, k, n, stride);
        let mut y = conv::forward(&geom, self.value(x).data(), self.value(w).data());
        add_channel_bias(&mut y, self.value(b).data(), geom.n_out);
        let out = Tensor::new(&[batch, c_out, geom.n_out], y)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution, the adjoint of [`Tape::conv1d`] with the same
    /// kernel and stride: `x [B, Cin, N]`, `w [Cin, Cout, K]`, `b [Cout]` →
    /// `[B, Cout, N * stride]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, c_in, n) = self.dims3(x)?;
        let (wc_in, c_out, k) = self.dims3(w)?;
        if wc_in != c_in || stride == 0 {
            return Err(shape_err(format!("conv_transpose1d: input channels {c_in}, weight {wc_in}, stride {stride}")));
        }
        self.check_conv_params(w, b, c_out)?;
        // Geometry of the forward convolution this op is the adjoint of.
        let geom = Geometry::same(batch, c_out, c_in, k, n * stride, stride);
        debug_assert_eq!(geom.n_out, n);
        let mut y = conv::adjoint(&geom, self.value(x).data(), self.value(w).data());
        add_channel_bias(&mut y, self.value(b).data(), geom.n_in);
        let out = Tensor::new(&[batch, c_out, geom.n_in], y)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, b, geom }, &[x, w, b]))
    }

    /// Training-mode batch normalization over `(batch, length)` per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, c, n) = self.dims3(x)?;
        self.check_affine(gamma, beta, c)?;
        let count = batch * n;
        if count < 2 {
            return Err(AutogradError::DegenerateBatch(count));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..batch {
                s += xd[(b * c + ch) * n..][..n].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..batch {
                v += xd[(b * c + ch) * n..][..n].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * n;
                for i in base..base + n {
                    x_hat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * x_hat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::new(&[batch, c, n], y)?;
        let op = Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats: true };
        let var_out = self.push(out, op, &[x, gamma, beta]);
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (batch, c, n) = self.dims3(x)?;
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("running statistics length"));
        }
        let xd = self.value(x).data();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut x_hat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for b in 0..batch {
            for ch in 0..c {
                let base = (b * c + ch) * n;
                for i in base..base + n {
                    x_hat[i] = (xd[i] - running_mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * x_hat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::new(&[batch, c, n], y)?;
        // Fixed statistics: backward treats the map as affine in x.
        let op = Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats: false };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!("batch norm affine parameters must be [{c}]")));
        }
        Ok(())
    }

    /// Reduces over the length axis: `[B, C, N]` → `[B, C, 1]`.
    /// Max routes gradient to the first maximal position.
    pub fn pool_spatial(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (batch, c, n) = self.dims3(x)?;
        if n == 0 {
            return Err(shape_err("pool over empty axis"));
        }
        let xd = self.value(x).data();
        let mut y = vec![0.0; batch * c];
        let mut argmax = Vec::new();
        for (r, row) in xd.chunks_exact(n).enumerate() {
            match kind {
                PoolKind::Avg => y[r] = row.iter().sum::<f64>() / n as f64,
                PoolKind::Max => {
                    let (idx, v) = first_max(row.iter().copied());
                    y[r] = v;
                    argmax.push(idx);
                }
            }
        }
        let out = Tensor::new(&[batch, c, 1], y)?;
        Ok(self.push(out, Op::PoolSpatial { x, kind, argmax }, &[x]))
    }

    /// Reduces over the channel axis: `[B, C, N]` → `[B, 1, N]`.
    pub fn pool_channel(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (batch, c, n) = self.dims3(x)?;
        if c == 0 {
            return Err(shape_err("pool over empty axis"));
        }
        let xd = self.value(x).data();
        let mut y = vec![0.0; batch * n];
        let mut argmax = Vec::new();
        for b in 0..batch {
            for t in 0..n {
                let column = (0..c).map(|ch| xd[(b * c + ch) * n + t]);
                match kind {
                    PoolKind::Avg => y[b * n + t] = column.sum::<f64>() / c as f64,
                    PoolKind::Max => {
                        let (idx, v) = first_max(column);
                        y[b * n + t] = v;
                        argmax.push(idx);
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, 1, n], y)?;
        Ok(self.push(out, Op::PoolChannel { x, kind, argmax }, &[x]))
    }

    /// Affine map `x [B, Fin]`, `w [Fout, Fin]`, `b [Fout]` → `[B, Fout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, f_in) = self.value(x).dims2()?;
        let (f_out, wf_in) = self.value(w).dims2()?;
        if wf_in != f_in || self.value(b).shape() != [f_out] {
            return Err(shape_err(format!(
                "linear: input {f_in}, weight {:?}, bias {:?}",
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut y = vec![0.0; batch * f_out];
        for r in 0..batch {
            let xr = &xd[r * f_in..][..f_in];
            for o in 0..f_out {
                let wr = &wd[o * f_in..][..f_in];
                y[r * f_out + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let out = Tensor::new(&[batch, f_out], y)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape");
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `max(x, 0)`; the subgradient at 0 is 1.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `min(x, 0)`; the subgradient at 0 is 0.
    pub fn neg_part(&mut self, a: Var) -> Var {
        self.map(a, |x| x.min(0.0), Op::NegPart(a))
    }

    /// `(max(x, 0), min(x, 0))`. The parts sum to `x`; at `x = 0` the
    /// gradient flows through the positive part.
    pub fn split_posneg(&mut self, a: Var) -> (Var, Var) {
        (self.relu(a), self.neg_part(a))
    }

    /// Concatenates along axis 1. Inputs must agree on axis 0 and on all
    /// trailing axes.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let shape0 = self.value(*first).shape().to_vec();
        if shape0.len() < 2 {
            return Err(shape_err("concat needs rank >= 2"));
        }
        let batch = shape0[0];
        let tail: usize = shape0[2..].iter().product();
        let mut channels = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != shape0.len() || s[0] != batch || s[2..] != shape0[2..] {
                return Err(shape_err(format!("concat {s:?} with {shape0:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(batch * channels * tail);
        for b in 0..batch {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[1] * tail;
                data.extend_from_slice(&t.data()[b * block..][..block]);
            }
        }
        let mut shape = shape0.clone();
        shape[1] = channels;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// `x [B, C, N] * gate [B, C, 1]`, broadcasting the gate over length.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (batch, c, n) = self.dims3(x)?;
        if self.value(gate).shape() != [batch, c, 1] {
            return Err(shape_err(format!(
                "channel gate {:?} for input {:?}",
                self.value(gate).shape(),
                [batch, c, n]
            )));
        }
        let (xd, gd) = (self.value(x).data(), self.value(gate).data());
        let data = xd.chunks_exact(n).zip(gd).flat_map(|(row, g)| row.iter().map(move |v| v * g)).collect();
        let out = Tensor::new(&[batch, c, n], data)?;
        Ok(self.push(out, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    /// `x [B, C, N] * gate [B, 1, N]`, broadcasting the gate over channels.
    pub fn scale_positions(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (batch, c, n) = self.dims3(x)?;
        if self.value(gate).shape() != [batch, 1, n] {
            return Err(shape_err(format!(
                "position gate {:?} for input {:?}",
                self.value(gate).shape(),
                [batch, c, n]
            )));
        }
        let (xd, gd) = (self.value(x).data(), self.value(gate).data());
        let mut data = Vec::with_capacity(xd.len());
        for (r, row) in xd.chunks_exact(n).enumerate() {
            let g = &gd[(r / c) * n..][..n];
            data.extend(row.iter().zip(g).map(|(v, g)| v * g));
        }
        let out = Tensor::new(&[batch, c, n], data)?;
        Ok(self.push(out, Op::ScalePositions { x, gate }, &[x, gate]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::MseLoss(a, b), &[a, b]))
    }

    /// Back-propagates from a scalar `loss`. Can be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(AutogradError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(AutogradError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Keep gradients for leaves only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if wants(*x) {
                    let dx = conv::adjoint(geom, g, val(*w));
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if wants(*w) {
                    let dw = conv::weight_grad(geom, g, val(*x));
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                let db = channel_sums(g, geom.batch, geom.c_out, geom.n_out);
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // geom describes the forward convolution from the output back to x.
                if wants(*x) {
                    let dx = conv::forward(geom, g, val(*w));
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if wants(*w) {
                    let dw = conv::weight_grad(geom, val(*x), g);
                    acc(*w, &mut |d| add_into(d, &dw));
                }
                let db = channel_sums(g, geom.batch, geom.c_in, geom.n_in);
                acc(*b, &mut |d| add_into(d, &db));
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats } => {
                let (batch, c, n) = nodes[x.0].value.dims3().expect("rank 3");
                let count = (batch * n) as f64;
                let gm = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (r, (grow, xrow)) in g.chunks_exact(n).zip(x_hat.chunks_exact(n)).enumerate() {
                    let ch = r % c;
                    for (gv, xv) in grow.iter().zip(xrow) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                acc(*beta, &mut |d| add_into(d, &sum_g));
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*x, &mut |d| {
                    for (r, ((drow, grow), xrow)) in
                        d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(x_hat.chunks_exact(n)).enumerate()
                    {
                        let ch = r % c;
                        let s = inv_std[ch];
                        if !batch_stats {
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += gm[ch] * s * gv;
                            }
                        } else {
                            let k = gm[ch] * s / count;
                            for ((dv, gv), xv) in drow.iter_mut().zip(grow).zip(xrow) {
                                *dv += k * (count * gv - sum_g[ch] - xv * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::PoolSpatial { x, kind, argmax } => {
                let n = nodes[x.0].value.shape()[2];
                acc(*x, &mut |d| {
                    for (r, row) in d.chunks_exact_mut(n).enumerate() {
                        match kind {
                            PoolKind::Avg => row.iter_mut().for_each(|v| *v += g[r] / n as f64),
                            PoolKind::Max => row[argmax[r]] += g[r],
                        }
                    }
                });
            }
            Op::PoolChannel { x, kind, argmax } => {
                let (batch, c, n) = nodes[x.0].value.dims3().expect("rank 3");
                acc(*x, &mut |d| {
                    for b in 0..batch {
                        for t in 0..n {
                            let gv = g[b * n + t];
                            match kind {
                                PoolKind::Avg => {
                                    for ch in 0..c {
                                        d[(b * c + ch) * n + t] += gv / c as f64;
                                    }
                                }
                                PoolKind::Max => d[(b * c + argmax[b * n + t]) * n + t] += gv,
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (batch, f_in) = nodes[x.0].value.dims2().expect("rank 2");
                let f_out = nodes[b.0].value.len();
                let (xd, wd) = (val(*x), val(*w));
                acc(*x, &mut |d| {
                    for r in 0..batch {
                        for o in 0..f_out {
                            let gv = g[r * f_out + o];
                            for (dv, wv) in d[r * f_in..][..f_in].iter_mut().zip(&wd[o * f_in..][..f_in]) {
                                *dv += gv * wv;
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for r in 0..batch {
                        for o in 0..f_out {
                            let gv = g[r * f_out + o];
                            for (dv, xv) in d[o * f_in..][..f_in].iter_mut().zip(&xd[r * f_in..][..f_in]) {
                                *dv += gv * xv;
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for r in 0..batch {
                        add_into(d, &g[r * f_out..][..f_out]);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bd).for_each(|((dv, gv), y)| *dv += gv * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(ad).for_each(|((dv, gv), x)| *dv += gv * x));
            }
            Op::Scale(a, f) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(dv, gv)| *dv += f * gv)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((dv, gv), s)| *dv += gv * s * (1.0 - s)));
            }
            Op::Relu(a) => {
                let xd = val(*a);
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(xd).for_each(|((dv, gv), x)| {
                        if *x >= 0.0 {
                            *dv += gv
                        }
                    })
                });
            }
            Op::NegPart(a) => {
                let xd = val(*a);
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(xd).for_each(|((dv, gv), x)| {
                        if *x < 0.0 {
                            *dv += gv
                        }
                    })
                });
            }
            Op::Concat { parts } => {
                let shape = node.value.shape();
                let batch = shape[0];
                let tail: usize = shape[2..].iter().product();
                let total = shape[1] * tail;
                let mut start = 0;
                for p in parts {
                    let block = nodes[p.0].value.shape()[1] * tail;
                    acc(*p, &mut |d| {
                        for b in 0..batch {
                            add_into(&mut d[b * block..][..block], &g[b * total + start..][..block]);
                        }
                    });
                    start += block;
                }
            }
            Op::ScaleChannels { x, gate } => {
                let n = nodes[x.0].value.shape()[2];
                let (xd, gd) = (val(*x), val(*gate));
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        drow.iter_mut().zip(grow).for_each(|(dv, gv)| *dv += gv * gd[r]);
                    }
                });
                acc(*gate, &mut |d| {
                    for (r, (grow, xrow)) in g.chunks_exact(n).zip(xd.chunks_exact(n)).enumerate() {
                        d[r] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::ScalePositions { x, gate } => {
                let (_, c, n) = nodes[x.0].value.dims3().expect("rank 3");
                let (xd, gd) = (val(*x), val(*gate));
                acc(*x, &mut |d| {
                    for (r, (drow, grow)) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).enumerate() {
                        let gate_row = &gd[(r / c) * n..][..n];
                        drow.iter_mut().zip(grow).zip(gate_row).for_each(|((dv, gv), s)| *dv += gv * s);
                    }
                });
                acc(*gate, &mut |d| {
                    for (r, (grow, xrow)) in g.chunks_exact(n).zip(xd.chunks_exact(n)).enumerate() {
                        let drow = &mut d[(r / c) * n..][..n];
                        drow.iter_mut().zip(grow).zip(xrow).for_each(|((dv, gv), x)| *dv += gv * x);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::MseLoss(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let k = 2.0 * g[0] / ad.len() as f64;
                acc(*a, &mut |d| {
                    for ((dv, x), y) in d.iter_mut().zip(ad).zip(bd) {
                        *dv += k * (x - y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, x), y) in d.iter_mut().zip(ad).zip(bd) {
                        *dv -= k * (x - y);
                    }
                });
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn first_max(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn add_channel_bias(y: &mut [f64], bias: &[f64], n: usize) {
    let c = bias.len();
    for (r, row) in y.chunks_exact_mut(n).enumerate() {
        let b = bias[r % c];
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], batch: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (r, row) in g.chunks_exact(n).take(batch * c).enumerate() {
        out[r % c] += row.iter().sum::<f64>();
    }
    out
}
