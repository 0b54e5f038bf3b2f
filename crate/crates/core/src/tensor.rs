//! Dense double-precision tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an arena that records every operation applied through it.
//! [`TensorId`] handles are indices into that arena, so an id is only
//! meaningful for the graph that created it. [`Graph::backward`] walks the
//! tape once in reverse construction order and accumulates gradients into
//! every leaf created with `requires_grad = true`; calling it again without
//! [`Graph::zero_grad`] sums into the existing gradients.
//!
//! A graph and the tensors recorded in it are confined to one thread. The
//! convolution kernels fan work out over the batch dimension internally, but
//! every output element is written by exactly one task, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(usize);

/// Whether batch-dependent layers use batch statistics or stored ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics owned by a batchnorm layer, one entry per channel.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// x of shape (N, C, L) scaled per channel by s of shape (N, C).
    ChannelScale(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Reshape(TensorId),
    Concat(Vec<TensorId>, usize),
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    Softplus(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Powf(TensorId, f64),
    ClampMin(TensorId, f64),
    ClampMax(TensorId, f64),
    Softmax(TensorId, usize),
    LogSoftmax(TensorId, usize),
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        /// Statistics used for normalization (batch stats in train mode,
        /// stored running stats in eval mode).
        mean: Vec<f64>,
        var: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(TensorId),
    AvgPool {
        x: TensorId,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        x: TensorId,
        argmax: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Operation tape plus value storage for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Inserts an input tensor. Only leaves may require gradients.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        let n = numel_of(shape);
        if n == 0 {
            return Err(Error::invalid(format!("leaf: empty shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::invalid(format!(
                "leaf: shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Inserts a tensor that never receives gradients (targets, masks).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: TensorId) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn numel(&self, t: TensorId) -> usize {
        self.nodes[t.0].data.len()
    }

    /// Accumulated gradient of a leaf; `None` until backward has reached it.
    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ---- elementwise binary ------------------------------------------------

    /// Elementwise addition. The smaller operand may broadcast if its shape
    /// is a suffix of the other's, i.e. broadcasting happens over size-one
    /// leading axes only.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "add")
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, "mul")
    }

    fn binary(&mut self, a: TensorId, b: TensorId, what: &str) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| {
            Error::invalid(format!(
                "{what}: shapes {sa:?} and {sb:?} are not suffix-broadcast compatible"
            ))
        })?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (ma, mb) = (da.len(), db.len());
        let n = numel_of(&out_shape);
        let mut out = Vec::with_capacity(n);
        match what {
            "add" => {
                for i in 0..n {
                    out.push(da[i % ma] + db[i % mb]);
                }
            }
            _ => {
                for i in 0..n {
                    out.push(da[i % ma] * db[i % mb]);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        let op = if what == "add" { Op::Add(a, b) } else { Op::Mul(a, b) };
        Ok(self.push(out_shape, out, rg, op))
    }

    /// Multiplies each channel of `x` (N, C, L) by the matching scalar from
    /// `s` (N, C).
    pub fn channel_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s);
        if sx.len() != 3 || ss.len() != 2 || ss[0] != sx[0] || ss[1] != sx[1] {
            return Err(Error::invalid(format!(
                "channel_scale: expected (N, C, L) and (N, C), got {sx:?} and {ss:?}"
            )));
        }
        let l = sx[2];
        let xd = &self.nodes[x.0].data;
        let sd = &self.nodes[s.0].data;
        let mut out = vec![0.0; xd.len()];
        for (nc, scale) in sd.iter().enumerate() {
            let base = nc * l;
            for i in 0..l {
                out[base + i] = xd[base + i] * scale;
            }
        }
        let rg = self.requires(x) || self.requires(s);
        Ok(self.push(sx, out, rg, Op::ChannelScale(x, s)))
    }

    // ---- scalar and unary ops ----------------------------------------------

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// log(1 + e^x), evaluated in the overflow-safe form.
    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; defined for positive inputs.
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        self.map(x, f64::ln, Op::Ln(x))
    }

    /// x^p for non-negative x. The gradient at x = 0 with p < 1 is taken as 0.
    pub fn powf(&mut self, x: TensorId, p: f64) -> TensorId {
        self.map(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn clamp_min(&mut self, x: TensorId, c: f64) -> TensorId {
        self.map(x, |v| v.max(c), Op::ClampMin(x, c))
    }

    pub fn clamp_max(&mut self, x: TensorId, c: f64) -> TensorId {
        self.map(x, |v| v.min(c), Op::ClampMax(x, c))
    }

    fn map(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.requires(x);
        self.push(shape, out, rg, op)
    }

    // ---- reductions ----------------------------------------------------------

    /// Sum of all elements, as a shape-[1] tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.requires(x);
        self.push(vec![1], vec![s], rg, Op::Sum(x))
    }

    /// Mean of all elements, as a shape-[1] tensor.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let d = &self.nodes[x.0].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.requires(x);
        self.push(vec![1], vec![m], rg, Op::Mean(x))
    }

    // ---- structural ----------------------------------------------------------

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n = numel_of(shape);
        if n != self.numel(x) {
            return Err(Error::invalid(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.requires(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::invalid(format!(
                    "concat: shape {s:?} incompatible with {first:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel_of(&out_shape)];
        let out_block = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let d = self.shape(p)[axis];
            let block = d * inner;
            let src = &self.nodes[p.0].data;
            for o in 0..outer {
                out[o * out_block + offset..o * out_block + offset + block]
                    .copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += block;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out_shape, out, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// Slice of `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "narrow: range {start}..{} invalid for shape {s:?} axis {axis}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let src = &self.nodes[x.0].data;
        let src_block = s[axis] * inner;
        let block = len * inner;
        for o in 0..outer {
            let from = o * src_block + start * inner;
            out[o * block..(o + 1) * block].copy_from_slice(&src[from..from + block]);
        }
        let rg = self.requires(x);
        Ok(self.push(out_shape, out, rg, Op::Narrow { x, axis, start }))
    }

    // ---- softmax family ------------------------------------------------------

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: TensorId, axis: usize, log: bool) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (d, inner) = (shape[axis], shape[axis + 1..].iter().product::<usize>());
        let lanes = numel_of(&shape) / d;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; src.len()];
        for lane in 0..lanes {
            let base = (lane / inner) * d * inner + lane % inner;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..d {
                mx = mx.max(src[base + i * inner]);
            }
            let mut z = 0.0;
            for i in 0..d {
                z += (src[base + i * inner] - mx).exp();
            }
            if log {
                let lz = z.ln() + mx;
                for i in 0..d {
                    out[base + i * inner] = src[base + i * inner] - lz;
                }
            } else {
                for i in 0..d {
                    out[base + i * inner] = (src[base + i * inner] - mx).exp() / z;
                }
            }
        }
        let rg = self.requires(x);
        let op = if log {
            Op::LogSoftmax(x, axis)
        } else {
            Op::Softmax(x, axis)
        };
        Ok(self.push(shape, out, rg, op))
    }

    // ---- dense and convolutional layers ---------------------------------------

    /// y = x W^T + b for x (N, F), w (O, F), b (O).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sb.len() != 1 || sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(Error::invalid(format!(
                "linear: incompatible shapes x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        let (n, f, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(&self.nodes[b.0].data);
        }
        gemm(
            n,
            f,
            o,
            1.0,
            &self.nodes[x.0].data,
            [f as isize, 1],
            &self.nodes[w.0].data,
            [1, f as isize],
            1.0,
            &mut out,
            [o as isize, 1],
        );
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, o], out, rg, Op::Linear { x, w, b }))
    }

    /// 1-d convolution in the cross-correlation convention with zero "same"
    /// padding: x (N, C_in, L), w (C_out, C_in, K) with K odd, b (C_out).
    /// The output length is ceil(L / stride).
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return Err(Error::invalid(format!(
                "conv1d: incompatible ranks x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        if sx[1] != sw[1] || sb[0] != sw[0] {
            return Err(Error::invalid(format!(
                "conv1d: incompatible shapes x {sx:?}, w {sw:?}, b {sb:?}"
            )));
        }
        if sw[2] % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv1d: kernel length {} must be odd for same padding",
                sw[2]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be at least 1"));
        }
        let (n, c_in, l) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let l_out = l.div_ceil(stride);
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; n * c_out * l_out];
        out.par_chunks_mut(c_out * l_out)
            .zip(xd.par_chunks(c_in * l))
            .for_each(|(y_n, x_n)| {
                let cols = im2col(x_n, c_in, l, k, stride, l_out);
                for (co, row) in y_n.chunks_exact_mut(l_out).enumerate() {
                    row.fill(bd[co]);
                }
                gemm(
                    c_out,
                    c_in * k,
                    l_out,
                    1.0,
                    wd,
                    [(c_in * k) as isize, 1],
                    &cols,
                    [l_out as isize, 1],
                    1.0,
                    y_n,
                    [l_out as isize, 1],
                );
            });
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(vec![n, c_out, l_out], out, rg, Op::Conv1d { x, w, b, stride }))
    }

    /// Batch normalization over (N, C, L) with per-channel statistics. Train
    /// mode normalizes by batch statistics and folds them into `stats` with
    /// momentum [`BN_MOMENTUM`]; eval mode reads `stats` and leaves it alone.
    pub fn batchnorm1d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut BnStats,
        mode: Mode,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::invalid(format!("batchnorm1d: expected (N, C, L), got {sx:?}")));
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::invalid(format!(
                "batchnorm1d: parameter length mismatch for {c} channels"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let (mean, var) = match mode {
            Mode::Train => {
                let m = (n * l) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * l;
                        for i in 0..l {
                            s += xd[base + i];
                        }
                    }
                    let mu = s / m;
                    let mut sq = 0.0;
                    for b in 0..n {
                        let base = (b * c + ch) * l;
                        for i in 0..l {
                            let d = xd[base + i] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                    stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * l;
                let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                let (g, be, mu) = (gd[ch], bd[ch], mean[ch]);
                for i in 0..l {
                    out[base + i] = g * (xd[base + i] - mu) * inv + be;
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            sx,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train: mode == Mode::Train,
            },
        ))
    }

    // ---- pooling ---------------------------------------------------------------

    /// Mean over the length axis: (N, C, L) -> (N, C).
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("global_avg_pool: expected (N, C, L), got {s:?}")));
        }
        let l = s[2];
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .chunks_exact(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let rg = self.requires(x);
        Ok(self.push(vec![s[0], s[1]], out, rg, Op::GlobalAvgPool(x)))
    }

    pub fn avg_pool(&mut self, x: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let (s, l_out) = self.pool_shape(x, kernel, stride, "avg_pool")?;
        let l = s[2];
        let mut out = vec![0.0; s[0] * s[1] * l_out];
        let src = &self.nodes[x.0].data;
        for (row_out, row_in) in out.chunks_exact_mut(l_out).zip(src.chunks_exact(l)) {
            for (t, slot) in row_out.iter_mut().enumerate() {
                *slot = row_in[t * stride..t * stride + kernel].iter().sum::<f64>() / kernel as f64;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![s[0], s[1], l_out], out, rg, Op::AvgPool { x, kernel, stride }))
    }

    /// Max pooling; ties resolve to the lowest index.
    pub fn max_pool(&mut self, x: TensorId, kernel: usize, stride: usize) -> Result<TensorId> {
        let (s, l_out) = self.pool_shape(x, kernel, stride, "max_pool")?;
        let l = s[2];
        let mut out = vec![0.0; s[0] * s[1] * l_out];
        let mut argmax = vec![0usize; out.len()];
        let src = &self.nodes[x.0].data;
        for (row, (row_out, row_in)) in out
            .chunks_exact_mut(l_out)
            .zip(src.chunks_exact(l))
            .enumerate()
        {
            for (t, slot) in row_out.iter_mut().enumerate() {
                let mut best = t * stride;
                for i in t * stride + 1..t * stride + kernel {
                    if row_in[i] > row_in[best] {
                        best = i;
                    }
                }
                *slot = row_in[best];
                argmax[row * l_out + t] = row * l + best;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![s[0], s[1], l_out], out, rg, Op::MaxPool { x, argmax }))
    }

    fn pool_shape(&self, x: TensorId, kernel: usize, stride: usize, what: &str) -> Result<(Vec<usize>, usize)> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid(format!("{what}: expected (N, C, L), got {s:?}")));
        }
        if kernel == 0 || stride == 0 || kernel > s[2] {
            return Err(Error::invalid(format!(
                "{what}: kernel {kernel} / stride {stride} invalid for length {}",
                s[2]
            )));
        }
        let l_out = (s[2] - kernel) / stride + 1;
        Ok((s, l_out))
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse pass from a scalar output. Each reachable node is processed
    /// exactly once; the return value is that visit count. Gradients
    /// accumulate (+=) into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: TensorId) -> Result<usize> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(format!(
                "backward: output must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut table: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires(loss) {
            table[loss.0] = Some(vec![1.0]);
        }
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            let Some(g) = table[i].take() else { continue };
            visits += 1;
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                let slot = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (a, b) in slot.iter_mut().zip(&g) {
                    *a += b;
                }
                continue;
            }
            self.propagate(i, &g, &mut table);
        }
        Ok(visits)
    }

    fn propagate(&self, i: usize, g: &[f64], table: &mut [Option<Vec<f64>>]) {
        let send = |t: &mut [Option<Vec<f64>>], p: TensorId, v: Vec<f64>| {
            if !self.requires(p) {
                return;
            }
            match &mut t[p.0] {
                None => t[p.0] = Some(v),
                Some(s) => {
                    for (a, b) in s.iter_mut().zip(v) {
                        *a += b;
                    }
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by backward"),
            &Op::Add(a, b) => {
                send(table, a, reduce_to(g, self.numel(a)));
                send(table, b, reduce_to(g, self.numel(b)));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                let (ma, mb) = (da.len(), db.len());
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * db[i % mb]).collect();
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, v)| v * da[i % ma]).collect();
                send(table, a, reduce_to(&ga, ma));
                send(table, b, reduce_to(&gb, mb));
            }
            &Op::ChannelScale(x, s) => {
                let l = self.shape(x)[2];
                let xd = &self.nodes[x.0].data;
                let sd = &self.nodes[s.0].data;
                let mut gx = vec![0.0; xd.len()];
                let mut gs = vec![0.0; sd.len()];
                for (nc, &sv) in sd.iter().enumerate() {
                    let base = nc * l;
                    let mut acc = 0.0;
                    for i in 0..l {
                        gx[base + i] = g[base + i] * sv;
                        acc += g[base + i] * xd[base + i];
                    }
                    gs[nc] = acc;
                }
                send(table, x, gx);
                send(table, s, gs);
            }
            &Op::Scale(x, c) => send(table, x, g.iter().map(|v| v * c).collect()),
            &Op::AddScalar(x) => send(table, x, g.to_vec()),
            &Op::Sum(x) => send(table, x, vec![g[0]; self.numel(x)]),
            &Op::Mean(x) => {
                let n = self.numel(x);
                send(table, x, vec![g[0] / n as f64; n]);
            }
            &Op::Reshape(x) => send(table, x, g.to_vec()),
            Op::Concat(parts, axis) => {
                let axis = *axis;
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_block = out_shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let d = self.shape(p)[axis];
                    let block = d * inner;
                    let mut gp = vec![0.0; self.numel(p)];
                    for o in 0..outer {
                        gp[o * block..(o + 1) * block]
                            .copy_from_slice(&g[o * out_block + offset..o * out_block + offset + block]);
                    }
                    send(table, p, gp);
                    offset += block;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let sx = self.shape(x);
                let len = self.nodes[i].shape[axis];
                let outer: usize = sx[..axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let src_block = sx[axis] * inner;
                let block = len * inner;
                let mut gx = vec![0.0; self.numel(x)];
                for o in 0..outer {
                    let to = o * src_block + start * inner;
                    gx[to..to + block].copy_from_slice(&g[o * block..(o + 1) * block]);
                }
                send(table, x, gx);
            }
            &Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                send(
                    table,
                    x,
                    g.iter()
                        .zip(xd)
                        .map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Sigmoid(x) => {
                let y = &self.nodes[i].data;
                send(table, x, g.iter().zip(y).map(|(v, &yi)| v * yi * (1.0 - yi)).collect());
            }
            &Op::Softplus(x) => {
                let xd = &self.nodes[x.0].data;
                send(table, x, g.iter().zip(xd).map(|(v, &xi)| v * sigmoid(xi)).collect());
            }
            &Op::Exp(x) => {
                let y = &self.nodes[i].data;
                send(table, x, g.iter().zip(y).map(|(v, &yi)| v * yi).collect());
            }
            &Op::Ln(x) => {
                let xd = &self.nodes[x.0].data;
                send(table, x, g.iter().zip(xd).map(|(v, &xi)| v / xi).collect());
            }
            &Op::Powf(x, p) => {
                let xd = &self.nodes[x.0].data;
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(v, &xi)| {
                        if p == 0.0 || (xi == 0.0 && p < 1.0) {
                            0.0
                        } else {
                            v * p * xi.powf(p - 1.0)
                        }
                    })
                    .collect();
                send(table, x, gx);
            }
            &Op::ClampMin(x, c) => {
                let xd = &self.nodes[x.0].data;
                send(
                    table,
                    x,
                    g.iter()
                        .zip(xd)
                        .map(|(v, &xi)| if xi > c { *v } else { 0.0 })
                        .collect(),
                );
            }
            &Op::ClampMax(x, c) => {
                let xd = &self.nodes[x.0].data;
                send(
                    table,
                    x,
                    g.iter()
                        .zip(xd)
                        .map(|(v, &xi)| if xi < c { *v } else { 0.0 })
                        .collect(),
                );
            }
            &Op::Softmax(x, axis) => {
                let y = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let (d, inner) = (shape[axis], shape[axis + 1..].iter().product::<usize>());
                let lanes = y.len() / d;
                let mut gx = vec![0.0; y.len()];
                for lane in 0..lanes {
                    let base = (lane / inner) * d * inner + lane % inner;
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g[base + j * inner] * y[base + j * inner];
                    }
                    for j in 0..d {
                        let idx = base + j * inner;
                        gx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
                send(table, x, gx);
            }
            &Op::LogSoftmax(x, axis) => {
                let y = &self.nodes[i].data;
                let shape = &self.nodes[i].shape;
                let (d, inner) = (shape[axis], shape[axis + 1..].iter().product::<usize>());
                let lanes = y.len() / d;
                let mut gx = vec![0.0; y.len()];
                for lane in 0..lanes {
                    let base = (lane / inner) * d * inner + lane % inner;
                    let mut gsum = 0.0;
                    for j in 0..d {
                        gsum += g[base + j * inner];
                    }
                    for j in 0..d {
                        let idx = base + j * inner;
                        gx[idx] = g[idx] - y[idx].exp() * gsum;
                    }
                }
                send(table, x, gx);
            }
            &Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (n, f, o) = (sx[0], sx[1], sw[0]);
                let mut gx = vec![0.0; n * f];
                gemm(
                    n,
                    o,
                    f,
                    1.0,
                    g,
                    [o as isize, 1],
                    &self.nodes[w.0].data,
                    [f as isize, 1],
                    0.0,
                    &mut gx,
                    [f as isize, 1],
                );
                let mut gw = vec![0.0; o * f];
                gemm(
                    o,
                    n,
                    f,
                    1.0,
                    g,
                    [1, o as isize],
                    &self.nodes[x.0].data,
                    [f as isize, 1],
                    0.0,
                    &mut gw,
                    [f as isize, 1],
                );
                let mut gb = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                send(table, x, gx);
                send(table, w, gw);
                send(table, b, gb);
            }
            &Op::Conv1d { x, w, b, stride } => {
                let (gx, gw, gb) = conv1d_backward(
                    g,
                    &self.nodes[x.0].data,
                    self.shape(x),
                    &self.nodes[w.0].data,
                    self.shape(w),
                    stride,
                );
                send(table, x, gx);
                send(table, w, gw);
                send(table, b, gb);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let sx = self.shape(x);
                let (n, c, l) = (sx[0], sx[1], sx[2]);
                let m = (n * l) as f64;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                let mut gx = vec![0.0; xd.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                    let mu = mean[ch];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bn in 0..n {
                        let base = (bn * c + ch) * l;
                        for idx in 0..l {
                            let xh = (xd[base + idx] - mu) * inv;
                            sum_g += g[base + idx];
                            sum_gx += g[base + idx] * xh;
                        }
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let scale = gd[ch] * inv;
                    for bn in 0..n {
                        let base = (bn * c + ch) * l;
                        for idx in 0..l {
                            let xh = (xd[base + idx] - mu) * inv;
                            gx[base + idx] = if train {
                                scale * (g[base + idx] - sum_g / m - xh * sum_gx / m)
                            } else {
                                scale * g[base + idx]
                            };
                        }
                    }
                }
                send(table, x, gx);
                send(table, gamma, ggamma);
                send(table, beta, gbeta);
            }
            &Op::GlobalAvgPool(x) => {
                let l = self.shape(x)[2];
                let mut gx = vec![0.0; self.numel(x)];
                for (row, &gv) in gx.chunks_exact_mut(l).zip(g.iter()) {
                    row.fill(gv / l as f64);
                }
                send(table, x, gx);
            }
            &Op::AvgPool { x, kernel, stride } => {
                let l = self.shape(x)[2];
                let l_out = self.nodes[i].shape[2];
                let mut gx = vec![0.0; self.numel(x)];
                for (row_gx, row_g) in gx.chunks_exact_mut(l).zip(g.chunks_exact(l_out)) {
                    for (t, &gv) in row_g.iter().enumerate() {
                        let share = gv / kernel as f64;
                        for slot in &mut row_gx[t * stride..t * stride + kernel] {
                            *slot += share;
                        }
                    }
                }
                send(table, x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let mut gx = vec![0.0; self.numel(x)];
                for (&idx, &gv) in argmax.iter().zip(g.iter()) {
                    gx[idx] += gv;
                }
                send(table, x, gx);
            }
        }
    }
}

/// Output shape for suffix broadcasting, or `None` when incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if is_suffix(b, a) {
        return Some(a.to_vec());
    }
    if is_suffix(a, b) {
        return Some(b.to_vec());
    }
    None
}

/// True when `small` matches the trailing axes of `big`, with nothing but
/// size-one axes in front (after implicit left-padding with ones). This is
/// the exact condition under which the modular indexing in `binary` walks
/// the smaller operand correctly.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let pad = big.len() - small.len();
    (0..=small.len())
        .any(|k| small[..k].iter().all(|&d| d == 1) && small[k..] == big[pad + k..])
}

/// Folds a broadcast gradient back onto an operand with `m` elements by
/// summing the leading repetitions.
fn reduce_to(g: &[f64], m: usize) -> Vec<f64> {
    if g.len() == m {
        return g.to_vec();
    }
    let mut out = vec![0.0; m];
    for (i, v) in g.iter().enumerate() {
        out[i % m] += v;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major matrix multiply c = alpha * a @ b + beta * c with explicit
/// [row, col] strides per operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: [isize; 2],
    b: &[f64],
    sb: [isize; 2],
    beta: f64,
    c: &mut [f64],
    sc: [isize; 2],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa[0],
            sa[1],
            b.as_ptr(),
            sb[0],
            sb[1],
            beta,
            c.as_mut_ptr(),
            sc[0],
            sc[1],
        );
    }
}

/// Range of output positions t with 0 <= t*stride + j - pad < l; empty when
/// the kernel offset j never lands inside the input.
fn patch_range(l: usize, pad: usize, j: usize, stride: usize, l_out: usize) -> (usize, usize) {
    let t_lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let t_hi = if l + pad > j {
        ((l + pad - j - 1) / stride + 1).min(l_out)
    } else {
        0
    };
    (t_lo, t_hi)
}

/// Unrolls one sample (C_in, L) into the (C_in * K, L_out) patch matrix for
/// same padding and the given stride.
fn im2col(x: &[f64], c_in: usize, l: usize, k: usize, stride: usize, l_out: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut cols = vec![0.0; c_in * k * l_out];
    for ci in 0..c_in {
        let src = &x[ci * l..(ci + 1) * l];
        for j in 0..k {
            let row = &mut cols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
            let (t_lo, t_hi) = patch_range(l, pad, j, stride, l_out);
            if t_lo >= t_hi {
                continue;
            }
            if stride == 1 {
                let s0 = t_lo + j - pad;
                row[t_lo..t_hi].copy_from_slice(&src[s0..s0 + (t_hi - t_lo)]);
            } else {
                for (t, slot) in row[t_lo..t_hi].iter_mut().enumerate() {
                    *slot = src[(t_lo + t) * stride + j - pad];
                }
            }
        }
    }
    cols
}

/// Gradients of conv1d with respect to input, weight, and bias.
fn conv1d_backward(
    g: &[f64],
    xd: &[f64],
    sx: &[usize],
    wd: &[f64],
    sw: &[usize],
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c_in, l) = (sx[0], sx[1], sx[2]);
    let (c_out, k) = (sw[0], sw[2]);
    let l_out = l.div_ceil(stride);
    let pad = (k - 1) / 2;

    let mut gx = vec![0.0; n * c_in * l];
    // Per-sample weight gradients are reduced sequentially afterwards so the
    // result does not depend on scheduling.
    let mut per_sample: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n);
    gx.par_chunks_mut(c_in * l)
        .zip(g.par_chunks(c_out * l_out))
        .zip(xd.par_chunks(c_in * l))
        .map(|((gx_n, g_n), x_n)| {
            // gx via cols_g = W^T (C_in*K, C_out) @ g_n, then fold patches back.
            let mut cols_g = vec![0.0; c_in * k * l_out];
            gemm(
                c_in * k,
                c_out,
                l_out,
                1.0,
                wd,
                [1, (c_in * k) as isize],
                g_n,
                [l_out as isize, 1],
                0.0,
                &mut cols_g,
                [l_out as isize, 1],
            );
            for ci in 0..c_in {
                let dst = &mut gx_n[ci * l..(ci + 1) * l];
                for j in 0..k {
                    let row = &cols_g[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
                    let (t_lo, t_hi) = patch_range(l, pad, j, stride, l_out);
                    for t in t_lo..t_hi {
                        dst[t * stride + j - pad] += row[t];
                    }
                }
            }
            // gw_n = g_n (C_out, L_out) @ cols^T.
            let cols = im2col(x_n, c_in, l, k, stride, l_out);
            let mut gw_n = vec![0.0; c_out * c_in * k];
            gemm(
                c_out,
                l_out,
                c_in * k,
                1.0,
                g_n,
                [l_out as isize, 1],
                &cols,
                [1, l_out as isize],
                0.0,
                &mut gw_n,
                [(c_in * k) as isize, 1],
            );
            let mut gb_n = vec![0.0; c_out];
            for (co, row) in g_n.chunks_exact(l_out).enumerate() {
                gb_n[co] = row.iter().sum();
            }
            (gw_n, gb_n)
        })
        .collect_into_vec(&mut per_sample);

    let mut gw = vec![0.0; c_out * c_in * k];
    let mut gb = vec![0.0; c_out];
    for (gw_n, gb_n) in per_sample {
        for (acc, v) in gw.iter_mut().zip(gw_n) {
            *acc += v;
        }
        for (acc, v) in gb.iter_mut().zip(gb_n) {
            *acc += v;
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    // ── finite-difference oracle ─────────────────────────────────────────────

    /// Central finite differences of a scalar-valued builder with respect to
    /// every listed input, rebuilt from scratch per evaluation.
    fn numerical_grads(
        inputs: &[(Vec<usize>, Vec<f64>)],
        build: &dyn Fn(&mut Graph, &[TensorId]) -> TensorId,
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let eval = |points: &[(Vec<usize>, Vec<f64>)]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<TensorId> = points
                .iter()
                .map(|(s, d)| g.leaf(s, d.clone(), true).unwrap())
                .collect();
            let out = build(&mut g, &ids);
            g.data(out)[0]
        };
        inputs
            .iter()
            .enumerate()
            .map(|(which, (_, data))| {
                (0..data.len())
                    .map(|j| {
                        let mut hi = inputs.to_vec();
                        hi[which].1[j] += eps;
                        let mut lo = inputs.to_vec();
                        lo[which].1[j] -= eps;
                        (eval(&hi) - eval(&lo)) / (2.0 * eps)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_grads(inputs: &[(Vec<usize>, Vec<f64>)], build: &dyn Fn(&mut Graph, &[TensorId]) -> TensorId) {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|(s, d)| g.leaf(s, d.clone(), true).unwrap())
            .collect();
        let out = build(&mut g, &ids);
        g.backward(out).unwrap();
        let numeric = numerical_grads(inputs, build, 1e-5);
        for (k, id) in ids.iter().enumerate() {
            let analytic = g.grad(*id).expect("missing gradient");
            for (j, (&a, &n)) in analytic.iter().zip(&numeric[k]).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                assert!(
                    rel < 1e-5,
                    "input {k} coord {j}: analytic {a} vs numeric {n} (rel {rel})"
                );
            }
        }
    }

    fn rand_vec(rng: &mut StdRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    /// Projects a non-scalar op output to a scalar with fixed weights so the
    /// finite-difference check exercises every output coordinate unequally.
    fn project(g: &mut Graph, t: TensorId, seed: u64) -> TensorId {
        let n = g.numel(t);
        let mut rng = StdRng::seed_from_u64(seed);
        let w = g
            .constant(&[n], rand_vec(&mut rng, n, -1.0, 1.0))
            .unwrap();
        let flat = g.reshape(t, &[n]).unwrap();
        let prod = g.mul(flat, w).unwrap();
        g.sum(prod)
    }

    // ── forward semantics ────────────────────────────────────────────────────

    #[test]
    fn add_broadcasts_suffix_only() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.], false).unwrap();
        let b = g.leaf(&[3], vec![10., 20., 30.], false).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.data(y), &[11., 22., 33., 14., 25., 36.]);
        assert_eq!(g.shape(y), &[2, 3]);

        let c = g.leaf(&[2, 1], vec![1., 2.], false).unwrap();
        assert!(g.add(a, c).is_err(), "trailing broadcast must be rejected");
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![0.; 6], false).unwrap();
        let b = g.leaf(&[4], vec![0.; 4], false).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.leaf(&[3], vec![0.5, -0.2, 1.0], true).unwrap();
        // Diamond: x feeds two branches that rejoin.
        let a = g.relu(x);
        let b = g.sigmoid(x);
        let joined = g.add(a, b).unwrap();
        let loss = g.sum(joined);
        let visits = g.backward(loss).unwrap();
        // Nodes reachable from the loss: x, a, b, joined, loss.
        assert_eq!(visits, 5);
    }

    #[test]
    fn conv1d_matches_sliding_dot_product() {
        // Brute-force oracle: y[n,co,t] = b[co] + sum_{ci,j} w[co,ci,j] * x[n,ci,t*s+j-pad].
        fn oracle(
            x: &[f64],
            (n, c_in, l): (usize, usize, usize),
            w: &[f64],
            (c_out, k): (usize, usize),
            b: &[f64],
            s: usize,
        ) -> Vec<f64> {
            let pad = (k - 1) / 2;
            let l_out = l.div_ceil(s);
            let mut y = vec![0.0; n * c_out * l_out];
            for bi in 0..n {
                for co in 0..c_out {
                    for t in 0..l_out {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for j in 0..k {
                                let src = (t * s + j) as isize - pad as isize;
                                if src >= 0 && (src as usize) < l {
                                    acc += w[(co * c_in + ci) * k + j]
                                        * x[(bi * c_in + ci) * l + src as usize];
                                }
                            }
                        }
                        y[(bi * c_out + co) * l_out + t] = acc;
                    }
                }
            }
            y
        }

        let mut rng = StdRng::seed_from_u64(7);
        for &(n, c_in, c_out, l, k, s) in &[
            (1usize, 1usize, 1usize, 5usize, 3usize, 1usize),
            (2, 3, 4, 17, 7, 1),
            (2, 2, 3, 16, 15, 2),
            (1, 4, 2, 9, 1, 1),
            (3, 2, 5, 21, 3, 2),
            // Kernels wider than the input stay valid under same padding.
            (2, 2, 3, 4, 15, 2),
            (1, 1, 2, 2, 7, 1),
        ] {
            let x = rand_vec(&mut rng, n * c_in * l, -2.0, 2.0);
            let w = rand_vec(&mut rng, c_out * c_in * k, -2.0, 2.0);
            let b = rand_vec(&mut rng, c_out, -1.0, 1.0);
            let mut g = Graph::new();
            let xt = g.leaf(&[n, c_in, l], x.clone(), false).unwrap();
            let wt = g.leaf(&[c_out, c_in, k], w.clone(), false).unwrap();
            let bt = g.leaf(&[c_out], b.clone(), false).unwrap();
            let y = g.conv1d(xt, wt, bt, s).unwrap();
            let expect = oracle(&x, (n, c_in, l), &w, (c_out, k), &b, s);
            assert_eq!(g.shape(y), &[n, c_out, l.div_ceil(s)]);
            for (a, e) in g.data(y).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10, "{a} vs {e} at {:?}", (n, c_in, c_out, l, k, s));
            }
        }
    }

    #[test]
    fn conv1d_delta_input_reads_out_kernel() {
        // Unit impulse at the center under cross-correlation returns the
        // kernel reversed.
        let mut g = Graph::new();
        let x = g.leaf(&[1, 1, 5], vec![0., 0., 1., 0., 0.], false).unwrap();
        let w = g.leaf(&[1, 1, 3], vec![1., 2., 3.], false).unwrap();
        let b = g.leaf(&[1], vec![0.], false).unwrap();
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.data(y), &[0., 3., 2., 1., 0.]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 1, 8], vec![0.; 8], false).unwrap();
        let w = g.leaf(&[1, 1, 4], vec![0.; 4], false).unwrap();
        let b = g.leaf(&[1], vec![0.], false).unwrap();
        assert!(g.conv1d(x, w, b, 1).is_err());
    }

    #[test]
    fn max_pool_ties_take_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 1, 4], vec![1.0, 1.0, 0.5, 1.0], true).unwrap();
        let y = g.max_pool(x, 2, 2).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.0]);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        // First window ties at indices 0 and 1; gradient must land on 0.
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_eval_identity_with_unit_stats() {
        let mut g = Graph::new();
        let x = g
            .leaf(&[2, 2, 3], (0..12).map(|v| v as f64 / 3.0).collect(), false)
            .unwrap();
        let gamma = g.leaf(&[2], vec![1.0, 1.0], false).unwrap();
        let beta = g.leaf(&[2], vec![0.0, 0.0], false).unwrap();
        let mut stats = BnStats::new(2);
        let y = g.batchnorm1d(x, gamma, beta, &mut stats, Mode::Eval).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(x)) {
            // Identity up to the 1e-5 epsilon inside the denominator.
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let mut g = Graph::new();
        let mut rng = StdRng::seed_from_u64(3);
        let x = g.leaf(&[4, 2, 8], rand_vec(&mut rng, 64, -3.0, 5.0), false).unwrap();
        let gamma = g.leaf(&[2], vec![1.0, 1.0], false).unwrap();
        let beta = g.leaf(&[2], vec![0.0, 0.0], false).unwrap();
        let mut stats = BnStats::new(2);
        let y = g.batchnorm1d(x, gamma, beta, &mut stats, Mode::Train).unwrap();
        // Per-channel mean ~0 and variance ~1 over (N, L).
        for ch in 0..2 {
            let mut vals = Vec::new();
            for n in 0..4 {
                let base = (n * 2 + ch) * 8;
                vals.extend_from_slice(&g.data(y)[base..base + 8]);
            }
            let m: f64 = vals.iter().sum::<f64>() / 32.0;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-12, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
            // Momentum 0.1 fold of the batch statistics into fresh (0, 1).
            assert!(stats.mean[ch].abs() > 0.0 || stats.var[ch] != 1.0);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(&[3, 4, 5], rand_vec(&mut rng, 60, -30.0, 30.0), false).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for n in 0..3 {
            for l in 0..5 {
                let s: f64 = (0..4).map(|c| g.data(y)[(n * 4 + c) * 5 + l]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_handles_large_logits() {
        let mut g = Graph::new();
        let x = g.leaf(&[1, 3], vec![1000.0, 0.0, -1000.0], false).unwrap();
        let y = g.log_softmax(x, 1).unwrap();
        assert!(g.data(y).iter().all(|v| v.is_finite()));
        assert!((g.data(y)[0] - 0.0).abs() < 1e-9);
    }

    // ── gradient checks per op ───────────────────────────────────────────────

    #[test]
    fn grad_elementwise_and_reductions() {
        let mut rng = StdRng::seed_from_u64(21);
        for i in 0..5 {
            let a = rand_vec(&mut rng, 12, -2.0, 2.0);
            let b = rand_vec(&mut rng, 12, -2.0, 2.0);
            check_grads(
                &[(vec![3, 4], a.clone()), (vec![3, 4], b.clone())],
                &move |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let p = g.mul(s, ids[1]).unwrap();
                    g.mean(p)
                },
            );
            // Broadcast add and mul.
            let c = rand_vec(&mut rng, 4, -2.0, 2.0);
            check_grads(
                &[(vec![3, 4], a.clone()), (vec![4], c.clone())],
                &move |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let p = g.mul(s, ids[1]).unwrap();
                    let sc = g.scale(p, 1.5 + i as f64 * 0.1);
                    let sh = g.add_scalar(sc, 0.3);
                    g.sum(sh)
                },
            );
        }
    }

    #[test]
    fn grad_unary_chain() {
        let mut rng = StdRng::seed_from_u64(22);
        for seed in 0..5u64 {
            let x = rand_vec(&mut rng, 10, -1.6, 1.6);
            check_grads(&[(vec![10], x)], &move |g, ids| {
                let s = g.sigmoid(ids[0]);
                let sp = g.softplus(ids[0]);
                let prod = g.mul(s, sp).unwrap();
                let e = g.exp(prod);
                let shifted = g.add_scalar(e, 0.5);
                let l = g.ln(shifted);
                project(g, l, 100 + seed)
            });
        }
    }

    #[test]
    fn grad_powf_and_clamps() {
        let mut rng = StdRng::seed_from_u64(23);
        for seed in 0..5u64 {
            let x = rand_vec(&mut rng, 10, 0.2, 1.8);
            check_grads(&[(vec![10], x)], &move |g, ids| {
                let p = g.powf(ids[0], 2.7);
                let lo = g.clamp_min(p, 0.5);
                let hi = g.clamp_max(lo, 3.5);
                project(g, hi, 200 + seed)
            });
        }
    }

    #[test]
    fn grad_structural() {
        let mut rng = StdRng::seed_from_u64(24);
        for seed in 0..5u64 {
            let a = rand_vec(&mut rng, 12, -2.0, 2.0);
            let b = rand_vec(&mut rng, 8, -2.0, 2.0);
            check_grads(
                &[(vec![2, 3, 2], a), (vec![2, 2, 2], b)],
                &move |g, ids| {
                    let cat = g.concat(&[ids[0], ids[1]], 1).unwrap();
                    let piece = g.narrow(cat, 1, 1, 3).unwrap();
                    let flat = g.reshape(piece, &[12]).unwrap();
                    project(g, flat, 300 + seed)
                },
            );
        }
    }

    #[test]
    fn grad_softmax_family() {
        let mut rng = StdRng::seed_from_u64(25);
        for seed in 0..5u64 {
            let x = rand_vec(&mut rng, 24, -3.0, 3.0);
            check_grads(&[(vec![2, 4, 3], x.clone())], &move |g, ids| {
                let y = g.softmax(ids[0], 1).unwrap();
                project(g, y, 400 + seed)
            });
            check_grads(&[(vec![2, 4, 3], x)], &move |g, ids| {
                let y = g.log_softmax(ids[0], 1).unwrap();
                project(g, y, 500 + seed)
            });
        }
    }

    #[test]
    fn grad_linear_conv_pool() {
        let mut rng = StdRng::seed_from_u64(26);
        for seed in 0..3u64 {
            let x = rand_vec(&mut rng, 2 * 6, -2.0, 2.0);
            let w = rand_vec(&mut rng, 4 * 6, -1.0, 1.0);
            let b = rand_vec(&mut rng, 4, -1.0, 1.0);
            check_grads(
                &[(vec![2, 6], x), (vec![4, 6], w), (vec![4], b)],
                &move |g, ids| {
                    let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
                    project(g, y, 600 + seed)
                },
            );

            let x = rand_vec(&mut rng, 2 * 3 * 10, -2.0, 2.0);
            let w = rand_vec(&mut rng, 4 * 3 * 5, -1.0, 1.0);
            let b = rand_vec(&mut rng, 4, -1.0, 1.0);
            check_grads(
                &[(vec![2, 3, 10], x), (vec![4, 3, 5], w), (vec![4], b)],
                &move |g, ids| {
                    let y = g.conv1d(ids[0], ids[1], ids[2], 2).unwrap();
                    project(g, y, 700 + seed)
                },
            );

            let x = rand_vec(&mut rng, 2 * 2 * 3, -2.0, 2.0);
            let w = rand_vec(&mut rng, 2 * 2 * 7, -1.0, 1.0);
            let b = rand_vec(&mut rng, 2, -1.0, 1.0);
            check_grads(
                &[(vec![2, 2, 3], x), (vec![2, 2, 7], w), (vec![2], b)],
                &move |g, ids| {
                    let y = g.conv1d(ids[0], ids[1], ids[2], 1).unwrap();
                    project(g, y, 750 + seed)
                },
            );

            let x = rand_vec(&mut rng, 2 * 3 * 8, -2.0, 2.0);
            check_grads(&[(vec![2, 3, 8], x.clone())], &move |g, ids| {
                let y = g.avg_pool(ids[0], 2, 2).unwrap();
                let z = g.global_avg_pool(y).unwrap();
                project(g, z, 800 + seed)
            });
            check_grads(&[(vec![2, 3, 8], x)], &move |g, ids| {
                let y = g.max_pool(ids[0], 2, 2).unwrap();
                project(g, y, 900 + seed)
            });
        }
    }

    #[test]
    fn grad_batchnorm_and_channel_scale() {
        let mut rng = StdRng::seed_from_u64(27);
        for seed in 0..3u64 {
            let x = rand_vec(&mut rng, 3 * 2 * 6, -2.0, 2.0);
            let gamma = rand_vec(&mut rng, 2, 0.5, 1.5);
            let beta = rand_vec(&mut rng, 2, -0.5, 0.5);
            check_grads(
                &[(vec![3, 2, 6], x), (vec![2], gamma), (vec![2], beta)],
                &move |g, ids| {
                    let mut stats = BnStats::new(2);
                    let y = g
                        .batchnorm1d(ids[0], ids[1], ids[2], &mut stats, Mode::Train)
                        .unwrap();
                    project(g, y, 1000 + seed)
                },
            );
            let x = rand_vec(&mut rng, 2 * 3 * 4, -2.0, 2.0);
            let s = rand_vec(&mut rng, 6, -1.5, 1.5);
            check_grads(
                &[(vec![2, 3, 4], x), (vec![2, 3], s)],
                &move |g, ids| {
                    let y = g.channel_scale(ids[0], ids[1]).unwrap();
                    project(g, y, 1100 + seed)
                },
            );
        }
    }
}
