//! Operation tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass together
//! with the intermediates its backward rule needs. [`Graph::backward`] replays
//! the tape in reverse from a scalar output. Tensors on the tape are never
//! mutated after they are recorded.

use std::borrow::Cow;

use crate::error::{NnError, Result};
use crate::kernels::{self, adaptive_bin, gemm, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulPlanes(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
        probs: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Pool {
        x: Var,
        mode: PoolMode,
        grid: (usize, usize),
        argmax: Vec<usize>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    #[cfg(test)]
    BrokenRelu(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation. Borrowed leaves let frozen weights flow
/// through without copying.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf borrowing `t`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owning `t`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]` (weights stored output-major).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if b_t {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), b_t, &mut out, 0.0);
        let op = Op::MatMul { a, b, b_t, m, k, n };
        Ok(self.push(Tensor::from_vec(&[m, n], out), op, &[a, b]))
    }

    /// Fully connected layer `x·w + b` with `w: [in, out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds the vector `b: [n]` to every row of `x: [m, n]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        if tx.rank() != 2 || tx.shape()[1] != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(y, b)| *y += b);
        }
        let t = Tensor::from_vec(tx.shape(), data);
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(ta.shape(), data);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies every channel of `x: [c, h, w]` by the single plane `a: [1, h, w]`.
    pub fn mul_planes(&mut self, x: Var, a: Var) -> Result<Var> {
        let (tx, ta) = (self.value(x), self.value(a));
        if tx.rank() != 3 || ta.rank() != 3 || ta.shape()[0] != 1 || tx.shape()[1..] != ta.shape()[1..]
        {
            return Err(shape_err("mul_planes", tx, ta));
        }
        let plane = ta.len();
        let mut data = tx.data().to_vec();
        for ch in data.chunks_mut(plane) {
            ch.iter_mut().zip(ta.data()).for_each(|(y, s)| *y *= s);
        }
        let t = Tensor::from_vec(tx.shape(), data);
        Ok(self.push(t, Op::MulPlanes(x, a), &[x, a]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(NnError::Numeric(format!("NaN input to {op:?}")));
        }
        let t = tx.map(f);
        Ok(self.push(t, op, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * kernels::sigmoid(v), Op::Silu(x))
    }

    #[cfg(test)]
    pub(crate) fn broken_relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::BrokenRelu(x))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if !tx.all_finite() {
            return Err(NnError::Numeric("softmax input is not finite".into()));
        }
        let n = *tx.shape().last().unwrap_or(&1);
        let mut data = tx.data().to_vec();
        data.chunks_mut(n).for_each(softmax_in_place);
        let t = Tensor::from_vec(tx.shape(), data);
        Ok(self.push(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Row-wise RMS normalisation of `x: [m, n]` with learned `gain: [n]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let n = tg.len();
        if tx.rank() != 2 || tx.shape()[1] != n {
            return Err(shape_err("rms_norm", tx, tg));
        }
        let mut data = tx.data().to_vec();
        let mut inv_rms = Vec::with_capacity(tx.shape()[0]);
        for row in data.chunks_mut(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().zip(tg.data()).for_each(|(v, g)| *v *= r * g);
            inv_rms.push(r);
        }
        let t = Tensor::from_vec(tx.shape(), data);
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Gathers rows of `table: [v, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::Shape {
                op: "embedding",
                lhs: tt.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::from_vec(&[ids.len(), d], data);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(t, op, &[table]))
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    ///
    /// `q: [t, n_heads·hd]`, `k, v: [t, n_kv_heads·hd]`; query head `h` reads
    /// key/value head `h / (n_heads / n_kv_heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.rank() != 2 || tk.shape() != tv.shape() || tq.shape()[0] != tk.shape()[0] {
            return Err(shape_err("causal_attention", tq, tk));
        }
        if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) || tq.shape()[1] % n_heads != 0 {
            return Err(NnError::Config(format!(
                "{n_heads} query heads cannot share {n_kv_heads} key/value heads"
            )));
        }
        let t = tq.shape()[0];
        let qw = tq.shape()[1];
        let hd = qw / n_heads;
        let kw = tk.shape()[1];
        if kw != n_kv_heads * hd {
            return Err(shape_err("causal_attention", tq, tk));
        }
        let rep = n_heads / n_kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * qw];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..n_heads {
            let kvh = h / rep;
            for i in 0..t {
                let qi = &qd[i * qw + h * hd..i * qw + (h + 1) * hd];
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                for j in 0..=i {
                    let kj = &kd[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let oi = &mut out[i * qw + h * hd..i * qw + (h + 1) * hd];
                for j in 0..=i {
                    let vj = &vd[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    oi.iter_mut().zip(vj).for_each(|(o, v)| *o += p[j] * v);
                }
            }
        }
        let op = Op::CausalAttention {
            q,
            k,
            v,
            n_heads,
            n_kv_heads,
            probs,
        };
        Ok(self.push(Tensor::from_vec(&[t, qw], out), op, &[q, k, v]))
    }

    /// Dilated 2-D cross-correlation of `x: [c_in, h, w]` with `w: [c_out, c_in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if dilation < 1 {
            return Err(NnError::Config("convolution dilation must be at least 1".into()));
        }
        if tx.rank() != 3 || tw.rank() != 4 || tw.shape()[1] != tx.shape()[0] {
            return Err(shape_err("conv2d", tx, tw));
        }
        let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
        if tw.shape()[3] != k || k % 2 == 0 {
            return Err(NnError::Config(format!(
                "convolution kernels must be square with odd size, got {:?}",
                tw.shape()
            )));
        }
        let (c_in, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let span = dilation * (k - 1);
        if h + 2 * padding < span + 1 || wd + 2 * padding < span + 1 {
            return Err(NnError::Config(format!(
                "input {h}x{wd} too small for kernel span {}",
                span + 1
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            dilation,
            padding,
            h_out: h + 2 * padding - span,
            w_out: wd + 2 * padding - span,
        };
        let cols = kernels::im2col(tx.data(), &geom);
        let out_len = geom.out_len();
        let mut out = vec![0.0; c_out * out_len];
        gemm(c_out, geom.patch_len(), out_len, tw.data(), false, &cols, false, &mut out, 0.0);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != c_out {
                return Err(shape_err("conv2d bias", self.value(w), tb));
            }
            for (ch, bias) in out.chunks_mut(out_len).zip(tb.data()) {
                ch.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::from_vec(&[c_out, geom.h_out, geom.w_out], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        };
        Ok(self.push(t, op, &inputs))
    }

    /// Adaptive pooling of `x: [c, h, w]` onto a `grid` of near-equal bins.
    pub fn pool(&mut self, x: Var, mode: PoolMode, grid: (usize, usize)) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(NnError::Config(format!("pool expects [c, h, w], got {:?}", tx.shape())));
        }
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (gh, gw) = grid;
        if gh == 0 || gw == 0 || gh > h || gw > w {
            return Err(NnError::Config(format!(
                "pool grid {gh}x{gw} does not fit input {h}x{w}"
            )));
        }
        let xd = tx.data();
        let mut out = vec![0.0; c * gh * gw];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; c * gh * gw];
        }
        for ch in 0..c {
            for by in 0..gh {
                let (y0, y1) = adaptive_bin(by, gh, h);
                for bx in 0..gw {
                    let (x0, x1) = adaptive_bin(bx, gw, w);
                    let o = (ch * gh + by) * gw + bx;
                    match mode {
                        PoolMode::Avg => {
                            let mut s = 0.0;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    s += xd[(ch * h + y) * w + xx];
                                }
                            }
                            out[o] = s / ((y1 - y0) * (x1 - x0)) as f64;
                        }
                        PoolMode::Max => {
                            let mut best = (f64::NEG_INFINITY, 0);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let idx = (ch * h + y) * w + xx;
                                    if xd[idx] > best.0 {
                                        best = (xd[idx], idx);
                                    }
                                }
                            }
                            out[o] = best.0;
                            argmax[o] = best.1;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[c, gh, gw], out);
        let op = Op::Pool {
            x,
            mode,
            grid,
            argmax,
        };
        Ok(self.push(t, op, &[x]))
    }

    /// Mean over the channel axis: `[c, h, w] -> [1, h, w]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(NnError::Config(format!("channel_mean expects [c, h, w], got {:?}", tx.shape())));
        }
        let c = tx.shape()[0];
        let plane = tx.len() / c;
        let mut out = vec![0.0; plane];
        for ch in tx.data().chunks(plane) {
            out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= c as f64);
        let t = Tensor::from_vec(&[1, tx.shape()[1], tx.shape()[2]], out);
        Ok(self.push(t, Op::ChannelMean(x), &[x]))
    }

    /// Max over the channel axis: `[c, h, w] -> [1, h, w]`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(NnError::Config(format!("channel_max expects [c, h, w], got {:?}", tx.shape())));
        }
        let c = tx.shape()[0];
        let plane = tx.len() / c;
        let mut out = vec![f64::NEG_INFINITY; plane];
        let mut argmax = vec![0; plane];
        for (ci, ch) in tx.data().chunks(plane).enumerate() {
            for (p, &v) in ch.iter().enumerate() {
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ci * plane + p;
                }
            }
        }
        let t = Tensor::from_vec(&[1, tx.shape()[1], tx.shape()[2]], out);
        Ok(self.push(t, Op::ChannelMax { x, argmax }, &[x]))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(shape_err("concat", first, t));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::from_vec(&shape, data);
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Concatenation of rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::from_vec(&[rows, total], data);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start >= end || end > tx.shape()[1] {
            return Err(NnError::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let rows = tx.shape()[0];
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let t = Tensor::from_vec(&[rows, end - start], data);
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), &[x])
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(shape_err("mse", tp, target));
        }
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / tp.len() as f64;
        let op = Op::Mse {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Mean next-token cross-entropy of `logits: [t, v]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(NnError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(NnError::Shape {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len() as f64;
        if !loss.is_finite() {
            return Err(NnError::Numeric("cross-entropy is not finite".into()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse-mode sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(NnError::State(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_t, m, k, n } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_buf(grads, a);
                    // dA = dY · op(B)ᵀ
                    gemm(m, n, k, dy, false, bd, !b_t, ga, 1.0);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_buf(grads, b);
                    if b_t {
                        // dBs = dYᵀ · A
                        gemm(n, m, k, dy, true, ad, false, gb, 1.0);
                    } else {
                        gemm(k, m, n, ad, true, dy, false, gb, 1.0);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |g| add_into(g, dy));
                self.accumulate(grads, b, |g| add_into(g, dy));
            }
            &Op::AddRow(x, b) => {
                self.accumulate(grads, x, |g| add_into(g, dy));
                let n = self.value(b).len();
                self.accumulate(grads, b, |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |g| {
                    g.iter_mut().zip(dy).zip(bd).for_each(|((g, d), b)| *g += d * b)
                });
                self.accumulate(grads, b, |g| {
                    g.iter_mut().zip(dy).zip(ad).for_each(|((g, d), a)| *g += d * a)
                });
            }
            &Op::MulPlanes(x, a) => {
                let (xd, ad) = (self.value(x).data(), self.value(a).data());
                let plane = ad.len();
                self.accumulate(grads, x, |g| {
                    for (gc, dc) in g.chunks_mut(plane).zip(dy.chunks(plane)) {
                        gc.iter_mut().zip(dc).zip(ad).for_each(|((g, d), s)| *g += d * s);
                    }
                });
                self.accumulate(grads, a, |g| {
                    for (dc, xc) in dy.chunks(plane).zip(xd.chunks(plane)) {
                        g.iter_mut().zip(dc).zip(xc).for_each(|((g, d), x)| *g += d * x);
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                self.accumulate(grads, x, |g| {
                    g.iter_mut()
                        .zip(dy)
                        .zip(xd)
                        .for_each(|((g, d), &x)| *g += if x > 0.0 { *d } else { 0.0 })
                });
            }
            #[cfg(test)]
            &Op::BrokenRelu(x) => {
                self.accumulate(grads, x, |g| add_into(g, dy));
            }
            &Op::Sigmoid(x) => {
                self.accumulate(grads, x, |g| {
                    g.iter_mut()
                        .zip(dy)
                        .zip(y)
                        .for_each(|((g, d), s)| *g += d * s * (1.0 - s))
                });
            }
            &Op::Tanh(x) => {
                self.accumulate(grads, x, |g| {
                    g.iter_mut()
                        .zip(dy)
                        .zip(y)
                        .for_each(|((g, d), t)| *g += d * (1.0 - t * t))
                });
            }
            &Op::Silu(x) => {
                let xd = self.value(x).data();
                self.accumulate(grads, x, |g| {
                    g.iter_mut().zip(dy).zip(xd).for_each(|((g, d), &x)| {
                        let s = kernels::sigmoid(x);
                        *g += d * s * (1.0 + x * (1.0 - s));
                    })
                });
            }
            &Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, x, |g| {
                    for ((gr, dr), sr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(sr).map(|(d, s)| d * s).sum();
                        gr.iter_mut()
                            .zip(dr)
                            .zip(sr)
                            .for_each(|((g, d), s)| *g += s * (d - dot));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let (xd, gd) = (self.value(x).data(), self.value(gain).data());
                let n = gd.len();
                self.accumulate(grads, x, |g| {
                    for (r, ((gr, dr), xr)) in
                        g.chunks_mut(n).zip(dy.chunks(n)).zip(xd.chunks(n)).enumerate()
                    {
                        let ir = inv_rms[r];
                        // d xhat = dy·gain; dx = ir·(dxhat − xhat·mean(dxhat·xhat))
                        let dot: f64 = dr
                            .iter()
                            .zip(gd)
                            .zip(xr)
                            .map(|((d, g), x)| d * g * x * ir)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            let xhat = xr[j] * ir;
                            gr[j] += ir * (dr[j] * gd[j] - xhat * dot);
                        }
                    }
                });
                self.accumulate(grads, gain, |g| {
                    for (r, (dr, xr)) in dy.chunks(n).zip(xd.chunks(n)).enumerate() {
                        let ir = inv_rms[r];
                        g.iter_mut()
                            .zip(dr)
                            .zip(xr)
                            .for_each(|((g, d), x)| *g += d * x * ir);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.accumulate(grads, *table, |g| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                n_kv_heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *n_heads, *n_kv_heads, probs, dy, grads),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = self.value(*w).shape()[0];
                let out_len = geom.out_len();
                let plen = geom.patch_len();
                if self.nodes[w.0].needs_grad {
                    let gw = self.grad_buf(grads, *w);
                    gemm(c_out, out_len, plen, dy, false, cols, true, gw, 1.0);
                }
                if let Some(b) = *b {
                    self.accumulate(grads, b, |g| {
                        for (gb, dc) in g.iter_mut().zip(dy.chunks(out_len)) {
                            *gb += dc.iter().sum::<f64>();
                        }
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let wd = self.value(*w).data();
                    let mut dcols = vec![0.0; plen * out_len];
                    gemm(plen, c_out, out_len, wd, true, dy, false, &mut dcols, 0.0);
                    let gx = self.grad_buf(grads, *x);
                    kernels::col2im_add(&dcols, geom, gx);
                }
            }
            Op::Pool {
                x,
                mode,
                grid,
                argmax,
            } => {
                let shape = self.value(*x).shape().to_vec();
                let (h, w) = (shape[1], shape[2]);
                let (gh, gw) = *grid;
                self.accumulate(grads, *x, |g| match mode {
                    PoolMode::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            g[src] += dy[o];
                        }
                    }
                    PoolMode::Avg => {
                        for ch in 0..shape[0] {
                            for by in 0..gh {
                                let (y0, y1) = adaptive_bin(by, gh, h);
                                for bx in 0..gw {
                                    let (x0, x1) = adaptive_bin(bx, gw, w);
                                    let d = dy[(ch * gh + by) * gw + bx]
                                        / ((y1 - y0) * (x1 - x0)) as f64;
                                    for yy in y0..y1 {
                                        for xx in x0..x1 {
                                            g[(ch * h + yy) * w + xx] += d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::ChannelMean(x) => {
                let c = self.value(x).shape()[0] as f64;
                let plane = dy.len();
                self.accumulate(grads, x, |g| {
                    for gc in g.chunks_mut(plane) {
                        gc.iter_mut().zip(dy).for_each(|(g, d)| *g += d / c);
                    }
                });
            }
            Op::ChannelMax { x, argmax } => {
                self.accumulate(grads, *x, |g| {
                    for (p, &src) in argmax.iter().enumerate() {
                        g[src] += dy[p];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |g| add_into(g, &dy[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |g| {
                        for (gr, dr) in g.chunks_mut(w).zip(dy.chunks(total)) {
                            add_into(gr, &dr[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let total = self.value(x).shape()[1];
                let w = node.value.shape()[1];
                self.accumulate(grads, x, |g| {
                    for (gr, dr) in g.chunks_mut(total).zip(dy.chunks(w)) {
                        add_into(&mut gr[start..start + w], dr);
                    }
                });
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |g| add_into(g, dy)),
            &Op::Sum(x) => self.accumulate(grads, x, |g| g.iter_mut().for_each(|g| *g += dy[0])),
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                self.accumulate(grads, x, |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::Mse { pred, target } => {
                let pd = self.value(*pred).data();
                let n = pd.len() as f64;
                self.accumulate(grads, *pred, |g| {
                    g.iter_mut()
                        .zip(pd)
                        .zip(target)
                        .for_each(|((g, p), t)| *g += dy[0] * 2.0 * (p - t) / n)
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).shape()[1];
                let scale = dy[0] / targets.len() as f64;
                self.accumulate(grads, *logits, |g| {
                    for (r, (gr, pr)) in g.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                        gr.iter_mut().zip(pr).for_each(|(g, p)| *g += scale * p);
                        gr[targets[r]] -= scale;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        n_kv_heads: usize,
        probs: &[f64],
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk) = (self.value(q), self.value(k));
        let t = tq.shape()[0];
        let qw = tq.shape()[1];
        let kw = tk.shape()[1];
        let hd = qw / n_heads;
        let rep = n_heads / n_kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), self.value(v).data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut ds = vec![0.0; t];
        for h in 0..n_heads {
            let kvh = h / rep;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let doi = &dy[i * qw + h * hd..i * qw + (h + 1) * hd];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &vd[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot += p[j] * dp;
                    let dvj = &mut dv[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    dvj.iter_mut().zip(doi).for_each(|(g, d)| *g += p[j] * d);
                }
                let qi = &qd[i * qw + h * hd..i * qw + (h + 1) * hd];
                for j in 0..=i {
                    let s = p[j] * (ds[j] - dot) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    let dqi = &mut dq[i * qw + h * hd..i * qw + (h + 1) * hd];
                    dqi.iter_mut().zip(kj).for_each(|(g, k)| *g += s * k);
                    let dkj = &mut dk[j * kw + kvh * hd..j * kw + (kvh + 1) * hd];
                    dkj.iter_mut().zip(qi).for_each(|(g, q)| *g += s * q);
                }
            }
        }
        self.accumulate(grads, q, |g| add_into(g, &dq));
        self.accumulate(grads, k, |g| add_into(g, &dk));
        self.accumulate(grads, v, |g| add_into(g, &dv));
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].needs_grad {
            f(self.grad_buf(grads, v));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
