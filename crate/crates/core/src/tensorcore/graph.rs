//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends one node
//! holding its output value; because nodes can only reference earlier nodes,
//! construction order is a topological order and backward simply walks the
//! tape in reverse.

use super::kernels::{self, rm, tr};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    MaskedSoftmax {
        scores: Var,
        keep: Var,
        /// Per-row max over unmasked entries.
        row_max: Vec<f64>,
        /// Per-row normaliser `Σ_k exp(P_ik − m_i)·G_ik`.
        row_sum: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Log {
        x: Var,
        floor: f64,
    },
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Var, Var, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<Vec<usize>>,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
        let data = kernels::binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &out_shape, f);
        let t = Tensor::new(out_shape, data)?;
        self.push(name, t, mk(a, b), &[a, b])
    }

    /// Elementwise `a + b` with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push("add_scalar", t, Op::AddScalar(x), &[x])
    }

    /// Batched matrix product `[.., M, K] × [.., K, P]`.
    ///
    /// Either operand may be a plain 2-D matrix shared across the other's
    /// batch; otherwise the leading dimensions must agree.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let out = if sb.len() == 2 {
            let rows = ta.numel() / k.max(1);
            let mut out = vec![0.0; rows * p];
            kernels::gemm(rows, k, p, rm(ta.data(), k), rm(tb.data(), p), &mut out, false);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(p);
            Tensor::new(shape, out)?
        } else if sa.len() == 2 {
            let batch = tb.numel() / (k * p).max(1);
            let mut out = vec![0.0; batch * m * p];
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    p,
                    rm(ta.data(), k),
                    rm(&tb.data()[i * k * p..], p),
                    &mut out[i * m * p..],
                    false,
                );
            }
            let mut shape = sb[..sb.len() - 2].to_vec();
            shape.extend([m, p]);
            Tensor::new(shape, out)?
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out = vec![0.0; batch * m * p];
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    p,
                    rm(&ta.data()[i * m * k..], k),
                    rm(&tb.data()[i * k * p..], p),
                    &mut out[i * m * p..],
                    false,
                );
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend([m, p]);
            Tensor::new(shape, out)?
        };
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 {
            return Err(Error::Contract(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let out = transpose_last2(t);
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.ndim()];
        if axes.len() != t.ndim() || axes.iter().any(|&a| a >= t.ndim() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Contract(format!(
                "invalid permutation {axes:?} for shape {:?}",
                t.shape()
            )));
        }
        let out = permute_tensor(t, axes);
        self.push("permute", out, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Softmax over the last axis, with row-max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, cols) = rows_cols(t.shape());
        if cols == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let out = Tensor::new(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Attention softmax restricted by a keep mask.
    ///
    /// `scores` is `[B, H, n, n]`, `keep` is `[B, n]`, usually in `{0,1}`
    /// (it may carry a straight-through gradient); soft values weight the
    /// columns. Entry `(i, j)` participates iff `i == j` or `keep[j] != 0`;
    /// the row max is taken over participating
    /// entries only and excluded entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, scores: Var, keep: Var) -> Result<Var> {
        let (ts, tk) = (self.value(scores), self.value(keep));
        let s = ts.shape();
        if s.len() != 4 || s[2] != s[3] || tk.shape() != [s[0], s[2]] {
            return Err(Error::shape("masked_softmax", s, tk.shape()));
        }
        let (b, h, n) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; ts.numel()];
        let mut row_max = vec![0.0; b * h * n];
        let mut row_sum = vec![0.0; b * h * n];
        for bi in 0..b {
            let keep_row = &tk.data()[bi * n..(bi + 1) * n];
            for hi in 0..h {
                for i in 0..n {
                    let r = (bi * h + hi) * n + i;
                    let p = &ts.data()[r * n..(r + 1) * n];
                    let o = &mut out[r * n..(r + 1) * n];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n {
                        if i == j || keep_row[j] != 0.0 {
                            max = max.max(p[j]);
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..n {
                        let g = if i == j { 1.0 } else { keep_row[j] };
                        if g != 0.0 {
                            o[j] = (p[j] - max).exp() * g;
                            sum += o[j];
                        }
                    }
                    let inv = 1.0 / sum;
                    for v in o.iter_mut() {
                        *v *= inv;
                    }
                    row_max[r] = max;
                    row_sum[r] = sum;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        self.push(
            "masked_softmax",
            out,
            Op::MaskedSoftmax {
                scores,
                keep,
                row_max,
                row_sum,
            },
            &[scores, keep],
        )
    }

    /// Layer normalisation over the last axis followed by `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, c) = rows_cols(tx.shape());
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(floor).ln()).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log", out, Op::Log { x, floor }, &[x])
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::Index {
                op: "sum_axis",
                index: axis,
                len: s.len(),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push("sum_axis", out, Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or(Error::Index {
            op: "mean_axis",
            index: axis,
            len: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::shape("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&tb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let out = Tensor::new(shape, out)?;
        self.push("concat", out, Op::Concat(a, b, axis), &[a, b])
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let axis = self.shape(a).len().saturating_sub(1);
        self.concat(a, b, axis)
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Index {
                op: "slice",
                index: start + len,
                len: s.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Gather along axis 1 of a `[B, N, C]` tensor with per-sample indices.
    pub fn gather_rows(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || index.len() != s[0] {
            return Err(Error::Contract(format!(
                "gather_rows expects [B, N, C] and B index lists, got {s:?} and {} lists",
                index.len()
            )));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let m = index.first().map_or(0, |r| r.len());
        let mut out = Vec::with_capacity(b * m * c);
        for (bi, rows) in index.iter().enumerate() {
            if rows.len() != m {
                return Err(Error::Contract("gather_rows: ragged index lists".into()));
            }
            for &r in rows {
                if r >= n {
                    return Err(Error::Index {
                        op: "gather_rows",
                        index: r,
                        len: n,
                    });
                }
                let base = (bi * n + r) * c;
                out.extend_from_slice(&t.data()[base..base + c]);
            }
        }
        let out = Tensor::new(vec![b, m, c], out)?;
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Forward value `hard`, backward identity onto `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", self.shape(soft), hard.shape()));
        }
        self.push("straight_through", hard, Op::StraightThrough(soft), &[soft])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v).to_vec();
        self.accumulate(grads, v, Tensor::new(shape, data).expect("gradient shape"));
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = kernels::sum_to_shape(gd, out_shape, self.shape(*a));
                self.accumulate_vec(grads, *a, ga);
                if self.requires_grad(*b) {
                    let mut gb = kernels::sum_to_shape(gd, out_shape, self.shape(*b));
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate_vec(grads, *b, gb);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let is_div = matches!(node.op, Op::Div(..));
                if self.requires_grad(*a) {
                    let f = if is_div { |g: f64, y: f64| g / y } else { |g: f64, y: f64| g * y };
                    let full = kernels::binary(gd, out_shape, tb.data(), tb.shape(), out_shape, f);
                    self.accumulate_vec(grads, *a, kernels::sum_to_shape(&full, out_shape, ta.shape()));
                }
                if self.requires_grad(*b) {
                    let full = if is_div {
                        // d(a/b)/db = -out/b
                        let q = kernels::binary(node.value.data(), out_shape, tb.data(), tb.shape(), out_shape, |o, y| -o / y);
                        q.iter().zip(gd).map(|(q, g)| q * g).collect::<Vec<_>>()
                    } else {
                        kernels::binary(gd, out_shape, ta.data(), ta.shape(), out_shape, |g, x| g * x)
                    };
                    self.accumulate_vec(grads, *b, kernels::sum_to_shape(&full, out_shape, tb.shape()));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate_vec(grads, *x, gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => {
                self.accumulate_vec(grads, *x, gd.to_vec());
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Transpose(x) => {
                self.accumulate(grads, *x, transpose_last2(g));
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(out_shape);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::MaskedSoftmax {
                scores,
                keep,
                row_max,
                row_sum,
            } => {
                let s = out_shape;
                let (b, h, n) = (s[0], s[1], s[2]);
                let y = node.value.data();
                let p = self.value(*scores).data();
                let kv = self.value(*keep).data();
                let want_keep = self.requires_grad(*keep);
                let mut dp = vec![0.0; y.len()];
                let mut dk = vec![0.0; b * n];
                for bi in 0..b {
                    for hi in 0..h {
                        for i in 0..n {
                            let r = (bi * h + hi) * n + i;
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &gd[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                dp[r * n + j] = yr[j] * (gr[j] - dot);
                            }
                            if want_keep {
                                for j in 0..n {
                                    if j == i {
                                        continue;
                                    }
                                    // ∂Ã_il/∂G_ij = (e_ij/S_i)(δ_lj − Ã_il)
                                    let w = if kv[bi * n + j] != 0.0 {
                                        yr[j] / kv[bi * n + j]
                                    } else {
                                        (p[r * n + j] - row_max[r]).min(80.0).exp() / row_sum[r]
                                    };
                                    dk[bi * n + j] += w * (gr[j] - dot);
                                }
                            }
                        }
                    }
                }
                self.accumulate_vec(grads, *scores, dp);
                if want_keep {
                    self.accumulate_vec(grads, *keep, dk);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *out_shape.last().unwrap_or(&1);
                let gamma_v = self.value(*gamma).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gamma_v[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gamma_v[j];
                        dx[r * c + j] = rs * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                self.accumulate_vec(grads, *x, dx);
                self.accumulate_vec(grads, *gamma, dgamma);
                self.accumulate_vec(grads, *beta, dbeta);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = xv.iter().zip(gd).map(|(&v, g)| g * kernels::gelu_grad(v)).collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                let dx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                self.accumulate_vec(grads, *x, dx);
            }
            Op::SumAxis(x, axis) => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = s[*axis];
                let mut dx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        dx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate_vec(grads, *x, vec![gd[0]; n]);
            }
            Op::Concat(a, b, axis) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
                let mut ga = Vec::with_capacity(outer * ca);
                let mut gb = Vec::with_capacity(outer * cb);
                for o in 0..outer {
                    let base = o * (ca + cb);
                    ga.extend_from_slice(&gd[base..base + ca]);
                    gb.extend_from_slice(&gd[base + ca..base + ca + cb]);
                }
                self.accumulate_vec(grads, *a, ga);
                self.accumulate_vec(grads, *b, gb);
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out_shape[*axis];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate_vec(grads, *x, dx);
            }
            Op::GatherRows { x, index } => {
                let s = self.shape(*x);
                let (n, c) = (s[1], s[2]);
                let mut dx = vec![0.0; self.value(*x).numel()];
                let m = out_shape[1];
                for (bi, rows) in index.iter().enumerate() {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &gd[(bi * m + k) * c..(bi * m + k + 1) * c];
                        for (d, v) in dx[(bi * n + r) * c..(bi * n + r + 1) * c].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx);
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k, p) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let gd = g.data();
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        if sb.len() == 2 {
            let rows = ta.numel() / k.max(1);
            if need_a {
                let mut da = vec![0.0; rows * k];
                kernels::gemm(rows, p, k, rm(gd, p), tr(tb.data(), p), &mut da, false);
                self.accumulate_vec(grads, a, da);
            }
            if need_b {
                let mut db = vec![0.0; k * p];
                kernels::gemm(k, rows, p, tr(ta.data(), k), rm(gd, p), &mut db, false);
                self.accumulate_vec(grads, b, db);
            }
        } else if sa.len() == 2 {
            let batch = tb.numel() / (k * p).max(1);
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; tb.numel()];
            for i in 0..batch {
                let gi = &gd[i * m * p..];
                if need_a {
                    kernels::gemm(m, p, k, rm(gi, p), tr(&tb.data()[i * k * p..], p), &mut da, true);
                }
                if need_b {
                    kernels::gemm(k, m, p, tr(ta.data(), k), rm(gi, p), &mut db[i * k * p..], false);
                }
            }
            if need_a {
                self.accumulate_vec(grads, a, da);
            }
            if need_b {
                self.accumulate_vec(grads, b, db);
            }
        } else {
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut da = vec![0.0; ta.numel()];
            let mut db = vec![0.0; tb.numel()];
            for i in 0..batch {
                let gi = &gd[i * m * p..];
                if need_a {
                    kernels::gemm(m, p, k, rm(gi, p), tr(&tb.data()[i * k * p..], p), &mut da[i * m * k..], false);
                }
                if need_b {
                    kernels::gemm(k, m, p, tr(&ta.data()[i * m * k..], k), rm(gi, p), &mut db[i * k * p..], false);
                }
            }
            if need_a {
                self.accumulate_vec(grads, a, da);
            }
            if need_b {
                self.accumulate_vec(grads, b, db);
            }
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (r * c).max(1);
    let mut out = vec![0.0; t.numel()];
    for bi in 0..batch {
        let src = &t.data()[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let nd = shape.len();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out).expect("transpose shape")
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    let src_data = t.data();
    // innermost axis copied in a tight loop
    let inner = *out_shape.last().unwrap_or(&1);
    let inner_stride = *strides.last().unwrap_or(&1);
    let outer = t.numel().checked_div(inner).unwrap_or(0);
    for _ in 0..outer {
        for k in 0..inner {
            out.push(src_data[src + k * inner_stride]);
        }
        for d in (0..nd.saturating_sub(1)).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute shape")
}
