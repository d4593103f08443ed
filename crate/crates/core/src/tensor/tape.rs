use std::borrow::Cow;
use std::ops::Range;

use super::value::{Result, Tensor, TensorError};

/// Log-probability written into masked-out entries by [`Tape::masked_log_softmax`].
/// Finite so that downstream sums stay finite; `exp` of it is exactly zero.
pub const MASKED_LOG_PROB: f64 = -1.0e30;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block of a ragged batch: rows `queries` of Q attend to rows
/// `keys` of K/V. Causal segments need equal query and key lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    AddColVector(Var, Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaskedLogSoftmax {
        x: Var,
        mask: Vec<bool>,
    },
    SegmentLogSoftmax {
        x: Var,
        segments: Vec<Range<usize>>,
    },
    LogSumExpGroups {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logp: Var,
        weights: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Rebuilt for every forward pass; parameters are
/// borrowed for the lifetime `'p` instead of copied.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Differentiable leaf borrowing a parameter tensor.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'p, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            (m, k, n),
            (self.data(a), 0, k as isize, 1),
            (self.data(b), 0, n as isize, 1),
            (&mut out, 0, n as isize, 1),
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// `a[i, j] + b[j]`: broadcast a row vector over the leading dimension.
    pub fn add_row_vector(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row_vector", a)?;
        if self.value(b).numel() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.data(b);
        let data = self
            .data(a)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let t = Tensor::new(vec![m, n], data)?;
        self.push("add_row_vector", t, Op::AddRowVector(a, b), &[a, b])
    }

    /// `a[i, j] + b[i]`: broadcast a column vector across columns.
    pub fn add_col_vector(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_col_vector", a)?;
        if self.value(b).numel() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_vector",
                lhs: vec![m, n],
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.data(b);
        let mut data = self.data(a).to_vec();
        for (i, row) in data.chunks_mut(n.max(1)).enumerate().take(m) {
            row.iter_mut().for_each(|x| *x += bv[i]);
        }
        let t = Tensor::new(vec![m, n], data)?;
        self.push("add_col_vector", t, Op::AddColVector(a, b), &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("relu", t, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization of a matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data(x)[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool, op: &'static str) -> Result<Tensor> {
        let (outer, len, inner) = self.axis_split(op, x, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| xd[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|i| (xd[idx(i)] - max).exp()).sum();
                let lz = z.ln();
                for i in 0..len {
                    out[idx(i)] = if log {
                        xd[idx(i)] - max - lz
                    } else {
                        (xd[idx(i)] - max).exp() / z
                    };
                }
            }
        }
        Tensor::new(self.shape(x).to_vec(), out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_impl(x, axis, false, "softmax")?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.softmax_impl(x, axis, true, "log_softmax")?;
        self.push("log_softmax", t, Op::LogSoftmax { x, axis }, &[x])
    }

    /// Row-wise log-softmax of a matrix restricted to entries where `mask` is
    /// true. Masked entries come out as [`MASKED_LOG_PROB`].
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims2("masked_log_softmax", x)?;
        if mask.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_log_softmax",
                lhs: vec![m, n],
                rhs: vec![mask.len()],
            });
        }
        let xd = self.data(x);
        let mut out = vec![MASKED_LOG_PROB; m * n];
        for i in 0..m {
            let r = i * n..(i + 1) * n;
            let allowed = || r.clone().filter(|&k| mask[k]);
            let max = allowed().map(|k| xd[k]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Invalid {
                    op: "masked_log_softmax",
                    msg: format!("row {i} has every entry masked"),
                });
            }
            let lz = allowed().map(|k| (xd[k] - max).exp()).sum::<f64>().ln();
            for k in allowed() {
                out[k] = xd[k] - max - lz;
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("masked_log_softmax", t, Op::MaskedLogSoftmax { x, mask }, &[x])
    }

    /// Log-softmax over each contiguous segment of the flattened input. The
    /// segments must tile the whole tensor in order.
    pub fn segment_log_softmax(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let n = self.value(x).numel();
        let mut cursor = 0;
        for s in &segments {
            if s.start != cursor || s.end <= s.start {
                return Err(TensorError::Invalid {
                    op: "segment_log_softmax",
                    msg: format!("segments must tile 0..{n} with non-empty ranges"),
                });
            }
            cursor = s.end;
        }
        if cursor != n {
            return Err(TensorError::Invalid {
                op: "segment_log_softmax",
                msg: format!("segments cover 0..{cursor}, tensor has {n} elements"),
            });
        }
        let xd = self.data(x);
        let mut out = vec![0.0; n];
        for s in &segments {
            let lz = log_sum_exp(xd[s.clone()].iter().copied());
            for k in s.clone() {
                out[k] = xd[k] - lz;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("segment_log_softmax", t, Op::SegmentLogSoftmax { x, segments }, &[x])
    }

    /// For each group of flat indices, `log Σ exp(x[i])`. Output is a vector
    /// with one entry per group.
    pub fn log_sum_exp_groups(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let xd = self.data(x);
        let mut out = Vec::with_capacity(groups.len());
        for g in &groups {
            if g.is_empty() {
                return Err(TensorError::Invalid {
                    op: "log_sum_exp_groups",
                    msg: "empty group".into(),
                });
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= xd.len()) {
                return Err(TensorError::IndexOutOfRange {
                    op: "log_sum_exp_groups",
                    index: bad,
                    size: xd.len(),
                });
            }
            out.push(log_sum_exp(g.iter().map(|&i| xd[i])));
        }
        let t = Tensor::vector(out);
        self.push("log_sum_exp_groups", t, Op::LogSumExpGroups { x, groups }, &[x])
    }

    /// `-Σ w_i · logp_i` as a scalar; a 0/1 mask selects target entries.
    pub fn cross_entropy_from_log_probs(&mut self, logp: Var, weights: Vec<f64>) -> Result<Var> {
        let ld = self.data(logp);
        if weights.len() != ld.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_from_log_probs",
                lhs: self.shape(logp).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let loss = -ld
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(l, w)| l * w)
            .sum::<f64>();
        self.push(
            "cross_entropy_from_log_probs",
            Tensor::scalar(loss),
            Op::CrossEntropy { logp, weights },
            &[logp],
        )
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding_lookup", table)?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding_lookup",
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push("transpose", t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        };
        let (_, n) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, n], out)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    size: m,
                });
            }
            out.extend_from_slice(&xd[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        self.push("gather_rows", t, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let idx: Vec<usize> = rows.collect();
        self.gather_rows(x, &idx)
    }

    /// Scaled dot-product multi-head attention over a ragged batch. `q` is
    /// `[nq, d]`, `k` and `v` are `[nk, d]`; head `h` uses columns
    /// `h*d/heads..(h+1)*d/heads`. Query rows not covered by any segment
    /// produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Result<Var> {
        let (nq, d) = self.dims2("attention", q)?;
        let (nk, dk) = self.dims2("attention", k)?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("model dim {d} not divisible into {heads} heads"),
            });
        }
        for s in &segments {
            if s.queries.end > nq || s.keys.end > nk || s.keys.is_empty() {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: format!("segment {s:?} outside q rows {nq} / k rows {nk}"),
                });
            }
            if s.causal && s.queries.len() != s.keys.len() {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: "causal segment needs equal query and key lengths".into(),
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for s in &segments {
            let (lq, lk) = (s.queries.len(), s.keys.len());
            for h in 0..heads {
                let off = probs.len();
                probs.resize(off + lq * lk, 0.0);
                let p = &mut probs[off..];
                gemm(
                    (lq, dh, lk),
                    (qd, s.queries.start * d + h * dh, d as isize, 1),
                    (kd, s.keys.start * d + h * dh, 1, d as isize),
                    (p, 0, lk as isize, 1),
                    0.0,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let visible = if s.causal { i + 1 } else { lk };
                    let max = row[..visible].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                    let mut z = 0.0;
                    for x in row[..visible].iter_mut() {
                        *x = (*x * scale - max).exp();
                        z += *x;
                    }
                    row[..visible].iter_mut().for_each(|x| *x /= z);
                    row[visible..].iter_mut().for_each(|x| *x = 0.0);
                }
                gemm(
                    (lq, lk, dh),
                    (p, 0, lk as isize, 1),
                    (vd, s.keys.start * d + h * dh, d as isize, 1),
                    (&mut out, s.queries.start * d + h * dh, d as isize, 1),
                    0.0,
                );
            }
        }
        let t = Tensor::new(vec![nq, d], out)?;
        self.push(
            "attention",
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            &[q, k, v],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates adjoints of every node reachable from the scalar `loss`.
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                self.backward_node(idx, &g, &mut grads);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Adjoint of a differentiable node after [`Tape::backward`]; zeros when
    /// the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        if !self.needs(v) {
            return None;
        }
        let shape = self.shape(v).to_vec();
        let data = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
        Tensor::new(shape, data).ok()
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = self.data(Var(idx));
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if let Some(ga) = slot(nodes, grads, a) {
                    // dA = dC · Bᵀ
                    gemm(
                        (m, n, k),
                        (g, 0, n as isize, 1),
                        (self.data(b), 0, 1, n as isize),
                        (ga, 0, k as isize, 1),
                        1.0,
                    );
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    // dB = Aᵀ · dC
                    gemm(
                        (k, m, n),
                        (self.data(a), 0, 1, k as isize),
                        (g, 0, n as isize, 1),
                        (gb, 0, n as isize, 1),
                        1.0,
                    );
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    axpy(gb, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let bd = self.data(b);
                    ga.iter_mut().zip(g).zip(bd).for_each(|((x, gi), y)| *x += gi * y);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let ad = self.data(a);
                    gb.iter_mut().zip(g).zip(ad).for_each(|((x, gi), y)| *x += gi * y);
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g, c);
                }
            }
            &Op::AddRowVector(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let n = gb.len();
                    for row in g.chunks(n.max(1)) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            &Op::AddColVector(a, b) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let n = self.shape(a)[1];
                    if n > 0 {
                        for (i, row) in g.chunks(n).enumerate() {
                            gb[i] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = slot(nodes, grads, a) {
                    let ad = self.data(a);
                    for ((x, gi), y) in ga.iter_mut().zip(g).zip(ad) {
                        if *y > 0.0 {
                            *x += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let gd = self.data(*gain);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, &is) in inv_std.iter().enumerate() {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = g[r.clone()].iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, k) in r.enumerate() {
                            gx[k] += is * (dxhat[j] - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (row_g, row_h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(n) {
                        axpy(gb, row, 1.0);
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = self.axis_split("softmax", x, axis).expect("checked in forward");
                if let Some(gx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = self.axis_split("log_softmax", x, axis).expect("checked in forward");
                if let Some(gx) = slot(nodes, grads, x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let total: f64 = (0..len).map(|i| g[idx(i)]).sum();
                            for i in 0..len {
                                gx[idx(i)] += g[idx(i)] - out[idx(i)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { x, mask } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    if n > 0 {
                        for (i, row_g) in g.chunks(n).enumerate() {
                            let r = i * n..(i + 1) * n;
                            let total: f64 = r.clone().filter(|&k| mask[k]).map(|k| g[k]).sum();
                            for (j, k) in r.enumerate() {
                                if mask[k] {
                                    gx[k] += row_g[j] - out[k].exp() * total;
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentLogSoftmax { x, segments } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for s in segments {
                        let total: f64 = g[s.clone()].iter().sum();
                        for k in s.clone() {
                            gx[k] += g[k] - out[k].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExpGroups { x, groups } => {
                let xd = self.data(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (gi, grp) in groups.iter().enumerate() {
                        for &k in grp {
                            gx[k] += g[gi] * (xd[k] - out[gi]).exp();
                        }
                    }
                }
            }
            Op::CrossEntropy { logp, weights } => {
                if let Some(gl) = slot(nodes, grads, *logp) {
                    gl.iter_mut().zip(weights).for_each(|(x, w)| *x -= w * g[0]);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(gx) = slot(nodes, grads, x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(gp) = slot(nodes, grads, p) {
                        axpy(gp, &g[offset..offset + n], 1.0);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward((*q, *k, *v), *heads, segments, probs, g, grads),
        }
    }

    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        segments: &[AttnSegment],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut take = |x: Var| {
            self.needs(x)
                .then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; self.value(x).numel()]))
        };
        let (mut gq, mut gk, mut gv) = (take(q), take(k), take(v));
        let mut off = 0;
        let mut ds = Vec::new();
        for s in segments {
            let (lq, lk) = (s.queries.len(), s.keys.len());
            for h in 0..heads {
                let p = &probs[off..off + lq * lk];
                off += lq * lk;
                let q_off = s.queries.start * d + h * dh;
                let k_off = s.keys.start * d + h * dh;
                if let Some(gv) = gv.as_mut() {
                    // dV += Pᵀ · dO
                    gemm(
                        (lk, lq, dh),
                        (p, 0, 1, lk as isize),
                        (g, q_off, d as isize, 1),
                        (gv, k_off, d as isize, 1),
                        1.0,
                    );
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = dO · Vᵀ, then dS = P ⊙ (dP − rowdot(dP, P)) · scale
                ds.clear();
                ds.resize(lq * lk, 0.0);
                gemm(
                    (lq, dh, lk),
                    (g, q_off, d as isize, 1),
                    (vd, k_off, 1, d as isize),
                    (&mut ds, 0, lk as isize, 1),
                    0.0,
                );
                for i in 0..lq {
                    let r = i * lk..(i + 1) * lk;
                    let dot: f64 = ds[r.clone()].iter().zip(&p[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        ds[j] = p[j] * (ds[j] - dot) * scale;
                    }
                }
                if let Some(gq) = gq.as_mut() {
                    gemm(
                        (lq, lk, dh),
                        (&ds, 0, lk as isize, 1),
                        (kd, k_off, d as isize, 1),
                        (gq, q_off, d as isize, 1),
                        1.0,
                    );
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(
                        (lk, lq, dh),
                        (&ds, 0, 1, lk as isize),
                        (qd, q_off, d as isize, 1),
                        (gk, k_off, d as isize, 1),
                        1.0,
                    );
                }
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(gx) = gx {
                match grads[x.0].as_mut() {
                    // q, k and v may alias the same node.
                    Some(existing) => axpy(existing, &gx, 1.0),
                    None => grads[x.0] = Some(gx),
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

type MatRef<'a> = (&'a [f64], usize, isize, isize);
type MatMut<'a> = (&'a mut [f64], usize, isize, isize);

/// `c ← a·b + beta·c` on strided views `(slice, offset, row stride, col stride)`.
fn gemm((m, k, n): (usize, usize, usize), a: MatRef, b: MatRef, c: MatMut, beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
    };
    assert!(c.1 + last(m, n, c.2, c.3) < c.0.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.1 + (i as isize * c.2 + j as isize * c.3) as usize;
                c.0[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.1 + last(m, k, a.2, a.3) < a.0.len(), "gemm: a out of bounds");
    assert!(b.1 + last(k, n, b.2, b.3) < b.0.len(), "gemm: b out of bounds");
    // SAFETY: every element touched lies inside the bounds asserted above, and
    // `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}
