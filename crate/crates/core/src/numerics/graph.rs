//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so
//! [`Graph::backward`] is a single reverse sweep over the tape.

use super::gemm::{gemm, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous token ranges belonging to one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Vec<Span>,
        heads: usize,
        probs: Vec<f32>,
    },
    SegmentMean {
        x: Var,
        spans: Vec<Span>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Unrounded value of scalar reductions, kept for finite-difference checks.
    precise: Option<f64>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, requires_grad: bool) -> Var {
        let v = self.push(Tensor::scalar(value as f32), op, requires_grad);
        self.nodes[v.0].precise = Some(value);
        v
    }

    /// Scalar value of `v` at the highest precision it was computed with.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.precise.unwrap_or_else(|| f64::from(n.value.item()))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `a·b` for a (m×k) and b (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            Strides::row_major(k),
            tb.data(),
            Strides::row_major(n),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ` for a (m×k) and b (n×k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_bt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            Strides::row_major(k),
            tb.data(),
            Strides::transposed(k),
            0.0,
            &mut out,
            Strides::row_major(n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu_parts(x).0).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization followed by an affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != c {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0f32; tx.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.len()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / c as f64;
            let is = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std[r] = is as f32;
            for j in 0..c {
                let h = ((f64::from(row[j]) - mean) * is) as f32;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = tx.data();
        let mut out = vec![0.0f32; src.len()];
        let mut buf = vec![0.0f32; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        let out = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Scales each row (or a single vector) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data().to_vec();
        for (r, chunk) in out.chunks_mut(c).enumerate() {
            let n = chunk
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "l2_normalize: row {r} has norm {n}"
                )));
            }
            let inv = (1.0 / n) as f32;
            for v in chunk.iter_mut() {
                *v *= inv;
            }
            norms.push(n as f32);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// Selects rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, c) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row dot product of two m×d matrices, giving m×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let out: Vec<f32> = (0..ta.rows())
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![ta.rows(), 1], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (p, q) = (ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(ta.rows() * (p + q));
        for r in 0..ta.rows() {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(vec![ta.rows(), p + q], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out).expect("non-empty");
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`. A single
    /// vector is treated as one row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, c) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    len: c,
                });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = f64::from(max)
                + row
                    .iter()
                    .map(|&v| f64::from(v - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - f64::from(row[t]);
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push_scalar(
            loss / rows as f64,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are N×D with the rows of each sequence contiguous as
    /// described by `spans`; attention never crosses a span boundary.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(shape_err("attention", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("attention", tq, tv));
        }
        let (n, d) = (tq.rows(), tq.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let covered: usize = spans.iter().map(|s| s.len).sum();
        if spans.iter().any(|s| s.start + s.len > n) || covered > n {
            return Err(Error::Shape {
                op: "attention spans",
                left: tq.shape().to_vec(),
                right: vec![covered],
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let total: usize = spans.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0f32; total];
        let mut out = vec![0.0f32; n * d];
        let mut off = 0;
        for s in spans {
            let l = s.len;
            for h in 0..heads {
                let base = s.start * d + h * dh;
                let p = &mut probs[off..off + l * l];
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    &tq.data()[base..],
                    Strides::row_major(d),
                    &tk.data()[base..],
                    Strides::transposed(d),
                    0.0,
                    p,
                    Strides::row_major(l),
                );
                for row in p.chunks_mut(l) {
                    softmax_in_place(row);
                }
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    p,
                    Strides::row_major(l),
                    &tv.data()[base..],
                    Strides::row_major(d),
                    0.0,
                    &mut out[base..],
                    Strides::row_major(d),
                );
                off += l * l;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean of the rows in each span, giving one row per span.
    pub fn segment_mean(&mut self, x: Var, spans: &[Span]) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        let mut out = vec![0.0f32; spans.len() * c];
        for (i, s) in spans.iter().enumerate() {
            if s.len == 0 || s.start + s.len > tx.rows() {
                return Err(Error::Index {
                    what: "segment_mean span",
                    index: s.start + s.len,
                    len: tx.rows(),
                });
            }
            let inv = 1.0 / s.len as f32;
            for r in s.start..s.start + s.len {
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(tx.row(r)) {
                    *o += v * inv;
                }
            }
        }
        let out = Tensor::new(vec![spans.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self
            .value(a)
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .sum::<f64>();
        let rg = self.rg(&[a]);
        self.push_scalar(s, Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: lt.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC·Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Strides::row_major(n),
                        tb.data(),
                        Strides::transposed(n),
                        1.0,
                        ga,
                        Strides::row_major(k),
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ·dC
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        ta.data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        1.0,
                        gb,
                        Strides::row_major(n),
                    );
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC·B
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g,
                        Strides::row_major(n),
                        tb.data(),
                        Strides::row_major(k),
                        1.0,
                        ga,
                        Strides::row_major(k),
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = dCᵀ·A
                    gemm(
                        n,
                        m,
                        k,
                        1.0,
                        g,
                        Strides::transposed(n),
                        ta.data(),
                        Strides::row_major(k),
                        1.0,
                        gb,
                        Strides::row_major(k),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = self.value(*a).cols();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * gelu_parts(*v).1;
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
                let tg = self.value(*gain);
                let c = tg.len();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0f32; c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for j in 0..c {
                            dxhat[j] = gr[j] * tg.data()[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= c as f32;
                        mean_dh /= c as f32;
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += inv_std[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f32 =
                                (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &t) in idx.iter().enumerate() {
                        let dst = &mut gt[t * c..(t + 1) * c];
                        dst.iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, gr) in g.iter().enumerate() {
                        for j in 0..c {
                            ga[r * c + j] += gr * tb.data()[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, gr) in g.iter().enumerate() {
                        for j in 0..c {
                            gb[r * c + j] += gr * ta.data()[r * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, gr) in g.chunks(p + q).enumerate() {
                        ga[r * p..(r + 1) * p]
                            .iter_mut()
                            .zip(&gr[..p])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, gr) in g.chunks(p + q).enumerate() {
                        gb[r * q..(r + 1) * q]
                            .iter_mut()
                            .zip(&gr[p..])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f32;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, spans, *heads, probs, g, grads),
            Op::SegmentMean { x, spans } => {
                let c = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, s) in spans.iter().enumerate() {
                        let inv = 1.0 / s.len as f32;
                        for r in s.start..s.start + s.len {
                            for j in 0..c {
                                gx[r * c + j] += g[i * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spans: &[Span],
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let n = tq.len();
        let mut dq = vec![0.0f32; n];
        let mut dk = vec![0.0f32; n];
        let mut dv = vec![0.0f32; n];
        let mut off = 0;
        let max_len = spans.iter().map(|s| s.len).max().unwrap_or(0);
        let mut ds = vec![0.0f32; max_len * max_len];
        for s in spans {
            let l = s.len;
            for h in 0..heads {
                let base = s.start * d + h * dh;
                let p = &probs[off..off + l * l];
                let ds = &mut ds[..l * l];
                // dP = dO·Vᵀ
                gemm(
                    l,
                    dh,
                    l,
                    1.0,
                    &g[base..],
                    Strides::row_major(d),
                    &tv.data()[base..],
                    Strides::transposed(d),
                    0.0,
                    ds,
                    Strides::row_major(l),
                );
                for (dr, pr) in ds.chunks_mut(l).zip(p.chunks(l)) {
                    let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                gemm(
                    l,
                    l,
                    dh,
                    scale,
                    ds,
                    Strides::row_major(l),
                    &tk.data()[base..],
                    Strides::row_major(d),
                    1.0,
                    &mut dq[base..],
                    Strides::row_major(d),
                );
                gemm(
                    l,
                    l,
                    dh,
                    scale,
                    ds,
                    Strides::transposed(l),
                    &tq.data()[base..],
                    Strides::row_major(d),
                    1.0,
                    &mut dk[base..],
                    Strides::row_major(d),
                );
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    p,
                    Strides::transposed(l),
                    &g[base..],
                    Strides::row_major(d),
                    1.0,
                    &mut dv[base..],
                    Strides::row_major(d),
                );
                off += l * l;
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
            }
        }
    }
}
