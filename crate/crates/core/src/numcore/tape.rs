//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value. Adjoints are
//! replayed in exact reverse evaluation order and accumulated additively, so
//! a value consumed several times receives the sum of its consumers'
//! contributions. A tape is single-writer; independent tapes may be used from
//! different threads at the same time.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{dot, l2, softmax_rows, Tensor, COSINE_GUARD};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax { input: usize, scale: f64 },
    LogSoftmax(usize),
    Gather { input: usize, index: Rc<[usize]> },
    RowSlice { input: usize, start: usize },
    ColSlice { input: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Cosine(usize, usize),
    Sum(usize),
    Mean(usize),
    SumSquares(usize),
    MeanRows(usize),
    LayerNorm { input: usize, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant; no adjoint is computed for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let idx = self.check(v)?;
        Ok(self.nodes.borrow()[idx].value.clone())
    }

    /// Applies `f` to the stored value without cloning it.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> Result<R> {
        let idx = self.check(v)?;
        Ok(f(&self.nodes.borrow()[idx].value))
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.with_value(v, |t| t.data()[0])
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.borrow().len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: nodes.len() - 1,
        }
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[ia].value)?, nodes[ia].requires_grad)
        };
        Ok(self.push(value, op(ia), rg))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[ia].value, &nodes[ib].value)?,
                nodes[ia].requires_grad || nodes[ib].requires_grad,
            )
        };
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.zip_with(y, "mul", |p, q| p * q), Op::Mul)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| Ok(x.scale(c)), |i| Op::Scale(i, c))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.transpose(), Op::Transpose)
    }

    /// Row-wise `softmax(scale * a)`.
    pub fn softmax_rows(&self, a: Var, scale: f64) -> Result<Var> {
        self.unary(a, |x| softmax_rows(x, scale), |input| Op::Softmax { input, scale })
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        self.unary(a, log_softmax_rows, Op::LogSoftmax)
    }

    /// `out[k] = a[index[k]]` over flat storage, reshaped to `shape`.
    pub fn gather(&self, a: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let idx = index.clone();
        self.unary(
            a,
            move |x| {
                let data = x.data();
                if let Some(&bad) = idx.iter().find(|&&k| k >= data.len()) {
                    return Err(Error::invalid(format!("gather index {bad} out of bounds")));
                }
                Tensor::new(shape, idx.iter().map(|&k| data[k]).collect())
            },
            move |input| Op::Gather { input, index },
        )
    }

    pub fn row_slice(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.unary(a, |x| x.rows(start, end), |input| Op::RowSlice { input, start })
    }

    pub fn col_slice(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.unary(
            a,
            |x| {
                let (r, c) = x.dims2()?;
                if start >= end || end > c {
                    return Err(Error::invalid(format!(
                        "column range {start}..{end} out of bounds for {c} columns"
                    )));
                }
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&x.row(i)[start..end]);
                }
                Tensor::new(vec![r, w], out)
            },
            |input| Op::ColSlice { input, start },
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.dims2()?;
            let mut rows = 0;
            let mut data = Vec::new();
            let mut rg = false;
            for &i in &idx {
                let v = &nodes[i].value;
                let (r, c) = v.dims2()?;
                if c != first.1 {
                    return Err(Error::shape("concat_rows", nodes[idx[0]].value.shape(), v.shape()));
                }
                rows += r;
                data.extend_from_slice(v.data());
                rg |= nodes[i].requires_grad;
            }
            (Tensor::new(vec![rows, first.1], data)?, rg)
        };
        Ok(self.push(value, Op::ConcatRows(idx), rg))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (rows, _) = nodes[idx[0]].value.dims2()?;
            let mut cols = 0;
            for &i in &idx {
                let (r, c) = nodes[i].value.dims2()?;
                if r != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        nodes[idx[0]].value.shape(),
                        nodes[i].value.shape(),
                    ));
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in &idx {
                    data.extend_from_slice(nodes[i].value.row(r));
                }
            }
            let rg = idx.iter().any(|&i| nodes[i].requires_grad);
            (Tensor::new(vec![rows, cols], data)?, rg)
        };
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    /// Per-row cosine similarity; output shape `[rows]`.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, super::tensor::cosine_rows, Op::Cosine)
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(x.sum())), Op::Sum)
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(x.sum() / x.len() as f64)), Op::Mean)
    }

    pub fn sum_squares(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(x.sum_squares())), Op::SumSquares)
    }

    /// Column means of a matrix, as a `1 x cols` matrix.
    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| {
                let (r, c) = x.dims2()?;
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                for o in &mut out {
                    *o /= r as f64;
                }
                Tensor::new(vec![1, c], out)
            },
            Op::MeanRows,
        )
    }

    /// Row-wise normalization to zero mean and unit variance, without affine parameters.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        self.unary(a, |x| layer_norm_rows(x, eps), |input| Op::LayerNorm { input, eps })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Entries of `wrt` the output does not depend on receive zeros.
    pub fn gradients(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out_idx = self.check(output)?;
        let wrt_idx = wrt.iter().map(|&w| self.check(w)).collect::<Result<Vec<_>>>()?;
        let nodes = self.nodes.borrow();
        if nodes[out_idx].value.len() != 1 {
            return Err(Error::invalid(format!(
                "gradient requires a scalar output, got shape {:?}",
                nodes[out_idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out_idx).map(|_| None).collect();
        grads[out_idx] = Some(Tensor::ones(nodes[out_idx].value.shape()));

        for idx in (0..=out_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            backward(&nodes, idx, &node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(wrt_idx
            .iter()
            .map(|&i| {
                grads
                    .get(i)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(nodes[i].value.shape()))
            })
            .collect())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], idx: usize, contribution: Tensor) {
    if !nodes[idx].requires_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn backward(nodes: &[Node], idx: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            if needs(b) {
                accumulate(nodes, grads, b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if needs(a) {
                accumulate(nodes, grads, a, g.zip_with(val(b), "mul", |p, q| p * q)?);
            }
            if needs(b) {
                accumulate(nodes, grads, b, g.zip_with(val(a), "mul", |p, q| p * q)?);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, a, g.scale(c)),
        Op::MatMul(a, b) => {
            if needs(a) {
                accumulate(nodes, grads, a, g.matmul(&val(b).transpose()?)?);
            }
            if needs(b) {
                accumulate(nodes, grads, b, val(a).transpose()?.matmul(g)?);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, a, g.transpose()?),
        Op::Softmax { input, scale } => {
            let y = val(idx);
            let (r, c) = y.dims2()?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let (yr, gr) = (y.row(i), g.row(i));
                let inner = dot(yr, gr);
                for j in 0..c {
                    out[i * c + j] = scale * yr[j] * (gr[j] - inner);
                }
            }
            accumulate(nodes, grads, input, Tensor::new(vec![r, c], out)?);
        }
        Op::LogSoftmax(input) => {
            let y = val(idx);
            let (r, c) = y.dims2()?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let (yr, gr) = (y.row(i), g.row(i));
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    out[i * c + j] = gr[j] - yr[j].exp() * total;
                }
            }
            accumulate(nodes, grads, input, Tensor::new(vec![r, c], out)?);
        }
        Op::Gather { input, ref index } => {
            let mut out = Tensor::zeros(val(input).shape());
            let data = out.data_mut();
            for (&k, &gv) in index.iter().zip(g.data()) {
                data[k] += gv;
            }
            accumulate(nodes, grads, input, out);
        }
        Op::RowSlice { input, start } => {
            let mut out = Tensor::zeros(val(input).shape());
            let c = g.shape()[1];
            out.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, input, out);
        }
        Op::ColSlice { input, start } => {
            let mut out = Tensor::zeros(val(input).shape());
            let (r, w) = g.dims2()?;
            let c = out.shape()[1];
            for i in 0..r {
                out.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
            }
            accumulate(nodes, grads, input, out);
        }
        Op::ConcatRows(ref parts) => {
            let c = g.shape()[1];
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    let piece = Tensor::new(val(p).shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    accumulate(nodes, grads, p, piece);
                }
                offset += n;
                debug_assert_eq!(offset % c, 0);
            }
        }
        Op::ConcatCols(ref parts) => {
            let (r, c) = g.dims2()?;
            let mut col = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if needs(p) {
                    let mut data = Vec::with_capacity(r * w);
                    for i in 0..r {
                        data.extend_from_slice(&g.data()[i * c + col..i * c + col + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(vec![r, w], data)?);
                }
                col += w;
            }
        }
        Op::Cosine(a, b) => {
            let (x, y) = (val(a), val(b));
            let (r, c) = x.dims2()?;
            let mut ga = vec![0.0; r * c];
            let mut gb = vec![0.0; r * c];
            for i in 0..r {
                let (xr, yr) = (x.row(i), y.row(i));
                let (nx, ny) = (l2(xr), l2(yr));
                let (dx, dy) = (nx.max(COSINE_GUARD), ny.max(COSINE_GUARD));
                let cos = dot(xr, yr) / (dx * dy);
                let gi = g.data()[i];
                // The guard is a constant below the threshold, so only the
                // dot-product term contributes there.
                let rx = if nx > COSINE_GUARD { cos / (nx * nx) } else { 0.0 };
                let ry = if ny > COSINE_GUARD { cos / (ny * ny) } else { 0.0 };
                for j in 0..c {
                    ga[i * c + j] = gi * (yr[j] / (dx * dy) - rx * xr[j]);
                    gb[i * c + j] = gi * (xr[j] / (dx * dy) - ry * yr[j]);
                }
            }
            if needs(a) {
                accumulate(nodes, grads, a, Tensor::new(vec![r, c], ga)?);
            }
            if needs(b) {
                accumulate(nodes, grads, b, Tensor::new(vec![r, c], gb)?);
            }
        }
        Op::Sum(a) => accumulate(nodes, grads, a, Tensor::filled(val(a).shape(), g.data()[0])),
        Op::Mean(a) => {
            let n = val(a).len() as f64;
            accumulate(nodes, grads, a, Tensor::filled(val(a).shape(), g.data()[0] / n));
        }
        Op::SumSquares(a) => {
            let s = 2.0 * g.data()[0];
            accumulate(nodes, grads, a, val(a).scale(s));
        }
        Op::MeanRows(a) => {
            let (r, c) = val(a).dims2()?;
            let scaled: Vec<f64> = g.data().iter().map(|v| v / r as f64).collect();
            let mut data = Vec::with_capacity(r * c);
            for _ in 0..r {
                data.extend_from_slice(&scaled);
            }
            accumulate(nodes, grads, a, Tensor::new(vec![r, c], data)?);
        }
        Op::LayerNorm { input, eps } => {
            let x = val(input);
            let y = val(idx);
            let (r, c) = x.dims2()?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let xr = x.row(i);
                let mean = xr.iter().sum::<f64>() / c as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let (yr, gr) = (y.row(i), g.row(i));
                let gmean = gr.iter().sum::<f64>() / c as f64;
                let gy = dot(gr, yr) / c as f64;
                for j in 0..c {
                    out[i * c + j] = inv * (gr[j] - gmean - yr[j] * gy);
                }
            }
            accumulate(nodes, grads, input, Tensor::new(vec![r, c], out)?);
        }
    }
    Ok(())
}

fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::new(vec![r, c], out)
}

fn layer_norm_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            out[i * c + j] = (row[j] - mean) * inv;
        }
    }
    Tensor::new(vec![r, c], out)
}
