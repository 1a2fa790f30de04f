//! Dynamic reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! from a borrowed [`ParamStore`] without copying; [`Graph::backward`]
//! returns their gradients so the caller can fold them into the store once
//! the graph (and its borrow) is gone.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamId, ParamStore};
use crate::numerics::tensor::{softmax_in_place, Tensor};

/// Node handle, valid only for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, gold: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    pub params: ParamGrads,
    inputs: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.store.get(*id).value,
            _ => unreachable!("node without value"),
        }
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.store.get(id).trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a `1 × c` row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if !tx.is_matrix() || tr.numel() != tx.cols() {
            return Err(mismatch("add_row", tx, tr));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        let r = tr.data();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Per-row normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        if !tx.is_matrix() || tg.numel() != tx.cols() || tb.numel() != tx.cols() {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let (r, c) = (tx.rows(), tx.cols());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        let xhat = Tensor::new(vec![r, c], xhat)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() || width == 0 || start + width > tx.cols() {
            return Err(Error::arg(format!(
                "slice_cols {start}..{} of {:?}",
                start + width,
                tx.shape()
            )));
        }
        let c = tx.cols();
        let mut data = Vec::with_capacity(tx.rows() * width);
        for row in tx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::new(vec![tx.rows(), width], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?);
        let r = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.rows() != r {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let out = Tensor::new(vec![r, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if !tx.is_matrix() || len == 0 || start + len > tx.rows() {
            return Err(Error::arg(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let c = tx.cols();
        let out = Tensor::new(vec![len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_matrix() || t.cols() != c {
                return Err(mismatch("concat_rows", first, t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::arg("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::OutOfVocab {
                id: bad,
                size: t.rows(),
            });
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Mean over rows → `1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_rows();
        let ng = self.needs(x);
        self.push(out, Op::MeanRows(x), ng)
    }

    /// Sum of all entries → `1 × 1`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Softmax cross-entropy of a `1 × A` logit row against `gold`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let t = self.value(logits);
        if gold >= t.numel() {
            return Err(Error::arg(format!("gold {gold} outside {} logits", t.numel())));
        }
        let mut probs = t.data().to_vec();
        softmax_in_place(&mut probs);
        let loss = -probs[gold].ln();
        // ln(p) underflows for extreme margins; recompute through log-sum-exp.
        let loss = if loss.is_finite() {
            loss
        } else {
            let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            lse - t.data()[gold]
        };
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, gold, probs }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        let mut param_grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut inputs = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Input => inputs.push((Var(i), g)),
                Op::Param(id) => param_grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(self.value(*a))?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let c = g.cols();
                        let mut sums = vec![0.0; c];
                        for chunk in g.data().chunks(c) {
                            for (s, v) in sums.iter_mut().zip(chunk) {
                                *s += v;
                            }
                        }
                        let shape = self.value(*row).shape().to_vec();
                        accumulate(&mut grads, *row, Tensor::new(shape, sums)?);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                    }
                    if self.needs(*b) {
                        let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        accumulate(&mut grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * gelu_grad(x))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let c = y.cols();
                    let mut d = vec![0.0; y.numel()];
                    for ((drow, grow), yrow) in d
                        .chunks_mut(c)
                        .zip(g.data().chunks(c))
                        .zip(y.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for j in 0..c {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let gd = g.data();
                    let hd = xhat.data();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = vec![0.0; c];
                        let mut db = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                dg[j] += gd[i * c + j] * hd[i * c + j];
                                db[j] += gd[i * c + j];
                            }
                        }
                        if self.needs(*gain) {
                            let shape = self.value(*gain).shape().to_vec();
                            accumulate(&mut grads, *gain, Tensor::new(shape, dg)?);
                        }
                        if self.needs(*bias) {
                            let shape = self.value(*bias).shape().to_vec();
                            accumulate(&mut grads, *bias, Tensor::new(shape, db)?);
                        }
                    }
                    if self.needs(*x) {
                        let gain_v = self.value(*gain).data();
                        let mut dx = vec![0.0; r * c];
                        let mut dh = vec![0.0; c];
                        for i in 0..r {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..c {
                                dh[j] = gd[i * c + j] * gain_v[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * hd[i * c + j];
                            }
                            mean_dh /= c as f64;
                            mean_dh_h /= c as f64;
                            for j in 0..c {
                                dx[i * c + j] =
                                    inv_std[i] * (dh[j] - mean_dh - hd[i * c + j] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::new(vec![r, c], dx)?);
                    }
                }
                Op::SliceCols { x, start } => {
                    let tx = self.value(*x);
                    let (c, w) = (tx.cols(), g.cols());
                    let mut d = vec![0.0; tx.numel()];
                    for (drow, grow) in d.chunks_mut(c).zip(g.data().chunks(w)) {
                        drow[*start..*start + w].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(g.rows() * w);
                            for grow in g.data().chunks(total) {
                                d.extend_from_slice(&grow[offset..offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::new(vec![g.rows(), w], d)?);
                        }
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = self.value(*x);
                    let c = tx.cols();
                    let mut d = vec![0.0; tx.numel()];
                    d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut row = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.needs(p) {
                            let d = g.data()[row * c..(row + r) * c].to_vec();
                            accumulate(&mut grads, p, Tensor::new(vec![r, c], d)?);
                        }
                        row += r;
                    }
                }
                Op::Gather { table, ids } => {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut d = vec![0.0; tt.numel()];
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[id * c + j] += g.data()[k * c + j];
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(tt.shape().to_vec(), d)?);
                }
                Op::MeanRows(x) => {
                    let tx = self.value(*x);
                    let (r, c) = (tx.rows(), tx.cols());
                    let inv = 1.0 / r as f64;
                    let mut d = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        d.extend(g.data().iter().map(|v| v * inv));
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![r, c], d)?);
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::filled(&shape, g.data()[0]));
                }
                Op::CrossEntropy {
                    logits,
                    gold,
                    probs,
                } => {
                    let s = g.data()[0];
                    let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    d[*gold] -= s;
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut grads, *logits, Tensor::new(shape, d)?);
                }
            }
        }
        Ok(Gradients {
            params: ParamGrads { grads: param_grads },
            inputs,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
