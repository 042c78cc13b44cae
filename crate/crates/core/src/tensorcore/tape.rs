//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] records every forward operation together with whatever the
//! backward sweep needs (argmax rows, dropout masks, normalisation
//! statistics). Node ids are strictly increasing, so one reverse pass over
//! the list propagates gradients from a scalar loss to every leaf that was
//! registered with [`Tape::leaf`]. Constants ([`Tape::constant`]) and any
//! subgraph built purely from them are skipped during backward.

use rand::Rng;

use super::{gemm_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Per-channel statistics of one train-mode batch-norm evaluation.
/// `var` is the biased (divide by S) variance.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Matmul(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    AddRow(ValueId, ValueId),
    MulRow(ValueId, ValueId),
    Scale(ValueId, f64),
    Relu(ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    ConcatCols(ValueId, ValueId),
    BroadcastRows(ValueId),
    MaxOverPoints(ValueId, Vec<usize>),
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_coupling: bool,
    },
    Dropout(ValueId, Vec<f64>),
    Mse(ValueId, ValueId),
    SumSquares(ValueId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the loss with respect to tape leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, if it was a gradient-tracked leaf reached by the
    /// backward sweep.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Like [`Gradients::get`] but returns zeros of the given shape when the
    /// leaf was never reached (e.g. a parameter cut off by dropout).
    pub fn get_or_zeros(&self, id: ValueId, rows: usize, cols: usize) -> Tensor {
        match self.grads[id.0].as_ref() {
            Some(t) => t.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a gradient-tracked input (parameter or differentiable input).
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf, false)
    }

    /// `(m,k) * (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols(), tb.rows(), "matmul {}x{} * {}x{}", ta.rows(), ta.cols(), tb.rows(), tb.cols());
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm_into(1.0, ta, false, tb, false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul(a, b), needs)
    }

    /// Elementwise sum of same-shaped values.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows(), ta.cols()), (tb.rows(), tb.cols()), "add shape");
        let mut out = ta.clone();
        out.add_assign(tb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Elementwise difference of same-shaped values.
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows(), ta.cols()), (tb.rows(), tb.cols()), "sub shape");
        let data = ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    /// Adds a `(1,C)` row vector to every row of an `(S,C)` value.
    pub fn add_row(&mut self, x: ValueId, r: ValueId) -> ValueId {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[r.0].value);
        assert_eq!(tr.rows(), 1, "add_row expects a row vector");
        assert_eq!(tx.cols(), tr.cols(), "add_row widths");
        let mut out = tx.clone();
        for i in 0..out.rows() {
            let row = &mut out.as_mut_slice()[i * tr.cols()..(i + 1) * tr.cols()];
            for (o, v) in row.iter_mut().zip(tr.as_slice()) {
                *o += *v;
            }
        }
        let needs = self.needs(x) || self.needs(r);
        self.push(out, Op::AddRow(x, r), needs)
    }

    /// Multiplies every row of an `(S,C)` value elementwise by a `(1,C)` row.
    pub fn mul_row(&mut self, x: ValueId, r: ValueId) -> ValueId {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[r.0].value);
        assert_eq!(tr.rows(), 1, "mul_row expects a row vector");
        assert_eq!(tx.cols(), tr.cols(), "mul_row widths");
        let mut out = tx.clone();
        for i in 0..out.rows() {
            let row = &mut out.as_mut_slice()[i * tr.cols()..(i + 1) * tr.cols()];
            for (o, v) in row.iter_mut().zip(tr.as_slice()) {
                *o *= *v;
            }
        }
        let needs = self.needs(x) || self.needs(r);
        self.push(out, Op::MulRow(x, r), needs)
    }

    pub fn scale(&mut self, x: ValueId, s: f64) -> ValueId {
        let mut out = self.nodes[x.0].value.clone();
        out.scale_assign(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// `max(0, x)`. The derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let tx = &self.nodes[x.0].value;
        let data = tx.as_slice().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data);
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let out = self.nodes[x.0].value.transposed();
        let needs = self.needs(x);
        self.push(out, Op::Transpose(x), needs)
    }

    /// Reinterprets the value with new dimensions; element order is kept.
    pub fn reshape(&mut self, x: ValueId, rows: usize, cols: usize) -> ValueId {
        let tx = &self.nodes[x.0].value;
        assert_eq!(tx.len(), rows * cols, "reshape {}x{} -> {rows}x{cols}", tx.rows(), tx.cols());
        let out = Tensor::new(rows, cols, tx.as_slice().to_vec());
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Concatenates `(S,Ca)` and `(S,Cb)` into `(S,Ca+Cb)`.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.rows(), tb.rows(), "concat_cols row counts");
        let (s, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(s * (ca + cb));
        for i in 0..s {
            data.extend_from_slice(ta.row(i));
            data.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new(s, ca + cb, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), needs)
    }

    /// Repeats a `(1,C)` row `s` times into `(s,C)`.
    pub fn broadcast_rows(&mut self, r: ValueId, s: usize) -> ValueId {
        let tr = &self.nodes[r.0].value;
        assert_eq!(tr.rows(), 1, "broadcast_rows expects a row vector");
        assert!(s > 0);
        let mut data = Vec::with_capacity(s * tr.cols());
        for _ in 0..s {
            data.extend_from_slice(tr.row(0));
        }
        let out = Tensor::new(s, tr.cols(), data);
        let needs = self.needs(r);
        self.push(out, Op::BroadcastRows(r), needs)
    }

    /// Column-wise max over rows: `(S,C) -> (1,C)`. Ties resolve to the
    /// lowest row index, and the gradient flows only to that row.
    pub fn max_over_points(&mut self, x: ValueId) -> ValueId {
        let tx = &self.nodes[x.0].value;
        let (s, c) = (tx.rows(), tx.cols());
        let mut best = tx.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..s {
            for (j, &v) in tx.row(i).iter().enumerate() {
                if v > best[j] {
                    best[j] = v;
                    arg[j] = i;
                }
            }
        }
        let out = Tensor::new(1, c, best);
        let needs = self.needs(x);
        self.push(out, Op::MaxOverPoints(x, arg), needs)
    }

    /// Train-mode batch normalisation over the row axis of `(S,C)`, `S >= 2`.
    /// Returns the normalised value and the per-channel batch statistics
    /// (mean and biased variance) so the caller can fold them into running
    /// statistics.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> (ValueId, BatchStats) {
        let tx = &self.nodes[x.0].value;
        let (s, c) = (tx.rows(), tx.cols());
        assert!(s >= 2, "batch_norm_train needs at least 2 rows, got {s}");
        let mut mean = vec![0.0; c];
        for i in 0..s {
            for (j, &v) in tx.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= s as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..s {
            for (j, &v) in tx.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= s as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats { mean: mean.clone(), var };
        let id = self.bn_affine(x, gamma, beta, &mean, &inv_std, true);
        (id, stats)
    }

    /// Inference-mode batch normalisation using fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> ValueId {
        let c = self.nodes[x.0].value.cols();
        assert_eq!(running_mean.len(), c, "running mean width");
        assert_eq!(running_var.len(), c, "running var width");
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_affine(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_affine(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: &[f64],
        inv_std: &[f64],
        batch_coupling: bool,
    ) -> ValueId {
        let tx = &self.nodes[x.0].value;
        let tg = &self.nodes[gamma.0].value;
        let tb = &self.nodes[beta.0].value;
        let (s, c) = (tx.rows(), tx.cols());
        assert_eq!((tg.rows(), tg.cols()), (1, c), "gamma shape");
        assert_eq!((tb.rows(), tb.cols()), (1, c), "beta shape");
        let mut x_hat = Tensor::zeros(s, c);
        let mut out = Tensor::zeros(s, c);
        for i in 0..s {
            for j in 0..c {
                let xh = (tx.get(i, j) - mean[j]) * inv_std[j];
                x_hat.set(i, j, xh);
                out.set(i, j, tg.get(0, j) * xh + tb.get(0, j));
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std: inv_std.to_vec(), batch_coupling },
            needs,
        )
    }

    /// Inverted dropout: each kept entry is scaled by `1/(1-rate)` so the
    /// expectation is unchanged; `rate == 0` is the identity. Panics unless
    /// `0 <= rate < 1`.
    pub fn dropout<R: Rng>(&mut self, x: ValueId, rate: f64, rng: &mut R) -> ValueId {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate}");
        let tx = &self.nodes[x.0].value;
        let n = tx.len();
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; n]
        } else {
            let keep = 1.0 / (1.0 - rate);
            (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
        };
        let data = tx.as_slice().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data);
        let needs = self.needs(x);
        self.push(out, Op::Dropout(x, mask), needs)
    }

    /// Mean squared error over all entries: `sum((a-b)^2) / len`.
    pub fn mse(&mut self, pred: ValueId, target: ValueId) -> ValueId {
        let (tp, tt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        assert_eq!((tp.rows(), tp.cols()), (tt.rows(), tt.cols()), "mse shape");
        let n = tp.len() as f64;
        let sum: f64 = tp
            .as_slice()
            .iter()
            .zip(tt.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        self.push(Tensor::scalar(sum / n), Op::Mse(pred, target), needs)
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_squares(&mut self, x: ValueId) -> ValueId {
        let tx = &self.nodes[x.0].value;
        let sum: f64 = tx.as_slice().iter().map(|v| v * v).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(sum), Op::SumSquares(x), needs)
    }

    /// Backpropagates from a scalar `loss` through the whole tape. Each tape
    /// supports exactly one backward pass; a second call errors, as does a
    /// non-scalar loss.
    pub fn backward(&mut self, loss: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::internal("tape already consumed by a backward pass"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            let v = &self.nodes[loss.0].value;
            return Err(Error::internal(format!(
                "backward requires a scalar loss, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        self.consumed = true;

        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    result[id] = Some(g);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let tb = &self.nodes[b.0].value;
                        let ta = &self.nodes[a.0].value;
                        let slot = pending[a.0]
                            .get_or_insert_with(|| Tensor::zeros(ta.rows(), ta.cols()));
                        // slot aliases pending; value tensors are only read.
                        let mut da = std::mem::replace(slot, Tensor::scalar(0.0));
                        gemm_into(1.0, &g, false, tb, true, 1.0, &mut da);
                        pending[a.0] = Some(da);
                    }
                    if self.needs(b) {
                        let ta = &self.nodes[a.0].value;
                        let tb = &self.nodes[b.0].value;
                        let slot = pending[b.0]
                            .get_or_insert_with(|| Tensor::zeros(tb.rows(), tb.cols()));
                        let mut db = std::mem::replace(slot, Tensor::scalar(0.0));
                        gemm_into(1.0, ta, true, &g, false, 1.0, &mut db);
                        pending[b.0] = Some(db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accumulate(&mut pending[a.0], g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut pending[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(b) {
                        let mut neg = g.clone();
                        neg.scale_assign(-1.0);
                        accumulate(&mut pending[b.0], neg);
                    }
                    if self.needs(a) {
                        accumulate(&mut pending[a.0], g);
                    }
                }
                Op::AddRow(x, r) => {
                    let (x, r) = (*x, *r);
                    if self.needs(r) {
                        accumulate(&mut pending[r.0], column_sums(&g));
                    }
                    if self.needs(x) {
                        accumulate(&mut pending[x.0], g);
                    }
                }
                Op::MulRow(x, r) => {
                    let (x, r) = (*x, *r);
                    if self.needs(r) {
                        let tx = &self.nodes[x.0].value;
                        let c = tx.cols();
                        let mut dr = Tensor::zeros(1, c);
                        for i in 0..tx.rows() {
                            for j in 0..c {
                                let v = dr.get(0, j) + g.get(i, j) * tx.get(i, j);
                                dr.set(0, j, v);
                            }
                        }
                        accumulate(&mut pending[r.0], dr);
                    }
                    if self.needs(x) {
                        let tr = self.nodes[r.0].value.clone();
                        let mut dx = g;
                        for i in 0..dx.rows() {
                            for j in 0..dx.cols() {
                                let v = dx.get(i, j) * tr.get(0, j);
                                dx.set(i, j, v);
                            }
                        }
                        accumulate(&mut pending[x.0], dx);
                    }
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    let mut dx = g;
                    dx.scale_assign(s);
                    accumulate(&mut pending[x.0], dx);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let tx = &self.nodes[x.0].value;
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(tx.as_slice())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let dx = Tensor::new(tx.rows(), tx.cols(), data);
                    accumulate(&mut pending[x.0], dx);
                }
                Op::Transpose(x) => {
                    let x = *x;
                    accumulate(&mut pending[x.0], g.transposed());
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let tx = &self.nodes[x.0].value;
                    let dx = Tensor::new(tx.rows(), tx.cols(), g.into_vec());
                    accumulate(&mut pending[x.0], dx);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let s = g.rows();
                    if self.needs(a) {
                        let mut da = Tensor::zeros(s, ca);
                        for i in 0..s {
                            for j in 0..ca {
                                da.set(i, j, g.get(i, j));
                            }
                        }
                        accumulate(&mut pending[a.0], da);
                    }
                    if self.needs(b) {
                        let mut db = Tensor::zeros(s, cb);
                        for i in 0..s {
                            for j in 0..cb {
                                db.set(i, j, g.get(i, ca + j));
                            }
                        }
                        accumulate(&mut pending[b.0], db);
                    }
                }
                Op::BroadcastRows(r) => {
                    let r = *r;
                    accumulate(&mut pending[r.0], column_sums(&g));
                }
                Op::MaxOverPoints(x, arg) => {
                    let x = *x;
                    let tx = &self.nodes[x.0].value;
                    let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                    for (j, &i) in arg.iter().enumerate() {
                        dx.set(i, j, g.get(0, j));
                    }
                    accumulate(&mut pending[x.0], dx);
                }
                Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_coupling } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (s, c) = (x_hat.rows(), x_hat.cols());
                    let sf = s as f64;
                    let mut col_g = vec![0.0; c];
                    let mut col_gx = vec![0.0; c];
                    for i in 0..s {
                        for j in 0..c {
                            col_g[j] += g.get(i, j);
                            col_gx[j] += g.get(i, j) * x_hat.get(i, j);
                        }
                    }
                    if self.needs(beta) {
                        accumulate(&mut pending[beta.0], Tensor::new(1, c, col_g.clone()));
                    }
                    if self.needs(gamma) {
                        accumulate(&mut pending[gamma.0], Tensor::new(1, c, col_gx.clone()));
                    }
                    if self.needs(x) {
                        let tg = &self.nodes[gamma.0].value;
                        let mut dx = Tensor::zeros(s, c);
                        for i in 0..s {
                            for j in 0..c {
                                let coef = tg.get(0, j) * inv_std[j];
                                let v = if *batch_coupling {
                                    coef / sf
                                        * (sf * g.get(i, j)
                                            - col_g[j]
                                            - x_hat.get(i, j) * col_gx[j])
                                } else {
                                    coef * g.get(i, j)
                                };
                                dx.set(i, j, v);
                            }
                        }
                        accumulate(&mut pending[x.0], dx);
                    }
                }
                Op::Dropout(x, mask) => {
                    let x = *x;
                    let tx = &self.nodes[x.0].value;
                    let data = g.as_slice().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    let dx = Tensor::new(tx.rows(), tx.cols(), data);
                    accumulate(&mut pending[x.0], dx);
                }
                Op::Mse(pred, target) => {
                    let (pred, target) = (*pred, *target);
                    let gs = g.get(0, 0);
                    let tp = &self.nodes[pred.0].value;
                    let tt = &self.nodes[target.0].value;
                    let scale = 2.0 * gs / tp.len() as f64;
                    let diff: Vec<f64> = tp
                        .as_slice()
                        .iter()
                        .zip(tt.as_slice())
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    if self.needs(pred) {
                        accumulate(
                            &mut pending[pred.0],
                            Tensor::new(tp.rows(), tp.cols(), diff.clone()),
                        );
                    }
                    if self.needs(target) {
                        let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                        accumulate(&mut pending[target.0], Tensor::new(tp.rows(), tp.cols(), neg));
                    }
                }
                Op::SumSquares(x) => {
                    let x = *x;
                    let gs = g.get(0, 0);
                    let tx = &self.nodes[x.0].value;
                    let data = tx.as_slice().iter().map(|v| 2.0 * gs * v).collect();
                    accumulate(&mut pending[x.0], Tensor::new(tx.rows(), tx.cols(), data));
                }
            }
        }

        Ok(Gradients { grads: result })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => t.add_assign(&delta),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            out.set(0, j, out.get(0, j) + g.get(i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn mse_mean_is_over_all_entries() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[[1.0, 0.0, 0.0]]));
        let t = tape.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
        let l = tape.mse(p, t);
        assert!((tape.value(l).get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        let grads = tape.backward(l).unwrap();
        let gp = grads.get(p).unwrap();
        assert!((gp.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(gp.get(0, 1), 0.0);
    }

    #[test]
    fn relu_gradient_is_zero_on_negative_and_zero_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[-2.0, 0.0, 3.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0, 3.0]);
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[0.0, 0.0, 6.0]);
    }

    #[test]
    fn max_over_points_ties_resolve_to_lowest_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 5.0], [4.0, 5.0], [4.0, 2.0]]));
        let y = tape.max_over_points(x);
        assert_eq!(tape.value(y).as_slice(), &[4.0, 5.0]);
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        // col 0: max 4.0 first reached at row 1; col 1: tie rows 0,1 -> row 0.
        let gx = g.get(x).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 10.0, 8.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // loss = sum of entries of A*B, via mse against zeros scaled.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = tape.leaf(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &Tensor::from_rows(&[[19.0, 22.0], [43.0, 50.0]]));
        let l = tape.sum_squares(c);
        let g = tape.backward(l).unwrap();
        // dL/dC = 2C; dA = dC * B^T, dB = A^T * dC.
        let dc = {
            let mut t = tape.value(c).clone();
            t.scale_assign(2.0);
            t
        };
        let da = crate::tensorcore::matmul(&dc, &tape.value(b).transposed());
        let db = crate::tensorcore::matmul(&tape.value(a).transposed(), &dc);
        assert_eq!(g.get(a).unwrap(), &da);
        assert_eq!(g.get(b).unwrap(), &db);
    }

    #[test]
    fn batch_norm_train_normalises_and_reports_biased_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0], [3.0]]));
        let gamma = tape.leaf(Tensor::from_rows(&[[1.0]]));
        let beta = tape.leaf(Tensor::from_rows(&[[0.0]]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]); // biased: ((1-2)^2 + (3-2)^2)/2
        let v = tape.value(y);
        assert!((v.get(0, 0) + v.get(1, 0)).abs() < 1e-12, "centred output");
        assert!((v.get(1, 0) - 1.0 / (1.0 + 1e-5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_infer_is_deterministic_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[2.0], [4.0]]));
        let gamma = tape.leaf(Tensor::from_rows(&[[3.0]]));
        let beta = tape.leaf(Tensor::from_rows(&[[1.0]]));
        let y = tape.batch_norm_infer(x, gamma, beta, &[1.0], &[4.0], 1e-5);
        let istd = 1.0 / (4.0 + 1e-5f64).sqrt();
        assert!((tape.value(y).get(0, 0) - (3.0 * istd + 1.0)).abs() < 1e-12);
        assert!((tape.value(y).get(1, 0) - (3.0 * 3.0 * istd + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scaling_preserves_expectation() {
        let mut rng = rng_from_seed(5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0, 3.0, 4.0]]));
        let y = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(tape.value(y), tape.value(x));

        let rate = 0.25;
        let n = 40_000;
        let mut tape2 = Tape::new();
        let big = tape2.leaf(Tensor::filled(n, 1, 1.0));
        let d = tape2.dropout(big, rate, &mut rng);
        let mean: f64 = tape2.value(d).as_slice().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "inverted scaling keeps mean ~1, got {mean}");
        for &v in tape2.value(d).as_slice() {
            assert!(v == 0.0 || (v - 1.0 / (1.0 - rate)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_double_use() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]));
        let y = tape.relu(x);
        match tape.backward(y) {
            Err(Error::Internal(msg)) => assert!(msg.contains("scalar")),
            other => panic!("expected scalar-loss error, got {other:?}"),
        }

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(Tensor::from_rows(&[[1.0, 2.0]]));
        let l2 = tape2.sum_squares(x2);
        tape2.backward(l2).unwrap();
        match tape2.backward(l2) {
            Err(Error::Internal(msg)) => assert!(msg.contains("consumed")),
            other => panic!("expected consumed-tape error, got {other:?}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[2.0]]));
        let k = tape.constant(Tensor::from_rows(&[[5.0]]));
        let y = tape.mul_row(x, k);
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(k).is_none());
        assert_eq!(g.get(x).unwrap().get(0, 0), 2.0 * 10.0 * 5.0);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // y = x + x => dy/dx = 2, loss = sum_squares(y) = 4x^2 => dl/dx = 8x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[3.0]]));
        let y = tape.add(x, x);
        let l = tape.sum_squares(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 8.0 * 3.0);
    }

    #[test]
    fn concat_broadcast_reshape_transpose_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let r = tape.leaf(Tensor::from_rows(&[[0.5, -1.0]]));
        let b = tape.broadcast_rows(r, 2);
        let cat = tape.concat_cols(a, b);
        let tr = tape.transpose(cat);
        let rs = tape.reshape(tr, 2, 4);
        let l = tape.sum_squares(rs);
        let g = tape.backward(l).unwrap();
        // loss = sum of squares of all entries: d/da = 2a, d/dr = 2*2*r.
        assert_eq!(g.get(a).unwrap().as_slice(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.get(r).unwrap().as_slice(), &[2.0, -4.0]);
    }
}
