//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation in evaluation order. Parameters are
//! read from a borrowed [`ParamStore`] without copying; [`Tape::backward`]
//! returns one accumulated gradient per parameter.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
    },
}

struct Node {
    op: Op,
    value: Option<Matrix>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    /// Adds every gradient into `store`'s gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).grad.add_assign(g);
            }
        }
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(1024),
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

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = tensor::matmul_nt(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMulNT(a, b), v, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Div(a, b), v, rg)
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a single row");
        assert_eq!(am.cols(), rm.cols(), "add_row width");
        let mut v = am.clone();
        let r = rm.data();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Op::AddRow(a, row), v, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), v, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        let rg = self.rg(a);
        self.push(Op::Sigmoid(a), v, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(Op::Relu(a), v, rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::softplus);
        let rg = self.rg(a);
        self.push(Op::Softplus(a), v, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(Op::Log(a), v, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = tensor::softmax_rows(self.value(a), None);
        let rg = self.rg(a);
        self.push(Op::Softmax(a), v, rg)
    }

    /// Softmax where row `i` only sees columns `0..=i + offset`.
    pub fn causal_softmax_rows(&mut self, a: Var, offset: usize) -> Var {
        let v = tensor::softmax_rows(self.value(a), Some(offset));
        let rg = self.rg(a);
        self.push(Op::Softmax(a), v, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let v = tensor::layer_norm_rows(
            self.value(a),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNorm(a, gamma, beta), v, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), rows, "concat_cols row count");
                let w = pm.cols();
                v.row_mut(r)[off..off + w].copy_from_slice(pm.row(r));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut v = Matrix::zeros(0, 0);
        for &p in parts {
            v.push_rows(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let rg = self.rg(a);
        self.push(Op::SliceCols(a, start), v, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(Op::SliceRows(a, start), v, rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(Op::Gather(table, ids.to_vec()), v, rg)
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut v = Matrix::zeros(1, am.cols());
        for r in 0..am.rows() {
            for (x, &y) in v.row_mut(0).iter_mut().zip(am.row(r)) {
                *x += y;
            }
        }
        let rg = self.rg(a);
        self.push(Op::SumRows(a), v, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Matrix::filled(1, 1, s), rg)
    }

    /// Summed label-smoothed negative log-likelihood over the rows of
    /// `logits`. The smoothed target puts `1 - smoothing` on the gold
    /// token and spreads `smoothing` uniformly over the whole vocabulary.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target per logit row");
        let logp = tensor::log_softmax_rows(lm);
        let v = lm.cols() as f64;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = logp.row(r);
            let nll = -row[t];
            let total_row = if smoothing > 0.0 {
                let smooth = -row.iter().sum::<f64>() / v;
                (1.0 - smoothing) * nll + smoothing * smooth
            } else {
                nll
            };
            total += total_row;
        }
        let rg = self.rg(logits);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
            Matrix::filled(1, 1, total),
            rg,
        )
    }

    /// Runs reverse-mode differentiation from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> ParamGrads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut param_grads: Vec<Option<Matrix>> = Vec::new();
        param_grads.resize_with(self.store.len(), || None);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, &node.op, g, &mut grads, &mut param_grads);
        }
        ParamGrads { grads: param_grads }
    }

    fn backprop_node(
        &self,
        idx: usize,
        op: &Op,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        param_grads: &mut [Option<Matrix>],
    ) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Param(id) => match &mut param_grads[id.index()] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, tensor::matmul_nt(&g, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, tensor::matmul_tn(self.value(*a), &g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    acc(*a, tensor::matmul(&g, self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, tensor::matmul_tn(&g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    acc(*b, g.map(|x| -x));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                }
                if self.rg(*b) {
                    let out = self.value(Var(idx));
                    let t = g.zip_map(out, |x, o| -x * o);
                    acc(*b, t.zip_map(bv, |x, y| x / y));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    let mut r = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (x, &y) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    acc(*row, r);
                }
                acc(*a, g);
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::Sigmoid(a) => {
                let y = self.value(Var(idx));
                acc(*a, g.zip_map(y, |x, s| x * s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = self.value(Var(idx));
                acc(*a, g.zip_map(y, |x, t| x * (1.0 - t * t)));
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                acc(*a, g.zip_map(xv, |x, v| if v > 0.0 { x } else { 0.0 }));
            }
            Op::Softplus(a) => {
                let xv = self.value(*a);
                acc(*a, g.zip_map(xv, |x, v| x * tensor::sigmoid(v)));
            }
            Op::Log(a) => {
                let xv = self.value(*a);
                acc(*a, g.zip_map(xv, |x, v| x / v));
            }
            Op::Softmax(a) => {
                let y = self.value(Var(idx));
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = tensor::dot(yr, gr);
                    for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                        *out = yr[j] * (gr[j] - s);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, gamma, beta) => {
                let xv = self.value(*a);
                let gm = self.value(*gamma).data();
                let stats = tensor::row_moments(xv);
                let n = xv.cols() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let mut dgamma = Matrix::zeros(1, xv.cols());
                let mut dbeta = Matrix::zeros(1, xv.cols());
                for (i, &(mean, inv)) in stats.iter().enumerate() {
                    let xr = xv.row(i);
                    let gr = g.row(i);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..xr.len() {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gm[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma.data_mut()[j] += gr[j] * xhat;
                        dbeta.data_mut()[j] += gr[j];
                    }
                    for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                        let xhat = (xr[j] - mean) * inv;
                        let dxhat = gr[j] * gm[j];
                        *out = inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                acc(*a, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let am = self.value(*a);
                    let d = grads[a.0].get_or_insert_with(|| Matrix::zeros(am.rows(), am.cols()));
                    for r in 0..g.rows() {
                        for (x, &y) in d.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let am = self.value(*a);
                    let d = grads[a.0].get_or_insert_with(|| Matrix::zeros(am.rows(), am.cols()));
                    for r in 0..g.rows() {
                        for (x, &y) in d.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                let tm = self.value(*table);
                let mut d = Matrix::zeros(tm.rows(), tm.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (x, &y) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(*table, d);
            }
            Op::SumRows(a) => {
                let am = self.value(*a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    d.row_mut(r).copy_from_slice(g.row(0));
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let am = self.value(*a);
                acc(*a, Matrix::filled(am.rows(), am.cols(), g.data()[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                let lm = self.value(*logits);
                let mut d = tensor::softmax_rows(lm, None);
                let v = lm.cols() as f64;
                let scale = g.data()[0];
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    if *smoothing > 0.0 {
                        for x in row.iter_mut() {
                            *x -= smoothing / v;
                        }
                    }
                    row[t] -= 1.0 - smoothing;
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};
    use crate::rng::RngState;

    #[test]
    fn constants_do_not_require_grad() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Matrix::filled(1, 1, 2.0));
        let b = tape.mul(a, a);
        assert!(!tape.rg(b));
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let w = store.add("w", 1, 3, Init::Constant(1.5), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.param(w);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let w = store.add("w", 1, 1, Init::Constant(2.0), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        let p = tape.mul(a, b);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap().data(), &[4.0]);
    }
}
