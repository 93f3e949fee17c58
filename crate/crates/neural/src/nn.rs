//! Layers built from tape operations.
//!
//! Linear maps store their weight as `[d_in x d_out]` and act on row
//! vectors, so a batch `x[n x d_in]` maps to `x W + b`.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::RngState;
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: d_in };
        let weight = store.add(&format!("{name}.weight"), d_in, d_out, init, rng)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), 1, d_out, init, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.d_in {
            return Err(Error::Shape(format!(
                "linear `{}` expects input width {}, got {cols}",
                tape.store().get(self.weight).name,
                self.d_in
            )));
        }
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        Ok(match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        })
    }
}

/// `x W + b` on plain matrices, with shape checking.
pub fn linear(x: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if x.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(Error::Shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut y = crate::tensor::matmul(x, weight);
    for r in 0..y.rows() {
        for (v, &b) in y.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut RngState) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), 1, dim, Init::Constant(1.0), rng)?,
            beta: store.add(&format!("{name}.beta"), 1, dim, Init::Constant(0.0), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let table = store.add(name, vocab, dim, Init::Normal { std: 0.02 }, rng)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Index(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab
            )));
        }
        let t = tape.param(self.table);
        Ok(tape.gather(t, ids))
    }
}

/// Gated recurrent unit with PyTorch gate layout `[reset, update, new]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        let init = Init::FanInUniform { fan_in: hidden };
        Ok(Self {
            w_ih: store.add(&format!("{name}.w_ih"), d_in, 3 * hidden, init, rng)?,
            w_hh: store.add(&format!("{name}.w_hh"), hidden, 3 * hidden, init, rng)?,
            b_ih: store.add(&format!("{name}.b_ih"), 1, 3 * hidden, init, rng)?,
            b_hh: store.add(&format!("{name}.b_hh"), 1, 3 * hidden, init, rng)?,
            d_in,
            hidden,
        })
    }

    /// One recurrent step for a batch of rows: `x[n x d_in]`, `h[n x hidden]`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let (xr, xc) = tape.shape(x);
        let (hr, hc) = tape.shape(h);
        if xc != self.d_in || hc != self.hidden || xr != hr {
            return Err(Error::Shape(format!(
                "gru step: input {xr}x{xc}, state {hr}x{hc}, expected width {} / {}",
                self.d_in, self.hidden
            )));
        }
        let hd = self.hidden;
        let (w_ih, w_hh) = (tape.param(self.w_ih), tape.param(self.w_hh));
        let (b_ih, b_hh) = (tape.param(self.b_ih), tape.param(self.b_hh));
        let gi = tape.matmul(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul(h, w_hh);
        let gh = tape.add_row(gh, b_hh);

        let i_r = tape.slice_cols(gi, 0, hd);
        let i_z = tape.slice_cols(gi, hd, hd);
        let i_n = tape.slice_cols(gi, 2 * hd, hd);
        let h_r = tape.slice_cols(gh, 0, hd);
        let h_z = tape.slice_cols(gh, hd, hd);
        let h_n = tape.slice_cols(gh, 2 * hd, hd);

        let r = tape.add(i_r, h_r);
        let r = tape.sigmoid(r);
        let z = tape.add(i_z, h_z);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, h_n);
        let n = tape.add(i_n, rn);
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        Ok(tape.add(n, zd))
    }
}

/// Runs `cell` left to right over `inputs` (each `1 x d_in`, or a batch of
/// equal height) starting from `h0`; returns the final hidden state.
pub fn rnn_encode(tape: &mut Tape, cell: &GruCell, inputs: &[Var], h0: Var) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Domain("rnn_encode needs a non-empty sequence".into()));
    }
    let mut h = h0;
    for &x in inputs {
        h = cell.step(tape, x, h)?;
    }
    Ok(h)
}

/// Standard multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `query[n x d]` attends over `key[t x d]` / `value[t x d]`. With
    /// `causal`, query row `i` only sees key rows `0..=i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        query: Var,
        key: Var,
        value: Var,
        causal: bool,
    ) -> Result<Var> {
        let (t, _) = tape.shape(key);
        if t == 0 {
            return Err(Error::Domain("attention over zero keys".into()));
        }
        if tape.shape(value).0 != t {
            return Err(Error::Shape("key and value lengths differ".into()));
        }
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, key)?;
        let v = self.v.forward(tape, value)?;
        self.attend(tape, q, k, v, causal.then_some(0))
    }

    /// Attention over already projected queries, keys and values, followed
    /// by the output projection. `causal_offset` masks key `j > i + offset`.
    pub fn attend(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        causal_offset: Option<usize>,
    ) -> Result<Var> {
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let probs = match causal_offset {
                Some(off) => tape.causal_softmax_rows(scores, off),
                None => tape.softmax_rows(scores),
            };
            outs.push(tape.matmul(probs, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.out.forward(tape, cat)
    }
}

/// Position-wise feed-forward block `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

/// Inverted dropout; identity when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut RngState) -> Var {
    if p <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Matrix::from_vec(r, c, mask).expect("mask shape"));
    tape.mul(x, mask)
}

/// Mean label-smoothed cross-entropy over the rows of `logits`.
pub fn cross_entropy_label_smoothed(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let total = cross_entropy_label_smoothed_sum(tape, logits, targets, smoothing)?;
    Ok(tape.scale(total, 1.0 / targets.len() as f64))
}

/// Summed variant of [`cross_entropy_label_smoothed`].
pub fn cross_entropy_label_smoothed_sum(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Domain(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let (rows, vocab) = tape.shape(logits);
    if rows != targets.len() || rows == 0 {
        return Err(Error::Shape(format!(
            "{rows} logit rows for {} targets",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::Index(format!(
            "target id {bad} outside vocabulary of size {vocab}"
        )));
    }
    Ok(tape.cross_entropy_sum(logits, targets, smoothing))
}

/// Sinusoidal position encodings for positions `start..start + len`.
pub fn sinusoidal_positions(start: usize, len: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(len, dim);
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / dim as f64).exp();
            m.set(p, 2 * i, (pos * freq).sin());
            m.set(p, 2 * i + 1, (pos * freq).cos());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{self, Matrix};

    fn store_rng() -> (ParamStore, RngState) {
        (ParamStore::new(), RngState::new(11))
    }

    fn set(store: &mut ParamStore, id: ParamId, m: Matrix) {
        store.get_mut(id).values = m;
    }

    #[test]
    fn linear_identity_zero_and_arithmetic() {
        let x = Matrix::row_vector(&[1.5, -2.0, 0.25]);
        assert_eq!(
            linear(&x, &Matrix::identity(3), &Matrix::zeros(1, 3)).unwrap(),
            x
        );
        assert_eq!(
            linear(&x, &Matrix::zeros(3, 2), &Matrix::zeros(1, 2)).unwrap(),
            Matrix::zeros(1, 2)
        );
        let y = linear(
            &Matrix::row_vector(&[3.0]),
            &Matrix::row_vector(&[2.0]),
            &Matrix::row_vector(&[1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert!(matches!(
            linear(&x, &Matrix::zeros(2, 2), &Matrix::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn linear_layer_rejects_wrong_width() {
        let (mut store, mut rng) = store_rng();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::zeros(1, 4));
        assert!(matches!(lin.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    /// Hand-unrolled GRU step on plain matrices.
    fn gru_step_oracle(store: &ParamStore, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = cell.hidden;
        let xm = Matrix::row_vector(x);
        let hm = Matrix::row_vector(h);
        let gi = linear(&xm, store.value(cell.w_ih), store.value(cell.b_ih)).unwrap();
        let gh = linear(&hm, store.value(cell.w_hh), store.value(cell.b_hh)).unwrap();
        (0..hd)
            .map(|j| {
                let r = tensor::sigmoid(gi.get(0, j) + gh.get(0, j));
                let z = tensor::sigmoid(gi.get(0, hd + j) + gh.get(0, hd + j));
                let n = (gi.get(0, 2 * hd + j) + r * gh.get(0, 2 * hd + j)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    #[test]
    fn rnn_encode_matches_unrolled_steps() {
        let (mut store, mut rng) = store_rng();
        let cell = GruCell::new(&mut store, "gru", 3, 4, &mut rng).unwrap();
        let xs = [[0.5, -1.0, 0.2], [0.1, 0.3, -0.7], [1.2, 0.0, 0.4]];
        let h0 = [0.1, -0.2, 0.3, 0.0];

        let mut h = h0.to_vec();
        for x in &xs {
            h = gru_step_oracle(&store, &cell, x, &h);
        }

        let mut tape = Tape::new(&store);
        let inputs: Vec<Var> = xs
            .iter()
            .map(|x| tape.constant(Matrix::row_vector(x)))
            .collect();
        let h0v = tape.constant(Matrix::row_vector(&h0));
        let out = rnn_encode(&mut tape, &cell, &inputs, h0v).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }

        // single step and determinism
        let one = rnn_encode(&mut tape, &cell, &inputs[..1], h0v).unwrap();
        let expected = gru_step_oracle(&store, &cell, &xs[0], &h0);
        for (a, b) in tape.value(one).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        let again = rnn_encode(&mut tape, &cell, &inputs, h0v).unwrap();
        assert_eq!(tape.value(again), tape.value(out));

        assert!(matches!(
            rnn_encode(&mut tape, &cell, &[], h0v),
            Err(Error::Domain(_))
        ));
    }

    fn identity_attention(dim: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
        let (mut store, mut rng) = store_rng();
        let mha = MultiHeadAttention::new(&mut store, "att", dim, heads, &mut rng).unwrap();
        for lin in [&mha.q, &mha.k, &mha.v, &mha.out] {
            set(&mut store, lin.weight, Matrix::identity(dim));
            set(&mut store, lin.bias.unwrap(), Matrix::zeros(1, dim));
        }
        (store, mha)
    }

    #[test]
    fn attention_single_key_returns_projected_value() {
        let (mut store, mut rng) = store_rng();
        let mha = MultiHeadAttention::new(&mut store, "att", 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.0; 4]]).unwrap());
        let kv = tape.constant(Matrix::row_vector(&[0.7, 0.1, -0.4, 1.1]));
        let out = mha.forward(&mut tape, q, kv, kv, false).unwrap();
        let v = mha.v.forward(&mut tape, kv).unwrap();
        let expected = mha.out.forward(&mut tape, v).unwrap();
        for r in 0..2 {
            for (a, b) in tape.value(out).row(r).iter().zip(tape.value(expected).row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_identical_values_ignore_query() {
        let (mut store, mut rng) = store_rng();
        let mha = MultiHeadAttention::new(&mut store, "att", 4, 4, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let q = tape.constant(Matrix::from_rows(&[vec![5.0, -1.0, 2.0, 0.5], vec![-3.0; 4]]).unwrap());
        let k = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 1.0, 0.5]]).unwrap());
        let v = tape.constant(Matrix::from_rows(&[vec![0.2, 0.4, 0.6, 0.8], vec![0.2, 0.4, 0.6, 0.8]]).unwrap());
        let out = mha.forward(&mut tape, q, k, v, false).unwrap();
        let o = tape.value(out);
        for (a, b) in o.row(0).iter().zip(o.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_hand_computation() {
        // Identity projections, d = 2, one head: softmax(Q K^T / sqrt 2) V.
        let (store, mha) = identity_attention(2, 1);
        let qm = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let km = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        let vm = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        // row 0 scores: [1, 0]/sqrt2 ; row 1: [1, 2]/sqrt2
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let w0 = [1.0 / (1.0 + (-s).exp()), (-s).exp() / (1.0 + (-s).exp())];
        let e1 = [(s).exp(), (2.0 * s).exp()];
        let w1 = [e1[0] / (e1[0] + e1[1]), e1[1] / (e1[0] + e1[1])];
        let expected = [
            [w0[0] * 1.0 + w0[1] * 3.0, w0[0] * 2.0 + w0[1] * 4.0],
            [w1[0] * 1.0 + w1[1] * 3.0, w1[0] * 2.0 + w1[1] * 4.0],
        ];
        let mut tape = Tape::new(&store);
        let (q, k, v) = (tape.constant(qm), tape.constant(km), tape.constant(vm));
        let out = mha.forward(&mut tape, q, k, v, false).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((tape.value(out).get(r, c) - expected[r][c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let (mut store, mut rng) = store_rng();
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 6, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        // uniform logits over 4 classes: ln 4 regardless of smoothing/target
        let u = tape.constant(Matrix::zeros(2, 4));
        for eps in [0.0, 0.1, 0.5] {
            let l = cross_entropy_label_smoothed(&mut tape, u, &[0, 3], eps).unwrap();
            assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-14);
        }
        // large margin, no smoothing -> ~0
        let big = tape.constant(Matrix::row_vector(&[60.0, 0.0, 0.0]));
        let l = cross_entropy_label_smoothed(&mut tape, big, &[0], 0.0).unwrap();
        assert!(tape.scalar(l) < 1e-20);
        // two classes, logits [1, 0], target 1, smoothing 0.2
        // log p = [1 - ln(1+e), -ln(1+e)]; q = [0.1, 0.9]
        let two = tape.constant(Matrix::row_vector(&[1.0, 0.0]));
        let l = cross_entropy_label_smoothed(&mut tape, two, &[1], 0.2).unwrap();
        let lse = (1.0f64 + 1.0f64.exp()).ln();
        let expected = -(0.1 * (1.0 - lse) + 0.9 * (-lse));
        assert!((tape.scalar(l) - expected).abs() < 1e-14);
        // smoothing 0 equals plain CE
        let plain = tape.constant(Matrix::row_vector(&[0.3, -0.2, 1.7]));
        let l = cross_entropy_label_smoothed(&mut tape, plain, &[2], 0.0).unwrap();
        let lp = tensor::log_softmax_rows(&Matrix::row_vector(&[0.3, -0.2, 1.7]));
        assert_eq!(tape.scalar(l), -lp.get(0, 2));
        // errors
        assert!(matches!(
            cross_entropy_label_smoothed(&mut tape, plain, &[3], 0.0),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            cross_entropy_label_smoothed(&mut tape, plain, &[0], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn dropout_zero_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Matrix::filled(2, 3, 1.0));
        let mut rng = RngState::new(1);
        assert_eq!(dropout(&mut tape, x, 0.0, &mut rng), x);
        let y = dropout(&mut tape, x, 0.5, &mut rng);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
