//! Incremental decoding with cached keys and values, greedy decoding and
//! length-normalized beam search.

use std::cmp::Ordering;

use prmt_neural::nn::{sinusoidal_positions, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use prmt_neural::tensor::{layer_norm_rows, log_softmax_rows, matmul, matmul_nt, softmax_rows};
use prmt_neural::{Matrix, ParamStore};

use super::{ForwardOpts, FusionInput, Translator};
use crate::data::{BOS, EOS, MASK, PAD, UNK};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens including EOS; `None` means `2n + 10`.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending with EOS when finished.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }

    pub fn truncated(&self) -> bool {
        !self.finished
    }

    /// Output ids without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn lin(store: &ParamStore, l: &Linear, x: &Matrix) -> Matrix {
    let mut y = matmul(x, store.value(l.weight));
    if let Some(b) = l.bias {
        let b = store.value(b);
        for r in 0..y.rows() {
            for (v, &c) in y.row_mut(r).iter_mut().zip(b.data()) {
                *v += c;
            }
        }
    }
    y
}

fn norm(store: &ParamStore, l: &LayerNorm, x: &Matrix) -> Matrix {
    layer_norm_rows(x, store.value(l.gamma).data(), store.value(l.beta).data())
}

fn feed_forward(store: &ParamStore, f: &FeedForward, x: &Matrix) -> Matrix {
    let h = lin(store, &f.fc1, x).map(|v| v.max(0.0));
    lin(store, &f.fc2, &h)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    a.zip_map(b, |x, y| x + y)
}

/// Projected queries `q` attend over projected keys and values.
fn attend(store: &ParamStore, mha: &MultiHeadAttention, q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let dh = mha.dim / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cat = Matrix::zeros(q.rows(), mha.dim);
    for h in 0..mha.heads {
        let scores = matmul_nt(&q.slice_cols(h * dh, dh), &k.slice_cols(h * dh, dh)).map(|x| x * scale);
        let out = matmul(&softmax_rows(&scores, None), &v.slice_cols(h * dh, dh));
        for r in 0..out.rows() {
            cat.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(out.row(r));
        }
    }
    lin(store, &mha.out, &cat)
}

/// Per-hypothesis self-attention keys and values, one matrix per layer.
#[derive(Clone, Debug)]
struct Cache {
    k: Vec<Matrix>,
    v: Vec<Matrix>,
}

struct Incremental<'m> {
    model: &'m Translator,
    cross: Vec<(Matrix, Matrix)>,
}

impl<'m> Incremental<'m> {
    fn new(model: &'m Translator, mem: &Matrix) -> Self {
        let p = &model.params;
        let cross = model
            .decoder
            .iter()
            .map(|l| (lin(p, &l.cross.k, mem), lin(p, &l.cross.v, mem)))
            .collect();
        Self { model, cross }
    }

    fn empty_cache(&self) -> Cache {
        let d = self.model.cfg.dim;
        let n = self.model.decoder.len();
        Cache { k: vec![Matrix::zeros(0, d); n], v: vec![Matrix::zeros(0, d); n] }
    }

    /// Log-probabilities of the token after `token` at position `pos`.
    fn step(&self, cache: &mut Cache, token: usize, pos: usize) -> Vec<f64> {
        let m = self.model;
        let p = &m.params;
        let d = m.cfg.dim;
        let table = p.value(m.embed.table);
        let scale = (d as f64).sqrt();
        let pe = sinusoidal_positions(pos, 1, d);
        let row: Vec<f64> = table.row(token).iter().map(|x| x * scale).collect();
        let mut x = add(&Matrix::row_vector(&row), &pe);
        for (i, l) in m.decoder.iter().enumerate() {
            let q = lin(p, &l.self_attn.q, &x);
            cache.k[i].push_rows(&lin(p, &l.self_attn.k, &x));
            cache.v[i].push_rows(&lin(p, &l.self_attn.v, &x));
            let a = attend(p, &l.self_attn, &q, &cache.k[i], &cache.v[i]);
            let z = norm(p, &l.ln1, &add(&x, &a));
            let qc = lin(p, &l.cross.q, &z);
            let c = attend(p, &l.cross, &qc, &self.cross[i].0, &self.cross[i].1);
            let w = norm(p, &l.ln2, &add(&z, &c));
            x = norm(p, &l.ln3, &add(&w, &feed_forward(p, &l.ff, &w)));
        }
        log_softmax_rows(&matmul_nt(&x, table)).into_vec()
    }
}

fn allowed(token: usize) -> bool {
    !matches!(token, PAD | BOS | UNK | MASK)
}

fn default_max_len(src: &[usize]) -> usize {
    2 * src.len().saturating_sub(1) + 10
}

/// Highest log-probability among allowed tokens, lowest id on ties.
fn argmax_allowed(lp: &[f64]) -> usize {
    let mut best = None::<(usize, f64)>;
    for (w, &s) in lp.iter().enumerate() {
        if allowed(w) && best.is_none_or(|(_, b)| s > b) {
            best = Some((w, s));
        }
    }
    best.map_or(EOS, |(w, _)| w)
}

fn prepare(model: &Translator, src: &[usize], fusion: &FusionInput, opts: ForwardOpts) -> Result<Matrix> {
    if src.is_empty() {
        return Err(Error::Domain("empty source sentence".into()));
    }
    model.memory(src, fusion, opts)
}

pub fn greedy_decode(
    model: &Translator,
    src: &[usize],
    fusion: &FusionInput,
    opts: ForwardOpts,
    max_len: Option<usize>,
) -> Result<Hypothesis> {
    let mem = prepare(model, src, fusion, opts)?;
    Ok(greedy_from(&Incremental::new(model, &mem), max_len.unwrap_or_else(|| default_max_len(src))))
}

fn greedy_from(inc: &Incremental, max_len: usize) -> Hypothesis {
    let mut cache = inc.empty_cache();
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    let mut prev = BOS;
    for pos in 0..max_len {
        let lp = inc.step(&mut cache, prev, pos);
        let w = argmax_allowed(&lp);
        hyp.tokens.push(w);
        hyp.score += lp[w];
        if w == EOS {
            hyp.finished = true;
            break;
        }
        prev = w;
    }
    hyp
}

/// Descending normalized score, then lexicographic tokens.
fn final_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized().total_cmp(&a.normalized()).then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    tokens: Vec<usize>,
    score: f64,
    cache: Cache,
}

/// Beam search over allowed tokens. Each step keeps the `beam` best
/// extensions by cumulative log-probability (ties by token id, then by
/// parent rank); extensions ending in EOS leave the beam as finished
/// hypotheses. The greedy hypothesis is always a candidate. Returns the
/// finished hypothesis with the best length-normalized score, or the best
/// partial one when nothing finished within `max_len`.
pub fn beam_search(
    model: &Translator,
    src: &[usize],
    fusion: &FusionInput,
    opts: ForwardOpts,
    cfg: BeamConfig,
) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(src));
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mem = prepare(model, src, fusion, opts)?;
    let inc = Incremental::new(model, &mem);
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live = vec![Live { tokens: Vec::new(), score: 0.0, cache: inc.empty_cache() }];
    for pos in 0..max_len {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in live.iter_mut().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let lp = inc.step(&mut hyp.cache, prev, pos);
            cand.extend(
                lp.iter()
                    .enumerate()
                    .filter(|&(w, _)| allowed(w))
                    .map(|(w, &s)| (hyp.score + s, w, b)),
            );
        }
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cand.truncate(cfg.beam);
        let mut next = Vec::with_capacity(cand.len());
        for (score, w, b) in cand {
            let mut tokens = live[b].tokens.clone();
            tokens.push(w);
            if w == EOS {
                finished.push(Hypothesis { tokens, score, finished: true });
            } else {
                next.push(Live { tokens, score, cache: live[b].cache.clone() });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        let best_done = finished.iter().map(Hypothesis::normalized).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if best_done >= best_live / max_len as f64 {
            break;
        }
    }
    let greedy = greedy_from(&inc, max_len);
    if greedy.finished {
        finished.push(greedy.clone());
    }
    if !finished.is_empty() {
        finished.sort_by(final_order);
        return Ok(finished.swap_remove(0));
    }
    let mut partial: Vec<Hypothesis> = live
        .into_iter()
        .map(|h| Hypothesis { tokens: h.tokens, score: h.score, finished: false })
        .collect();
    partial.push(greedy);
    partial.sort_by(final_order);
    log::warn!("no hypothesis reached EOS within {max_len} tokens");
    Ok(partial.swap_remove(0))
}

/// Teacher-forced log-probabilities of `tokens` through the incremental
/// decoder; used to score arbitrary sequences.
pub(crate) fn sequence_log_prob(
    model: &Translator,
    src: &[usize],
    fusion: &FusionInput,
    opts: ForwardOpts,
    tokens: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mem = prepare(model, src, fusion, opts)?;
    let inc = Incremental::new(model, &mem);
    let mut cache = inc.empty_cache();
    let mut prev = BOS;
    let mut out = Vec::with_capacity(tokens.len() + 1);
    for (pos, &t) in tokens.iter().enumerate() {
        out.push(inc.step(&mut cache, prev, pos));
        prev = t;
    }
    out.push(inc.step(&mut cache, prev, tokens.len()));
    Ok(out)
}

impl Translator {
    /// Per-step log-probabilities after each prefix of `tokens`.
    pub fn incremental_log_probs(
        &self,
        src: &[usize],
        fusion: &FusionInput,
        opts: ForwardOpts,
        tokens: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        sequence_log_prob(self, src, fusion, opts, tokens)
    }

    pub fn translate(&self, src: &[usize], fusion: &FusionInput, opts: ForwardOpts, cfg: BeamConfig) -> Result<Hypothesis> {
        beam_search(self, src, fusion, opts, cfg)
    }
}
