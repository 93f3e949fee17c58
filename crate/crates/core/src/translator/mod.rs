//! Transformer translator with the phrase-level multimodal aggregation
//! module, its training loop and beam search.

mod beam;
mod train;

use std::path::Path;

use prmt_neural::checkpoint::{self, CheckpointMeta};
use prmt_neural::nn::{dropout, sinusoidal_positions, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use prmt_neural::{Matrix, ParamStore, RngState, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::grounding::PhraseSpan;

pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis};
pub use train::{average_checkpoints, average_models, train_translator, NmtEpochLog, NmtTrainConfig, NmtTrainResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    /// Width of the universal representations fed to the aggregation.
    pub rep_dim: usize,
}

impl TranslatorConfig {
    pub fn desk(rep_dim: usize) -> Self {
        Self { dim: 64, heads: 4, enc_layers: 2, dec_layers: 2, ff_dim: 128, dropout: 0.1, rep_dim }
    }

    pub fn full(rep_dim: usize) -> Self {
        Self { dim: 512, heads: 4, enc_layers: 6, dec_layers: 6, ff_dim: 2048, dropout: 0.3, rep_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.dim % 2 != 0 {
            return Err(Error::Config("model dim must be even for sinusoidal positions".into()));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.ff_dim == 0 || self.rep_dim == 0 {
            return Err(Error::Config("layer counts and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Phrase spans of a source sentence and one universal representation
/// per span, in the same order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub spans: Vec<PhraseSpan>,
    pub reps: Vec<Vec<f64>>,
}

impl FusionInput {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn validate(&self, n_tokens: usize, rep_dim: usize) -> Result<()> {
        if self.spans.len() != self.reps.len() {
            return Err(Error::Domain(format!("{} spans but {} reps", self.spans.len(), self.reps.len())));
        }
        let mut sorted = self.spans.clone();
        sorted.sort();
        for (i, s) in sorted.iter().enumerate() {
            if s.len == 0 || s.end() > n_tokens {
                return Err(Error::Domain(format!("span ({}, {}) outside {n_tokens} tokens", s.start, s.len)));
            }
            if i > 0 && sorted[i - 1].end() > s.start {
                return Err(Error::Domain("overlapping phrase spans".into()));
            }
        }
        if let Some(r) = self.reps.iter().find(|r| r.len() != rep_dim) {
            return Err(Error::Domain(format!("rep of width {} for rep_dim {rep_dim}", r.len())));
        }
        Ok(())
    }
}

/// One training or evaluation sentence in vocabulary ids. `src` ends with
/// EOS; `tgt` does not.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    pub fusion: FusionInput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOpts {
    pub train: bool,
    /// Skip the aggregation module entirely (text-only baseline).
    pub text_only: bool,
    /// Test hook forcing the sentence gate to zero.
    pub lambda_off: bool,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(text_only: bool) -> Self {
        Self { train: true, text_only, lambda_off: false }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

/// Parameters of the multimodal aggregation module.
#[derive(Clone, Debug)]
pub struct Aggregation {
    pub rep_proj: Option<Linear>,
    pub w1: Linear,
    pub w2: Linear,
    pub ln: LayerNorm,
    pub fusion: MultiHeadAttention,
    pub w3: Linear,
    pub w4: Linear,
}

/// Intermediate tensors of one fusion call.
#[derive(Clone, Debug)]
pub struct FuseTrace {
    pub s_bar: Matrix,
    pub lambda: Matrix,
    pub s: Matrix,
}

#[derive(Clone, Debug)]
pub struct Translator {
    pub cfg: TranslatorConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    embed: Embedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    pub agg: Aggregation,
}

type Offsets = Vec<(usize, usize)>;

fn offsets_of<T>(seqs: &[T], len: impl Fn(&T) -> usize) -> Offsets {
    let mut out = Vec::with_capacity(seqs.len());
    let mut at = 0;
    for s in seqs {
        let n = len(s);
        out.push((at, n));
        at += n;
    }
    out
}

impl Translator {
    pub fn new(cfg: TranslatorConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed).derive(10);
        let (d, h, f) = (cfg.dim, cfg.heads, cfg.ff_dim);
        let s = &mut store;
        let r = &mut rng;
        let embed = Embedding::new(s, "embed", vocab.len(), d, r)?;
        let mut encoder = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            let p = format!("enc{l}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(s, &format!("{p}.attn"), d, h, r)?,
                ln1: LayerNorm::new(s, &format!("{p}.ln1"), d, r)?,
                ff: FeedForward::new(s, &format!("{p}.ff"), d, f, r)?,
                ln2: LayerNorm::new(s, &format!("{p}.ln2"), d, r)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("dec{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(s, &format!("{p}.self"), d, h, r)?,
                ln1: LayerNorm::new(s, &format!("{p}.ln1"), d, r)?,
                cross: MultiHeadAttention::new(s, &format!("{p}.cross"), d, h, r)?,
                ln2: LayerNorm::new(s, &format!("{p}.ln2"), d, r)?,
                ff: FeedForward::new(s, &format!("{p}.ff"), d, f, r)?,
                ln3: LayerNorm::new(s, &format!("{p}.ln3"), d, r)?,
            });
        }
        let rep_proj = if cfg.rep_dim != d {
            Some(Linear::new(s, "agg.rep_proj", cfg.rep_dim, d, false, r)?)
        } else {
            None
        };
        let agg = Aggregation {
            rep_proj,
            w1: Linear::new(s, "agg.w1", d, d, false, r)?,
            w2: Linear::new(s, "agg.w2", d, d, false, r)?,
            ln: LayerNorm::new(s, "agg.ln", d, r)?,
            fusion: MultiHeadAttention::new(s, "agg.fusion", d, h, r)?,
            w3: Linear::new(s, "agg.w3", d, d, false, r)?,
            w4: Linear::new(s, "agg.w4", d, d, false, r)?,
        };
        Ok(Self { cfg, vocab, params: store, embed, encoder, decoder, agg })
    }

    /// Source ids with a trailing EOS.
    pub fn encode_source(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = self.vocab.encode(tokens);
        ids.push(EOS);
        ids
    }

    pub fn example(&self, src: &[String], tgt: &[String], fusion: FusionInput) -> Result<Example> {
        fusion.validate(src.len(), self.cfg.rep_dim)?;
        Ok(Example { src: self.encode_source(src), tgt: self.vocab.encode(tgt), fusion })
    }

    /// Token embeddings scaled by sqrt(d) plus positions, per sequence.
    fn embed_seqs(&self, tape: &mut Tape, seqs: &[&[usize]], opts: ForwardOpts, rng: &mut RngState) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let mut pos = Matrix::zeros(0, self.cfg.dim);
        for s in seqs {
            pos.push_rows(&sinusoidal_positions(0, s.len(), self.cfg.dim));
        }
        let e = self.embed.forward(tape, &ids)?;
        let e = tape.scale(e, (self.cfg.dim as f64).sqrt());
        let p = tape.constant(pos);
        let x = tape.add(e, p);
        Ok(self.drop(tape, x, opts, rng))
    }

    fn drop(&self, tape: &mut Tape, x: Var, opts: ForwardOpts, rng: &mut RngState) -> Var {
        if opts.train {
            dropout(tape, x, self.cfg.dropout, rng)
        } else {
            x
        }
    }

    /// Attention of each query block over the matching key/value block,
    /// with all projections applied to the stacked rows at once.
    fn block_attention(
        tape: &mut Tape,
        mha: &MultiHeadAttention,
        x: Var,
        x_off: &Offsets,
        mem: Var,
        mem_off: &Offsets,
        causal: bool,
    ) -> Result<Var> {
        let q = mha.q.forward(tape, x)?;
        let k = mha.k.forward(tape, mem)?;
        let v = mha.v.forward(tape, mem)?;
        let dh = mha.dim / mha.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut blocks = Vec::with_capacity(x_off.len());
        for (&(qs, ql), &(ks, kl)) in x_off.iter().zip(mem_off) {
            let qb = tape.slice_rows(q, qs, ql);
            let kb = tape.slice_rows(k, ks, kl);
            let vb = tape.slice_rows(v, ks, kl);
            let mut heads = Vec::with_capacity(mha.heads);
            for h in 0..mha.heads {
                let qh = tape.slice_cols(qb, h * dh, dh);
                let kh = tape.slice_cols(kb, h * dh, dh);
                let vh = tape.slice_cols(vb, h * dh, dh);
                let sc = tape.matmul_nt(qh, kh);
                let sc = tape.scale(sc, scale);
                let pr = if causal { tape.causal_softmax_rows(sc, 0) } else { tape.softmax_rows(sc) };
                heads.push(tape.matmul(pr, vh));
            }
            blocks.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) });
        }
        let cat = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) };
        Ok(mha.out.forward(tape, cat)?)
    }

    /// Encoder states `H` of every source sentence, stacked.
    fn encode_on_tape(&self, tape: &mut Tape, srcs: &[&[usize]], opts: ForwardOpts, rng: &mut RngState) -> Result<(Var, Offsets)> {
        if srcs.iter().any(|s| s.is_empty()) {
            return Err(Error::Domain("empty source sentence".into()));
        }
        let off = offsets_of(srcs, |s| s.len());
        let mut x = self.embed_seqs(tape, srcs, opts, rng)?;
        for l in &self.encoder {
            let a = Self::block_attention(tape, &l.attn, x, &off, x, &off, false)?;
            let a = self.drop(tape, a, opts, rng);
            let y = tape.add(x, a);
            let y = l.ln1.forward(tape, y);
            let f = l.ff.forward(tape, y)?;
            let f = self.drop(tape, f, opts, rng);
            let z = tape.add(y, f);
            x = l.ln2.forward(tape, z);
        }
        Ok((x, off))
    }

    /// Aggregated phrase vectors `M` (t x d) from universal reps `u`
    /// (t x rep_dim) and encoder states `h` (n x d).
    pub fn aggregate_on_tape(&self, tape: &mut Tape, u: Var, h: Var, spans: &[PhraseSpan]) -> Result<Var> {
        let n = tape.shape(h).0;
        if spans.is_empty() {
            return Err(Error::Domain("aggregation needs at least one phrase".into()));
        }
        if let Some(s) = spans.iter().find(|s| s.len == 0 || s.end() > n) {
            return Err(Error::Domain(format!("span ({}, {}) outside {n} states", s.start, s.len)));
        }
        let u = match &self.agg.rep_proj {
            Some(p) => p.forward(tape, u)?,
            None => u,
        };
        let gu = self.agg.w1.forward(tape, u)?;
        let gh = self.agg.w2.forward(tape, h)?;
        let mut rows = Vec::with_capacity(spans.len());
        for (i, s) in spans.iter().enumerate() {
            let gui = tape.slice_rows(gu, i, 1);
            let ghs = tape.slice_rows(gh, s.start, s.len);
            let pre = tape.add_row(ghs, gui);
            let o = tape.sigmoid(pre);
            let hs = tape.slice_rows(h, s.start, s.len);
            let gated = tape.mul(o, hs);
            let summed = tape.sum_rows(gated);
            let ui = tape.slice_rows(u, i, 1);
            rows.push(tape.add(ui, summed));
        }
        let pre = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) };
        Ok(self.agg.ln.forward(tape, pre))
    }

    /// Returns `(S, S_bar, lambda)` for states `h` (n x d) and phrases `m`.
    pub fn fuse_on_tape(&self, tape: &mut Tape, h: Var, m: Var, lambda_off: bool) -> Result<(Var, Var, Var)> {
        let s_bar = self.agg.fusion.forward(tape, h, m, m, false)?;
        let lambda = if lambda_off {
            let (r, c) = tape.shape(h);
            tape.constant(Matrix::zeros(r, c))
        } else {
            let a = self.agg.w3.forward(tape, h)?;
            let b = self.agg.w4.forward(tape, s_bar)?;
            let pre = tape.add(a, b);
            tape.sigmoid(pre)
        };
        let gated = tape.mul(lambda, s_bar);
        Ok((tape.add(h, gated), s_bar, lambda))
    }

    /// Applies fusion sentence by sentence; sentences without phrases, or
    /// all sentences in text-only mode, keep `S = H`.
    fn fuse_batch(&self, tape: &mut Tape, h: Var, off: &Offsets, fusions: &[&FusionInput], opts: ForwardOpts) -> Result<Var> {
        if opts.text_only || fusions.iter().all(|f| f.is_empty()) {
            return Ok(h);
        }
        let mut blocks = Vec::with_capacity(off.len());
        for (&(start, len), f) in off.iter().zip(fusions) {
            let hb = tape.slice_rows(h, start, len);
            if f.is_empty() {
                blocks.push(hb);
                continue;
            }
            let u = tape.constant(Matrix::from_rows(&f.reps)?);
            let m = self.aggregate_on_tape(tape, u, hb, &f.spans)?;
            blocks.push(self.fuse_on_tape(tape, hb, m, opts.lambda_off)?.0);
        }
        Ok(if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks) })
    }

    /// Fused encoder memory `S` for a batch, stacked, with row offsets.
    pub fn memory_on_tape(
        &self,
        tape: &mut Tape,
        srcs: &[&[usize]],
        fusions: &[&FusionInput],
        opts: ForwardOpts,
        rng: &mut RngState,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        for (s, f) in srcs.iter().zip(fusions) {
            f.validate(s.len(), self.cfg.rep_dim)?;
        }
        let (h, off) = self.encode_on_tape(tape, srcs, opts, rng)?;
        Ok((self.fuse_batch(tape, h, &off, fusions, opts)?, off))
    }

    /// Next-token logits for every decoder input position, stacked.
    fn decode_on_tape(
        &self,
        tape: &mut Tape,
        mem: Var,
        mem_off: &Offsets,
        inputs: &[&[usize]],
        opts: ForwardOpts,
        rng: &mut RngState,
    ) -> Result<Var> {
        let off = offsets_of(inputs, |s| s.len());
        let mut y = self.embed_seqs(tape, inputs, opts, rng)?;
        for l in &self.decoder {
            let a = Self::block_attention(tape, &l.self_attn, y, &off, y, &off, true)?;
            let a = self.drop(tape, a, opts, rng);
            let z = tape.add(y, a);
            let z = l.ln1.forward(tape, z);
            let c = Self::block_attention(tape, &l.cross, z, &off, mem, mem_off, false)?;
            let c = self.drop(tape, c, opts, rng);
            let w = tape.add(z, c);
            let w = l.ln2.forward(tape, w);
            let f = l.ff.forward(tape, w)?;
            let f = self.drop(tape, f, opts, rng);
            let o = tape.add(w, f);
            y = l.ln3.forward(tape, o);
        }
        let table = tape.param(self.embed.table);
        Ok(tape.matmul_nt(y, table))
    }

    fn decoder_io(batch: &[&Example]) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for ex in batch {
            let mut inp = Vec::with_capacity(ex.tgt.len() + 1);
            inp.push(BOS);
            inp.extend_from_slice(&ex.tgt);
            inputs.push(inp);
            targets.extend_from_slice(&ex.tgt);
            targets.push(EOS);
        }
        (inputs, targets)
    }

    /// Teacher-forced logits of a batch, stacked over target positions.
    pub fn logits_on_tape(&self, tape: &mut Tape, batch: &[&Example], opts: ForwardOpts, rng: &mut RngState) -> Result<(Var, Vec<usize>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let srcs: Vec<&[usize]> = batch.iter().map(|e| e.src.as_slice()).collect();
        let fusions: Vec<&FusionInput> = batch.iter().map(|e| &e.fusion).collect();
        let (mem, mem_off) = self.memory_on_tape(tape, &srcs, &fusions, opts, rng)?;
        let (inputs, targets) = Self::decoder_io(batch);
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        Ok((self.decode_on_tape(tape, mem, &mem_off, &refs, opts, rng)?, targets))
    }

    /// Label-smoothed cross-entropy per target token (EOS included).
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&Example],
        smoothing: f64,
        opts: ForwardOpts,
        rng: &mut RngState,
    ) -> Result<(Var, usize)> {
        let (logits, targets) = self.logits_on_tape(tape, batch, opts, rng)?;
        let loss = prmt_neural::nn::cross_entropy_label_smoothed(tape, logits, &targets, smoothing)?;
        Ok((loss, targets.len()))
    }

    /// Evaluation-mode teacher-forced logits.
    pub fn logits(&self, batch: &[&Example], opts: ForwardOpts) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let mut rng = RngState::new(0);
        let (l, _) = self.logits_on_tape(&mut tape, batch, ForwardOpts { train: false, ..opts }, &mut rng)?;
        Ok(tape.value(l).clone())
    }

    /// Mean label-smoothed loss per target token in evaluation mode.
    pub fn eval_loss(&self, examples: &[Example], smoothing: f64, text_only: bool) -> Result<f64> {
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in examples.chunks(64) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let mut tape = Tape::new(&self.params);
            let mut rng = RngState::new(0);
            let opts = ForwardOpts { text_only, ..ForwardOpts::eval() };
            let (loss, n) = self.loss_on_tape(&mut tape, &refs, smoothing, opts, &mut rng)?;
            total += tape.scalar(loss) * n as f64;
            tokens += n;
        }
        Ok(total / tokens.max(1) as f64)
    }

    /// Evaluation-mode fused memory `S` of one sentence.
    pub fn memory(&self, src: &[usize], fusion: &FusionInput, opts: ForwardOpts) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let mut rng = RngState::new(0);
        let opts = ForwardOpts { train: false, ..opts };
        let (s, _) = self.memory_on_tape(&mut tape, &[src], &[fusion], opts, &mut rng)?;
        Ok(tape.value(s).clone())
    }

    /// Evaluation-mode encoder states `H` of one sentence.
    pub fn encoder_states(&self, src: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let mut rng = RngState::new(0);
        let (h, _) = self.encode_on_tape(&mut tape, &[src], ForwardOpts::eval(), &mut rng)?;
        Ok(tape.value(h).clone())
    }

    /// `m_i` for one phrase: `LayerNorm(u + sum_j sigmoid(W1 u + W2 h_j) * h_j)`.
    pub fn phrase_aggregate(&self, u: &[f64], h: &Matrix, span: PhraseSpan) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let uv = tape.constant(Matrix::row_vector(u));
        let hv = tape.constant(h.clone());
        let m = self.aggregate_on_tape(&mut tape, uv, hv, &[span])?;
        Ok(tape.value(m).data().to_vec())
    }

    /// Eq.-level fusion of states `h` with phrase vectors `m`; an empty `m`
    /// returns `S = H`.
    pub fn fuse(&self, h: &Matrix, m: &Matrix, lambda_off: bool) -> Result<FuseTrace> {
        if m.rows() == 0 {
            return Ok(FuseTrace {
                s_bar: Matrix::zeros(h.rows(), h.cols()),
                lambda: Matrix::zeros(h.rows(), h.cols()),
                s: h.clone(),
            });
        }
        let mut tape = Tape::new(&self.params);
        let hv = tape.constant(h.clone());
        let mv = tape.constant(m.clone());
        let (s, s_bar, lambda) = self.fuse_on_tape(&mut tape, hv, mv, lambda_off)?;
        Ok(FuseTrace {
            s_bar: tape.value(s_bar).clone(),
            lambda: tape.value(lambda).clone(),
            s: tape.value(s).clone(),
        })
    }

    pub fn meta(&self, seed: u64, step: u64) -> CheckpointMeta {
        CheckpointMeta {
            kind: "translator".into(),
            seed,
            step,
            config: serde_json::json!({ "model": self.cfg, "vocab": self.vocab }),
        }
    }

    pub fn to_bytes(&self, seed: u64, step: u64) -> Result<Vec<u8>> {
        Ok(checkpoint::to_bytes(&self.params, &self.meta(seed, step))?)
    }

    pub fn save(&self, path: impl AsRef<Path>, seed: u64, step: u64) -> Result<()> {
        std::fs::write(path, self.to_bytes(seed, step)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, header) = checkpoint::from_bytes(bytes)?;
        if header.kind != "translator" {
            return Err(Error::Config(format!("checkpoint holds a `{}` model", header.kind)));
        }
        let cfg: TranslatorConfig = serde_json::from_value(header.config["model"].clone())?;
        let vocab: Vocab = serde_json::from_value(header.config["vocab"].clone())?;
        let mut model = Self::new(cfg, vocab, 0)?;
        checkpoint::copy_values(&mut model.params, &store)?;
        Ok(model)
    }
}
