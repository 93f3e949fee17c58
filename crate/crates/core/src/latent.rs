//! Conditional VAE over (phrase, region feature) pairs. The decoder's
//! initial state `s = Linear([z, v])` is the phrase-guided representation
//! exported to retrieval.

use std::path::Path;

use prmt_neural::checkpoint::{self, CheckpointMeta};
use prmt_neural::nn::{Embedding, GruCell, Linear};
use prmt_neural::optim::{Adam, AdamConfig};
use prmt_neural::{Matrix, ParamStore, RngState, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::data::{count_tokens, Vocab, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::grounding::PhraseRegionPair;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl CvaeConfig {
    /// Desk-scale dimensions for a given feature width.
    pub fn desk(feat_dim: usize) -> Self {
        Self { feat_dim, latent_dim: 16, hidden: 64, embed_dim: 32 }
    }

    /// Full-scale dimensions (latent 64, RNN hidden 512).
    pub fn full(feat_dim: usize) -> Self {
        Self { feat_dim, latent_dim: 64, hidden: 512, embed_dim: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.feat_dim, self.latent_dim, self.hidden, self.embed_dim].contains(&0) {
            return Err(Error::Config("cvae dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub anneal_steps: u64,
    pub word_dropout: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 3e-3,
            epochs: 40,
            anneal_steps: 2500,
            word_dropout: 0.1,
            seed: 0,
            clip_grad_norm: None,
        }
    }
}

impl CvaeTrainConfig {
    pub fn paper() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 5e-5,
            epochs: 200,
            anneal_steps: 20000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config("word_dropout must lie in [0, 1)".into()));
        }
        if self.anneal_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("anneal_steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Which latent code feeds `s` at inference time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepMode {
    #[default]
    Posterior,
    Prior,
}

#[derive(Clone, Debug)]
struct Layers {
    embed: Embedding,
    prior_mu: Linear,
    prior_sigma: Linear,
    post_rnn: GruCell,
    post_mu: Linear,
    post_sigma: Linear,
    init: Linear,
    dec_rnn: GruCell,
    out: Linear,
}

#[derive(Clone, Debug)]
pub struct Cvae {
    pub cfg: CvaeConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    layers: Layers,
}

/// Pieces of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `(recon_sum + anneal_weight * kl_sum) / tokens`.
    pub total: Var,
    pub recon_sum: f64,
    pub kl_sum: f64,
    pub tokens: usize,
    pub pairs: usize,
    pub anneal_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Reconstruction NLL per token.
    pub recon: f64,
    /// KL per token, the unit in which it enters the loss.
    pub kl: f64,
    pub kl_per_pair: f64,
    pub anneal_weight: f64,
}

/// `min(1, step / anneal_steps)`.
pub fn anneal_weight(step: u64, anneal_steps: u64) -> f64 {
    (step as f64 / anneal_steps.max(1) as f64).clamp(0.0, 1.0)
}

/// Closed-form `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` summed over
/// dimensions.
pub fn kl_diag_gaussians(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(sigma_p))
        .map(|((&mq, &sq), (&mp, &sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], rng: &mut RngState) -> Vec<f64> {
    mu.iter().zip(sigma).map(|(&m, &s)| m + s * rng.normal()).collect()
}

/// Decoder inputs `[BOS, p_1, .., p_n]` with every non-BOS position
/// independently replaced by UNK with probability `word_dropout`.
pub fn decoder_inputs(phrase: &[usize], word_dropout: f64, rng: &mut RngState) -> Vec<usize> {
    let mut out = Vec::with_capacity(phrase.len() + 1);
    out.push(BOS);
    for &t in phrase {
        let drop = word_dropout > 0.0 && rng.bernoulli(word_dropout);
        out.push(if drop { UNK } else { t });
    }
    out
}

fn kl_on_tape(tape: &mut Tape, mu_q: Var, sig_q: Var, mu_p: Var, sig_p: Var) -> Var {
    let lp = tape.log(sig_p);
    let lq = tape.log(sig_q);
    let log_ratio = tape.sub(lp, lq);
    let d = tape.sub(mu_q, mu_p);
    let d2 = tape.mul(d, d);
    let q2 = tape.mul(sig_q, sig_q);
    let num = tape.add(q2, d2);
    let p2 = tape.mul(sig_p, sig_p);
    let den = tape.scale(p2, 2.0);
    let frac = tape.div(num, den);
    let per = tape.add(log_ratio, frac);
    let sum = tape.sum_all(per);
    let (r, c) = tape.shape(mu_q);
    let half = tape.constant(Matrix::filled(1, 1, -0.5 * (r * c) as f64));
    tape.add(sum, half)
}

impl Cvae {
    pub fn new(cfg: CvaeConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngState::new(seed);
        let mut s = ParamStore::new();
        let (v, l, h, e, dv) = (vocab.len(), cfg.latent_dim, cfg.hidden, cfg.embed_dim, cfg.feat_dim);
        let layers = Layers {
            embed: Embedding::new(&mut s, "embed", v, e, &mut rng)?,
            prior_mu: Linear::new(&mut s, "prior_mu", dv, l, true, &mut rng)?,
            prior_sigma: Linear::new(&mut s, "prior_sigma", dv, l, true, &mut rng)?,
            post_rnn: GruCell::new(&mut s, "post_rnn", e, h, &mut rng)?,
            post_mu: Linear::new(&mut s, "post_mu", h + dv, l, true, &mut rng)?,
            post_sigma: Linear::new(&mut s, "post_sigma", h + dv, l, true, &mut rng)?,
            init: Linear::new(&mut s, "init", l + dv, h, true, &mut rng)?,
            dec_rnn: GruCell::new(&mut s, "dec_rnn", e, h, &mut rng)?,
            out: Linear::new(&mut s, "out", h, v, true, &mut rng)?,
        };
        Ok(Self { cfg, vocab, params: s, layers })
    }

    /// Vocabulary over the phrase side of a pair set.
    pub fn vocab_for(pairs: &[PhraseRegionPair]) -> Vocab {
        Vocab::from_counts(&count_tokens(pairs.iter().map(|p| p.phrase.as_slice())), 1)
    }

    pub fn rep_dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn encode_phrase(&self, phrase: &[String]) -> Vec<usize> {
        self.vocab.encode(phrase)
    }

    fn features(&self, tape: &mut Tape, feats: &[&[f64]]) -> Result<Var> {
        let dv = self.cfg.feat_dim;
        let mut data = Vec::with_capacity(feats.len() * dv);
        for f in feats {
            if f.len() != dv {
                return Err(Error::Domain(format!(
                    "region feature has dimension {}, model expects {dv}",
                    f.len()
                )));
            }
            data.extend_from_slice(f);
        }
        Ok(tape.constant(Matrix::from_vec(feats.len(), dv, data)?))
    }

    /// Prior mean and scale for a batch of features `v[B x D_v]`.
    pub fn prior_on_tape(&self, tape: &mut Tape, v: Var) -> Result<(Var, Var)> {
        let mu = self.layers.prior_mu.forward(tape, v)?;
        let raw = self.layers.prior_sigma.forward(tape, v)?;
        Ok((mu, tape.softplus(raw)))
    }

    /// Final hidden state of the phrase RNN for each phrase of the batch.
    fn phrase_states(&self, tape: &mut Tape, phrases: &[Vec<usize>]) -> Result<Var> {
        if phrases.iter().any(Vec::is_empty) {
            return Err(Error::Domain("empty phrase".into()));
        }
        let b = phrases.len();
        let max_len = phrases.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = tape.constant(Matrix::zeros(b, self.cfg.hidden));
        for t in 0..max_len {
            let ids: Vec<usize> = phrases.iter().map(|p| p.get(t).copied().unwrap_or(PAD)).collect();
            let x = self.layers.embed.forward(tape, &ids)?;
            let stepped = self.layers.post_rnn.step(tape, x, h)?;
            h = if phrases.iter().all(|p| p.len() > t) {
                stepped
            } else {
                let mask = row_mask(phrases.iter().map(|p| p.len() > t), self.cfg.hidden);
                let mask = tape.constant(mask);
                let diff = tape.sub(stepped, h);
                let upd = tape.mul(mask, diff);
                tape.add(h, upd)
            };
        }
        Ok(h)
    }

    pub fn posterior_on_tape(
        &self,
        tape: &mut Tape,
        phrases: &[Vec<usize>],
        v: Var,
    ) -> Result<(Var, Var)> {
        let h = self.phrase_states(tape, phrases)?;
        let joint = tape.concat_cols(&[h, v]);
        let mu = self.layers.post_mu.forward(tape, joint)?;
        let raw = self.layers.post_sigma.forward(tape, joint)?;
        Ok((mu, tape.softplus(raw)))
    }

    pub fn decode_init_on_tape(&self, tape: &mut Tape, z: Var, v: Var) -> Result<Var> {
        let joint = tape.concat_cols(&[z, v]);
        Ok(self.layers.init.forward(tape, joint)?)
    }

    /// Teacher-forced decoder NLL summed over all target tokens (phrase
    /// tokens plus EOS); returns the loss node and the token count.
    pub fn reconstruction_on_tape(
        &self,
        tape: &mut Tape,
        s: Var,
        phrases: &[Vec<usize>],
        word_dropout: f64,
        rng: &mut RngState,
    ) -> Result<(Var, usize)> {
        let inputs: Vec<Vec<usize>> = phrases
            .iter()
            .map(|p| decoder_inputs(p, word_dropout, rng))
            .collect();
        let steps = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = s;
        let mut outs = Vec::with_capacity(steps);
        let mut targets = Vec::new();
        for t in 0..steps {
            let ids: Vec<usize> = inputs.iter().map(|x| x.get(t).copied().unwrap_or(PAD)).collect();
            let x = self.layers.embed.forward(tape, &ids)?;
            h = self.layers.dec_rnn.step(tape, x, h)?;
            let active: Vec<usize> = (0..phrases.len()).filter(|&i| inputs[i].len() > t).collect();
            for &i in &active {
                targets.push(phrases[i].get(t).copied().unwrap_or(EOS));
            }
            outs.push(if active.len() == phrases.len() { h } else { tape.gather(h, &active) });
        }
        let states = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs) };
        let logits = self.layers.out.forward(tape, states)?;
        let n = targets.len();
        Ok((tape.cross_entropy_sum(logits, &targets, 0.0), n))
    }

    /// Annealed negative ELBO per target token for a batch, with one
    /// posterior sample per pair.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        phrases: &[Vec<usize>],
        feats: &[&[f64]],
        step: u64,
        train: &CvaeTrainConfig,
        rng: &mut RngState,
    ) -> Result<ElboTerms> {
        if phrases.is_empty() || phrases.len() != feats.len() {
            return Err(Error::Domain("elbo needs a non-empty batch of matching pairs".into()));
        }
        let v = self.features(tape, feats)?;
        let (mu_p, sig_p) = self.prior_on_tape(tape, v)?;
        let (mu_q, sig_q) = self.posterior_on_tape(tape, phrases, v)?;
        let (b, l) = tape.shape(mu_q);
        let eps = Matrix::from_vec(b, l, (0..b * l).map(|_| rng.normal()).collect())?;
        let eps = tape.constant(eps);
        let noise = tape.mul(sig_q, eps);
        let z = tape.add(mu_q, noise);
        let s = self.decode_init_on_tape(tape, z, v)?;
        let (recon, tokens) = self.reconstruction_on_tape(tape, s, phrases, train.word_dropout, rng)?;
        let kl = kl_on_tape(tape, mu_q, sig_q, mu_p, sig_p);
        let w = anneal_weight(step, train.anneal_steps);
        let wkl = tape.scale(kl, w);
        let sum = tape.add(recon, wkl);
        let total = tape.scale(sum, 1.0 / tokens as f64);
        Ok(ElboTerms {
            total,
            recon_sum: tape.scalar(recon),
            kl_sum: tape.scalar(kl),
            tokens,
            pairs: b,
            anneal_weight: w,
        })
    }

    /// `(mu_p, sigma_p)` of one feature vector.
    pub fn prior(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let vv = self.features(&mut tape, &[v])?;
        let (m, s) = self.prior_on_tape(&mut tape, vv)?;
        Ok((tape.value(m).data().to_vec(), tape.value(s).data().to_vec()))
    }

    /// `(mu_q, sigma_q)` of one phrase and feature vector.
    pub fn posterior(&self, phrase: &[String], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let vv = self.features(&mut tape, &[v])?;
        let ids = vec![self.encode_phrase(phrase)];
        let (m, s) = self.posterior_on_tape(&mut tape, &ids, vv)?;
        Ok((tape.value(m).data().to_vec(), tape.value(s).data().to_vec()))
    }

    pub fn decode_init(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Domain(format!("latent has dimension {}", z.len())));
        }
        let mut tape = Tape::new(&self.params);
        let vv = self.features(&mut tape, &[v])?;
        let zz = tape.constant(Matrix::row_vector(z));
        let s = self.decode_init_on_tape(&mut tape, zz, vv)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Mean reconstruction NLL per token of one phrase decoded from `s`.
    pub fn reconstruction_loss(
        &self,
        s: &[f64],
        phrase: &[String],
        word_dropout: f64,
        rng: &mut RngState,
    ) -> Result<f64> {
        if phrase.is_empty() {
            return Err(Error::Domain("empty phrase".into()));
        }
        let mut tape = Tape::new(&self.params);
        let sv = tape.constant(Matrix::row_vector(s));
        let ids = vec![self.encode_phrase(phrase)];
        let (loss, n) = self.reconstruction_on_tape(&mut tape, sv, &ids, word_dropout, rng)?;
        Ok(tape.scalar(loss) / n as f64)
    }

    /// Phrase-guided representations, one per pair, computed from the
    /// posterior (or prior) mean without sampling.
    pub fn infer_reps(&self, pairs: &[PhraseRegionPair], mode: RepMode) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(256) {
            let mut tape = Tape::new(&self.params);
            let feats: Vec<&[f64]> = chunk.iter().map(|p| p.feat.as_slice()).collect();
            let v = self.features(&mut tape, &feats)?;
            let mu = match mode {
                RepMode::Posterior => {
                    let ids: Vec<Vec<usize>> = chunk.iter().map(|p| self.encode_phrase(&p.phrase)).collect();
                    self.posterior_on_tape(&mut tape, &ids, v)?.0
                }
                RepMode::Prior => self.prior_on_tape(&mut tape, v)?.0,
            };
            let s = self.decode_init_on_tape(&mut tape, mu, v)?;
            let sm = tape.value(s);
            out.extend((0..sm.rows()).map(|r| sm.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn infer_rep(&self, pair: &PhraseRegionPair) -> Result<Vec<f64>> {
        Ok(self.infer_reps(std::slice::from_ref(pair), RepMode::Posterior)?.remove(0))
    }

    /// Greedy free-running decode of `steps` tokens from each initial state.
    pub fn greedy_decode(&self, states: &[Vec<f64>], steps: usize) -> Result<Vec<Vec<usize>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let h_dim = self.cfg.hidden;
        let mut data = Vec::with_capacity(states.len() * h_dim);
        for s in states {
            data.extend_from_slice(s);
        }
        let mut tape = Tape::new(&self.params);
        let mut h = tape.constant(Matrix::from_vec(states.len(), h_dim, data)?);
        let mut prev = vec![BOS; states.len()];
        let mut out = vec![Vec::with_capacity(steps); states.len()];
        for _ in 0..steps {
            let x = self.layers.embed.forward(&mut tape, &prev)?;
            h = self.layers.dec_rnn.step(&mut tape, x, h)?;
            let logits = self.layers.out.forward(&mut tape, h)?;
            let lm = tape.value(logits);
            for (r, o) in out.iter_mut().enumerate() {
                let row = lm.row(r);
                let best = (0..row.len())
                    .fold(0, |b, j| if row[j] > row[b] { j } else { b });
                o.push(best);
                prev[r] = best;
            }
        }
        Ok(out)
    }

    /// Fraction of phrase tokens reproduced at the right position by greedy
    /// decoding from the posterior-mean representation.
    pub fn reconstruction_accuracy(&self, pairs: &[PhraseRegionPair]) -> Result<f64> {
        let reps = self.infer_reps(pairs, RepMode::Posterior)?;
        let (mut hit, mut total) = (0usize, 0usize);
        for (chunk, rchunk) in pairs.chunks(256).zip(reps.chunks(256)) {
            let steps = chunk.iter().map(|p| p.phrase.len()).max().unwrap_or(0);
            let decoded = self.greedy_decode(rchunk, steps)?;
            for (p, d) in chunk.iter().zip(decoded) {
                let gold = self.encode_phrase(&p.phrase);
                hit += gold.iter().zip(&d).filter(|(a, b)| a == b).count();
                total += gold.len();
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    fn meta(&self, seed: u64, step: u64) -> CheckpointMeta {
        CheckpointMeta {
            kind: "cvae".into(),
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
        if header.kind != "cvae" {
            return Err(Error::Config(format!("checkpoint holds a `{}` model", header.kind)));
        }
        let cfg: CvaeConfig = serde_json::from_value(header.config["model"].clone())?;
        let vocab: Vocab = serde_json::from_value(header.config["vocab"].clone())?;
        let mut model = Self::new(cfg, vocab, 0)?;
        checkpoint::copy_values(&mut model.params, &store)?;
        Ok(model)
    }
}

fn row_mask(active: impl Iterator<Item = bool>, width: usize) -> Matrix {
    let rows: Vec<f64> = active
        .flat_map(|a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, width))
        .collect();
    let n = rows.len() / width;
    Matrix::from_vec(n, width, rows).expect("mask shape")
}

#[derive(Clone, Debug)]
pub struct CvaeTrainResult {
    pub model: Cvae,
    pub log: Vec<EpochLog>,
    pub steps: u64,
}

/// Adam over shuffled minibatches of the pair set.
pub fn train_cvae(
    pairs: &[PhraseRegionPair],
    model_cfg: CvaeConfig,
    cfg: &CvaeTrainConfig,
) -> Result<CvaeTrainResult> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Domain("cannot train on an empty pair set".into()));
    }
    let root = RngState::new(cfg.seed);
    let mut model = Cvae::new(model_cfg, Cvae::vocab_for(pairs), cfg.seed)?;
    let mut order_rng = root.derive(1);
    let mut noise_rng = root.derive(2);
    let encoded: Vec<Vec<usize>> = pairs.iter().map(|p| model.encode_phrase(&p.phrase)).collect();
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let (mut recon, mut kl, mut tokens, mut npairs, mut w) = (0.0, 0.0, 0usize, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let phrases: Vec<Vec<usize>> = batch.iter().map(|&i| encoded[i].clone()).collect();
            let feats: Vec<&[f64]> = batch.iter().map(|&i| pairs[i].feat.as_slice()).collect();
            let grads = {
                let mut tape = Tape::new(&model.params);
                let terms =
                    model.elbo_on_tape(&mut tape, &phrases, &feats, step, cfg, &mut noise_rng)?;
                let loss = tape.scalar(terms.total);
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, msg: format!("cvae loss {loss}") });
                }
                recon += terms.recon_sum;
                kl += terms.kl_sum;
                tokens += terms.tokens;
                npairs += terms.pairs;
                w = terms.anneal_weight;
                tape.backward(terms.total)
            };
            model.params.zero_grad();
            grads.accumulate_into(&mut model.params);
            if let Some(c) = cfg.clip_grad_norm {
                model.params.clip_grad_norm(c);
            }
            adam.step(&mut model.params, cfg.learning_rate).map_err(|e| Error::Diverged {
                step,
                msg: e.to_string(),
            })?;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            recon: recon / tokens as f64,
            kl: kl / tokens as f64,
            kl_per_pair: kl / npairs as f64,
            anneal_weight: w,
        };
        log::debug!("cvae epoch {}: {:?}", entry.epoch, entry);
        log.push(entry);
    }
    Ok(CvaeTrainResult { model, log, steps: step })
}

/// Mean KL per pair between posterior and prior over a pair set.
pub fn mean_kl_per_pair(model: &Cvae, pairs: &[PhraseRegionPair]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(256) {
        let mut tape = Tape::new(&model.params);
        let feats: Vec<&[f64]> = chunk.iter().map(|p| p.feat.as_slice()).collect();
        let v = model.features(&mut tape, &feats)?;
        let ids: Vec<Vec<usize>> = chunk.iter().map(|p| model.encode_phrase(&p.phrase)).collect();
        let (mq, sq) = model.posterior_on_tape(&mut tape, &ids, v)?;
        let (mp, sp) = model.prior_on_tape(&mut tape, v)?;
        let kl = kl_on_tape(&mut tape, mq, sq, mp, sp);
        total += tape.scalar(kl);
    }
    Ok(total / pairs.len().max(1) as f64)
}
