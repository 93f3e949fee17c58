//! End-to-end experiment plumbing: corpus, phrase set, latent model,
//! index, translator systems and their evaluation.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::bleu::{bleu_with_ci, paired_bootstrap, BleuReport};
use crate::data::{
    build_vocab, detokenize, gen_synthetic, load_corpus, mask_visual_tokens, split_corpus, SentenceImagePair,
    SynthConfig, Vocab,
};
use crate::error::{Error, Result};
use crate::grounding::{build_phrase_image_set, GroundingPolicy, PatternChunker, PhraseProvider, PhraseRegionPair, RegionSpanProvider};
use crate::latent::{train_cvae, Cvae, CvaeConfig, CvaeTrainConfig, EpochLog};
use crate::retrieval::{build_index, sha256_hex, PhraseEncoder, RepKind, RetrievalIndex, SentenceRetriever, StaticEncoder, TableEncoder};
use crate::translator::{
    train_translator, BeamConfig, Example, ForwardOpts, FusionInput, NmtEpochLog, NmtTrainConfig, Translator,
    TranslatorConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseSource {
    /// Rule-based `DET? ADJ* NOUN+` chunking with the synthetic lexicon.
    #[default]
    Chunker,
    /// The region annotation spans of each sentence.
    Regions,
}

impl std::str::FromStr for PhraseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunker" => Ok(Self::Chunker),
            "regions" => Ok(Self::Regions),
            other => Err(Error::Config(format!("unknown phrase source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// External corpus JSONL; replaces the synthetic generator.
    pub corpus: Option<PathBuf>,
    /// External token embedding table for the phrase encoder.
    pub embeddings: Option<PathBuf>,
    pub train_frac: f64,
    pub valid_frac: f64,
    pub phrase_source: PhraseSource,
    pub grounding: GroundingPolicy,
    /// `feat_dim` is taken from the data.
    pub cvae_model: CvaeConfig,
    pub cvae: CvaeTrainConfig,
    /// `rep_dim` is taken from the representation kind.
    pub translator: TranslatorConfig,
    pub nmt: NmtTrainConfig,
    pub encoder_dim: usize,
    pub encoder_seed: u64,
    pub k: usize,
    pub beam: usize,
    pub exclude_self: bool,
    pub seeds: Vec<u64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let feat = synth.feature_dim();
        Self {
            synth,
            corpus: None,
            embeddings: None,
            train_frac: 0.8,
            valid_frac: 0.1,
            phrase_source: PhraseSource::Chunker,
            grounding: GroundingPolicy::Skip,
            cvae_model: CvaeConfig::desk(feat),
            cvae: CvaeTrainConfig::default(),
            translator: TranslatorConfig::desk(64),
            nmt: NmtTrainConfig::default(),
            encoder_dim: 64,
            encoder_seed: 0,
            k: 5,
            beam: 4,
            exclude_self: false,
            seeds: vec![0, 1, 2],
            bootstrap_resamples: 1000,
            bootstrap_seed: 12345,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.train_frac > 0.0 && self.valid_frac >= 0.0 && self.train_frac + self.valid_frac < 1.0) {
            return Err(Error::Config("split fractions must leave a non-empty test split".into()));
        }
        for p in [&self.corpus, &self.embeddings].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        self.synth.validate()?;
        self.cvae.validate()?;
        self.nmt.validate()?;
        Ok(())
    }

    pub fn provider(&self) -> Box<dyn PhraseProvider> {
        match self.phrase_source {
            PhraseSource::Chunker => Box::new(PatternChunker::synthetic()),
            PhraseSource::Regions => Box::new(RegionSpanProvider),
        }
    }

    pub fn corpus_for_seed(&self, seed: u64) -> Result<Vec<SentenceImagePair>> {
        match &self.corpus {
            Some(p) => load_corpus(p),
            None => Ok(gen_synthetic(&SynthConfig { seed, ..self.synth.clone() })?.pairs),
        }
    }
}

/// Everything upstream of the translator for one seed.
pub struct Prepared {
    pub seed: u64,
    pub train: Vec<SentenceImagePair>,
    pub valid: Vec<SentenceImagePair>,
    pub test: Vec<SentenceImagePair>,
    pub pairs: Vec<PhraseRegionPair>,
    pub cvae: Cvae,
    pub cvae_log: Vec<EpochLog>,
    pub encoder: Box<dyn PhraseEncoder>,
    pub index: RetrievalIndex,
}

/// The table encoder when embeddings are configured, else a static
/// encoder over the phrase tokens of `pairs`.
pub fn make_encoder(cfg: &ExperimentConfig, pairs: &[PhraseRegionPair]) -> Result<Box<dyn PhraseEncoder>> {
    Ok(match &cfg.embeddings {
        Some(p) => Box::new(TableEncoder::load(p)?),
        None => {
            let tokens: Vec<String> = pairs.iter().flat_map(|p| p.phrase.iter().cloned()).collect();
            Box::new(StaticEncoder::new(&tokens, cfg.encoder_dim, cfg.encoder_seed)?)
        }
    })
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    cfg.validate()?;
    let corpus = cfg.corpus_for_seed(seed)?;
    let (train, valid, test) = split_corpus(&corpus, cfg.train_frac, cfg.valid_frac);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("corpus too small for the requested split".into()));
    }
    let chunker = PatternChunker::synthetic();
    let provider = cfg.provider();
    let (pairs, stats) = build_phrase_image_set(&train, provider.as_ref(), &chunker, cfg.grounding)?;
    log::info!("seed {seed}: {} grounded phrases, {} skipped", stats.grounded, stats.skipped);
    let feat_dim = pairs
        .first()
        .map(|p| p.feat.len())
        .ok_or_else(|| Error::Grounding("no grounded phrases in the training split".into()))?;
    let model_cfg = CvaeConfig { feat_dim, ..cfg.cvae_model.clone() };
    let trained = train_cvae(&pairs, model_cfg, &CvaeTrainConfig { seed, ..cfg.cvae.clone() })?;
    let encoder = make_encoder(cfg, &pairs)?;
    let ckpt = sha256_hex(&trained.model.to_bytes(seed, trained.steps)?);
    let index = build_index(&pairs, encoder.as_ref(), &trained.model, &ckpt)?;
    Ok(Prepared { seed, train, valid, test, pairs, cvae: trained.model, cvae_log: trained.log, encoder, index })
}

/// One translator configuration to train or evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SystemSpec {
    pub text_only: bool,
    pub masked: bool,
    pub kind: RepKind,
    pub k: usize,
}

impl SystemSpec {
    pub fn baseline(masked: bool) -> Self {
        Self { text_only: true, masked, kind: RepKind::Guided, k: 1 }
    }

    pub fn full(masked: bool, kind: RepKind, k: usize) -> Self {
        Self { text_only: false, masked, kind, k }
    }

    pub fn name(&self) -> String {
        if self.text_only {
            "transformer".into()
        } else {
            format!("ours-{}", self.kind)
        }
    }

    pub fn opts(&self) -> ForwardOpts {
        ForwardOpts { text_only: self.text_only, ..ForwardOpts::eval() }
    }
}

impl Prepared {
    pub fn rep_dim(&self, kind: RepKind) -> usize {
        self.index.vector_dim(kind)
    }

    pub fn fusion_inputs(&self, cfg: &ExperimentConfig, corpus: &[SentenceImagePair], spec: &SystemSpec) -> Result<Vec<FusionInput>> {
        if spec.text_only {
            return Ok(vec![FusionInput::empty(); corpus.len()]);
        }
        let provider = cfg.provider();
        let r = SentenceRetriever {
            index: &self.index,
            encoder: self.encoder.as_ref(),
            provider: provider.as_ref(),
            k: spec.k,
            kind: spec.kind,
            exclude_self: cfg.exclude_self,
        };
        r.fusion_inputs(corpus)
    }

    /// Shared source/target vocabulary of the training split.
    pub fn vocab(&self) -> Vocab {
        build_vocab(&self.train, 1)
    }

    pub fn examples(
        &self,
        cfg: &ExperimentConfig,
        model: &Translator,
        corpus: &[SentenceImagePair],
        spec: &SystemSpec,
    ) -> Result<Vec<Example>> {
        let fusions = self.fusion_inputs(cfg, corpus, spec)?;
        corpus
            .iter()
            .zip(fusions)
            .map(|(p, f)| {
                let src = if spec.masked { mask_visual_tokens(p).src } else { p.src.clone() };
                model.example(&src, &p.tgt, f)
            })
            .collect()
    }
}

pub struct TrainedSystem {
    pub spec: SystemSpec,
    pub model: Translator,
    pub log: Vec<NmtEpochLog>,
    pub steps: u64,
}

pub fn train_system(cfg: &ExperimentConfig, prep: &Prepared, spec: SystemSpec) -> Result<TrainedSystem> {
    let model_cfg = TranslatorConfig { rep_dim: prep.rep_dim(spec.kind), ..cfg.translator.clone() };
    let template = Translator::new(model_cfg.clone(), prep.vocab(), prep.seed)?;
    let train = prep.examples(cfg, &template, &prep.train, &spec)?;
    let valid = prep.examples(cfg, &template, &prep.valid, &spec)?;
    let nmt = NmtTrainConfig { seed: prep.seed, text_only: spec.text_only, ..cfg.nmt.clone() };
    let res = train_translator(model_cfg, template.vocab.clone(), &train, &valid, &nmt)?;
    Ok(TrainedSystem { spec, model: res.model, log: res.log, steps: res.steps })
}

pub struct Evaluation {
    pub hyps: Vec<String>,
    pub refs: Vec<String>,
    pub report: BleuReport,
    pub truncated: usize,
}

/// Beam-decodes `corpus` with retrieval at `spec.k` / `spec.kind` and
/// scores it against the references.
pub fn evaluate_system(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &Translator,
    corpus: &[SentenceImagePair],
    spec: &SystemSpec,
) -> Result<Evaluation> {
    let examples = prep.examples(cfg, model, corpus, spec)?;
    let beam = BeamConfig { beam: cfg.beam, max_len: None };
    let mut hyps = Vec::with_capacity(examples.len());
    let mut truncated = 0;
    for ex in &examples {
        let h = model.translate(&ex.src, &ex.fusion, spec.opts(), beam)?;
        truncated += usize::from(h.truncated());
        hyps.push(detokenize(&model.vocab.decode(h.output())));
    }
    let refs: Vec<String> = corpus.iter().map(|p| detokenize(&p.tgt)).collect();
    let report = bleu_with_ci(&hyps, &refs, cfg.bootstrap_resamples, cfg.bootstrap_seed)?;
    Ok(Evaluation { hyps, refs, report, truncated })
}

/// One seed's prepared components with lazily trained systems.
pub struct Session<'c> {
    pub cfg: &'c ExperimentConfig,
    pub prep: Prepared,
    systems: HashMap<SystemSpec, TrainedSystem>,
}

impl<'c> Session<'c> {
    pub fn new(cfg: &'c ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self { cfg, prep: prepare(cfg, seed)?, systems: HashMap::new() })
    }

    pub fn system(&mut self, spec: SystemSpec) -> Result<&TrainedSystem> {
        if !self.systems.contains_key(&spec) {
            let sys = train_system(self.cfg, &self.prep, spec)?;
            self.systems.insert(spec, sys);
        }
        Ok(&self.systems[&spec])
    }

    /// Evaluates the system trained as `train` on the test split, with
    /// retrieval settings taken from `eval`.
    pub fn evaluate(&mut self, train: SystemSpec, eval: SystemSpec) -> Result<Evaluation> {
        self.system(train)?;
        let model = &self.systems[&train].model;
        evaluate_system(self.cfg, &self.prep, model, &self.prep.test, &eval)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub seed: u64,
    pub setting: String,
    pub model: String,
    pub bleu: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Paired bootstrap p-value of this model against the baseline.
    pub p_value: Option<f64>,
    pub masked_fraction: f64,
}

/// Baseline and full system under source masking, optionally followed by
/// the unmasked control.
pub fn degradation_for_seed(session: &mut Session, control: bool) -> Result<Vec<DegradationRow>> {
    let cfg = session.cfg;
    let masked_fraction = crate::data::masked_fraction(&session.prep.test);
    let mut rows = Vec::new();
    let settings: &[bool] = if control { &[true, false] } else { &[true] };
    for &masked in settings {
        let base = SystemSpec::baseline(masked);
        let full = SystemSpec::full(masked, RepKind::Guided, cfg.k);
        let eb = session.evaluate(base, base)?;
        let ef = session.evaluate(full, full)?;
        let p = paired_bootstrap(&eb.hyps, &ef.hyps, &ef.refs, cfg.bootstrap_resamples.max(1), cfg.bootstrap_seed)?;
        for (spec, ev, p_value) in [(base, &eb, None), (full, &ef, Some(p.p_value))] {
            let (lo, hi) = ev.report.ci.unwrap_or((ev.report.score, ev.report.score));
            rows.push(DegradationRow {
                seed: session.prep.seed,
                setting: if masked { "masked" } else { "unmasked" }.into(),
                model: spec.name(),
                bleu: ev.report.score,
                ci_low: lo,
                ci_high: hi,
                p_value,
                masked_fraction: if masked { masked_fraction } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub seed: u64,
    pub k: usize,
    pub kind: RepKind,
    pub bleu: f64,
}

/// Masked-source BLEU for raw-feature and phrase-guided retrieval at each
/// `K`. Without `retrain`, one model per kind is trained at the configured
/// `K` and evaluated at every `K`.
pub fn k_sweep_for_seed(session: &mut Session, ks: &[usize], retrain: bool) -> Result<Vec<KSweepRow>> {
    let mut rows = Vec::with_capacity(ks.len() * 2);
    for &kind in &[RepKind::Raw, RepKind::Guided] {
        for &k in ks {
            let train = SystemSpec::full(true, kind, if retrain { k } else { session.cfg.k });
            let ev = session.evaluate(train, SystemSpec::full(true, kind, k))?;
            rows.push(KSweepRow { seed: session.prep.seed, k, kind, bleu: ev.report.score });
        }
    }
    Ok(rows)
}
