//! Phrase encoders, the exact cosine top-K index over the phrase-level
//! image set, universal representations and average relevance scores.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use prmt_neural::tensor::dot;
use prmt_neural::RngState;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_jsonl, UNK, RESERVED};
use crate::error::{Error, Result};
use crate::data::SentenceImagePair;
use crate::grounding::{sentence_phrases, PhraseProvider, PhraseRegionPair};
use crate::translator::FusionInput;
use crate::latent::{Cvae, RepMode};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// How to rebuild an encoder; stored in index headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Static { dim: usize, seed: u64, tokens: Vec<String> },
    Table { path: String },
}

pub trait PhraseEncoder {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn spec(&self) -> EncoderSpec;
    /// Vector of one token; unknown tokens get the UNK vector.
    fn token_vector(&self, token: &str) -> &[f64];

    /// Mean of the token vectors of a non-empty phrase.
    fn encode(&self, phrase: &[String]) -> Result<Vec<f64>> {
        if phrase.is_empty() {
            return Err(Error::Domain("cannot encode an empty phrase".into()));
        }
        let mut acc = vec![0.0; self.dim()];
        for t in phrase {
            for (a, x) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += x;
            }
        }
        let n = phrase.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

/// Frozen random embeddings over an explicit token list. Each token's
/// vector is drawn from a stream seeded by the encoder seed and a hash of
/// the token, so it does not depend on list order.
#[derive(Clone, Debug)]
pub struct StaticEncoder {
    dim: usize,
    seed: u64,
    tokens: Vec<String>,
    table: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl StaticEncoder {
    pub fn new(tokens: &[String], dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".into()));
        }
        let draw = |tok: &str| {
            let h = Sha256::digest(tok.as_bytes());
            let mut rng = RngState::new(seed ^ u64::from_le_bytes(h[..8].try_into().expect("8 bytes")));
            (0..dim).map(|_| rng.normal()).collect::<Vec<f64>>()
        };
        let mut tokens: Vec<String> = tokens.to_vec();
        tokens.sort();
        tokens.dedup();
        let table = tokens.iter().map(|t| (t.clone(), draw(t))).collect();
        Ok(Self { dim, seed, unk: draw(RESERVED[UNK]), tokens, table })
    }
}

impl PhraseEncoder for StaticEncoder {
    fn id(&self) -> String {
        let digest = sha256_hex(self.tokens.join("\n").as_bytes());
        format!("static-d{}-s{}-{}", self.dim, self.seed, &digest[..16])
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> EncoderSpec {
        EncoderSpec::Static { dim: self.dim, seed: self.seed, tokens: self.tokens.clone() }
    }

    fn token_vector(&self, token: &str) -> &[f64] {
        self.table.get(token).unwrap_or(&self.unk)
    }
}

#[derive(Deserialize)]
struct TableRow {
    token: String,
    vec: Vec<f64>,
}

/// Precomputed token vectors read from JSONL `{"token", "vec"}` rows. The
/// table must contain a `<unk>` row.
#[derive(Clone, Debug)]
pub struct TableEncoder {
    path: String,
    digest: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    unk: Vec<f64>,
}

impl TableEncoder {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let digest = sha256_hex(&std::fs::read(path)?);
        let rows: Vec<TableRow> = read_jsonl(path)?;
        let dim = rows.first().map(|r| r.vec.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Config(format!("embedding table {} is empty", path.display())));
        }
        let mut table = HashMap::new();
        for r in rows {
            if r.vec.len() != dim {
                return Err(Error::Config(format!("token `{}` has dimension {}", r.token, r.vec.len())));
            }
            table.insert(r.token, r.vec);
        }
        let unk = table
            .get(RESERVED[UNK])
            .cloned()
            .ok_or_else(|| Error::Config("embedding table lacks a `<unk>` row".into()))?;
        Ok(Self { path: path.display().to_string(), digest, dim, table, unk })
    }
}

impl PhraseEncoder for TableEncoder {
    fn id(&self) -> String {
        format!("table-d{}-{}", self.dim, &self.digest[..16])
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> EncoderSpec {
        EncoderSpec::Table { path: self.path.clone() }
    }

    fn token_vector(&self, token: &str) -> &[f64] {
        self.table.get(token).unwrap_or(&self.unk)
    }
}

pub fn encoder_from_spec(spec: &EncoderSpec) -> Result<Box<dyn PhraseEncoder>> {
    Ok(match spec {
        EncoderSpec::Static { dim, seed, tokens } => Box::new(StaticEncoder::new(tokens, *dim, *seed)?),
        EncoderSpec::Table { path } => Box::new(TableEncoder::load(path)?),
    })
}

fn sq_norm(v: &[f64]) -> f64 {
    dot(v, v)
}

/// `a.b / sqrt(|a|^2 |b|^2)`; exact for `b = ±a` since `sqrt(x*x) = |x|`.
fn cosine(ab: f64, aa: f64, bb: f64) -> f64 {
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Cosine similarity; zero vectors are a domain error.
pub fn relevance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!("embedding dims {} and {}", a.len(), b.len())));
    }
    let (aa, bb) = (sq_norm(a), sq_norm(b));
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Domain("zero-norm phrase embedding".into()));
    }
    Ok(cosine(dot(a, b), aa, bb))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f64,
}

/// Descending score, then ascending entry index.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    /// Set when fewer than the requested `K` entries were available.
    pub short: bool,
}

/// Which cached vector a retrieved entry contributes to `u`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepKind {
    #[default]
    Guided,
    Raw,
}

impl std::str::FromStr for RepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Self::Guided),
            "raw" => Ok(Self::Raw),
            other => Err(Error::Config(format!("unknown representation kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for RepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Guided => "guided",
            Self::Raw => "raw",
        })
    }
}

pub const INDEX_FORMAT_VERSION: u32 = 1;
const INDEX_MAGIC: &[u8; 4] = b"PRIX";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    count: usize,
    emb_dim: usize,
    rep_dim: usize,
    feat_dim: usize,
    encoder_id: String,
    encoder: EncoderSpec,
    checkpoint_id: String,
}

/// Immutable store of phrase embeddings and cached representations.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub encoder_id: String,
    pub encoder_spec: EncoderSpec,
    pub checkpoint_id: String,
    entries: Vec<PhraseRegionPair>,
    emb_dim: usize,
    rep_dim: usize,
    embeddings: Vec<f64>,
    /// Squared embedding norms.
    norms: Vec<f64>,
    reps: Vec<f64>,
}

impl RetrievalIndex {
    pub fn from_parts(
        entries: Vec<PhraseRegionPair>,
        embeddings: Vec<Vec<f64>>,
        reps: Vec<Vec<f64>>,
        encoder: &dyn PhraseEncoder,
        checkpoint_id: impl Into<String>,
    ) -> Result<Self> {
        Self::assemble(entries, embeddings, reps, encoder.id(), encoder.spec(), checkpoint_id.into())
    }

    fn assemble(
        entries: Vec<PhraseRegionPair>,
        embeddings: Vec<Vec<f64>>,
        reps: Vec<Vec<f64>>,
        encoder_id: String,
        encoder_spec: EncoderSpec,
        checkpoint_id: String,
    ) -> Result<Self> {
        if entries.len() != embeddings.len() || entries.len() != reps.len() {
            return Err(Error::Index("entry, embedding and rep counts differ".into()));
        }
        let emb_dim = embeddings.first().map_or(0, Vec::len);
        let rep_dim = reps.first().map_or(0, Vec::len);
        let feat_dim = entries.first().map_or(0, |e| e.feat.len());
        let mut flat_e = Vec::with_capacity(entries.len() * emb_dim);
        let mut flat_r = Vec::with_capacity(entries.len() * rep_dim);
        let mut norms = Vec::with_capacity(entries.len());
        for ((e, r), p) in embeddings.iter().zip(&reps).zip(&entries) {
            if e.len() != emb_dim || r.len() != rep_dim || p.feat.len() != feat_dim {
                return Err(Error::Index("inconsistent vector dimensions".into()));
            }
            let n = sq_norm(e);
            if n == 0.0 || !n.is_finite() || r.iter().any(|x| !x.is_finite()) {
                return Err(Error::Index(format!(
                    "entry `{}` has a zero or non-finite vector",
                    p.phrase.join(" ")
                )));
            }
            norms.push(n);
            flat_e.extend_from_slice(e);
            flat_r.extend_from_slice(r);
        }
        Ok(Self {
            encoder_id,
            encoder_spec,
            checkpoint_id,
            entries,
            emb_dim,
            rep_dim,
            embeddings: flat_e,
            norms,
            reps: flat_r,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn emb_dim(&self) -> usize {
        self.emb_dim
    }

    pub fn rep_dim(&self) -> usize {
        self.rep_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.feat.len())
    }

    pub fn entries(&self) -> &[PhraseRegionPair] {
        &self.entries
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.emb_dim..(i + 1) * self.emb_dim]
    }

    pub fn rep(&self, i: usize) -> &[f64] {
        &self.reps[i * self.rep_dim..(i + 1) * self.rep_dim]
    }

    pub fn vector(&self, i: usize, kind: RepKind) -> &[f64] {
        match kind {
            RepKind::Guided => self.rep(i),
            RepKind::Raw => &self.entries[i].feat,
        }
    }

    pub fn vector_dim(&self, kind: RepKind) -> usize {
        match kind {
            RepKind::Guided => self.rep_dim,
            RepKind::Raw => self.feat_dim(),
        }
    }

    /// Exact top-`k` by cosine over every entry, optionally skipping
    /// entries whose source id equals `exclude_source`.
    pub fn topk(&self, query: &[f64], k: usize, exclude_source: Option<&str>) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::Index("query against an empty index".into()));
        }
        if query.len() != self.emb_dim {
            return Err(Error::Domain(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.emb_dim
            )));
        }
        let qn = sq_norm(query);
        if qn == 0.0 {
            return Err(Error::Domain("zero-norm query embedding".into()));
        }
        let mut hits: Vec<Hit> = (0..self.len())
            .filter(|&i| exclude_source.is_none_or(|s| self.entries[i].source_id != s))
            .map(|i| Hit {
                index: i,
                score: cosine(dot(query, self.embedding(i)), qn, self.norms[i]),
            })
            .collect();
        let short = k > hits.len();
        if short {
            log::warn!("K = {k} exceeds the {} available entries", hits.len());
        } else if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_unstable_by(hit_order);
        Ok(RetrievalResult { hits, short })
    }

    pub fn query(
        &self,
        encoder: &dyn PhraseEncoder,
        phrase: &[String],
        k: usize,
        exclude_source: Option<&str>,
    ) -> Result<RetrievalResult> {
        self.topk(&encoder.encode(phrase)?, k, exclude_source)
    }

    /// `u = (1/n) sum_k RS_k * vec_k` over the `n` retrieved entries.
    pub fn universal_rep(&self, result: &RetrievalResult, kind: RepKind) -> Vec<f64> {
        let mut u = vec![0.0; self.vector_dim(kind)];
        for h in &result.hits {
            for (a, x) in u.iter_mut().zip(self.vector(h.index, kind)) {
                *a += h.score * x;
            }
        }
        let n = result.hits.len().max(1) as f64;
        u.iter_mut().for_each(|a| *a /= n);
        u
    }

    /// Checks that `encoder` is the one the index was built with.
    pub fn check_encoder(&self, encoder: &dyn PhraseEncoder) -> Result<()> {
        if encoder.id() != self.encoder_id {
            return Err(Error::Index(format!(
                "index was built with encoder `{}`, got `{}`",
                self.encoder_id,
                encoder.id()
            )));
        }
        Ok(())
    }

    pub fn encoder(&self) -> Result<Box<dyn PhraseEncoder>> {
        let enc = encoder_from_spec(&self.encoder_spec)?;
        self.check_encoder(enc.as_ref())?;
        Ok(enc)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            format_version: INDEX_FORMAT_VERSION,
            count: self.len(),
            emb_dim: self.emb_dim,
            rep_dim: self.rep_dim,
            feat_dim: self.feat_dim(),
            encoder_id: self.encoder_id.clone(),
            encoder: self.encoder_spec.clone(),
            checkpoint_id: self.checkpoint_id.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in self.embeddings.iter().chain(&self.reps) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Index(format!("malformed index file: {m}"));
        if bytes.len() < 16 || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != INDEX_FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header: IndexHeader =
            serde_json::from_slice(bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let n_floats = header.count * (header.emb_dim + header.rep_dim);
        let start = 16 + hlen;
        let raw = bytes
            .get(start..start + n_floats * 8)
            .ok_or_else(|| bad("truncated arrays"))?;
        let floats: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (emb, reps) = floats.split_at(header.count * header.emb_dim);
        let meta = std::str::from_utf8(&bytes[start + n_floats * 8..]).map_err(|_| bad("metadata is not utf-8"))?;
        let entries: Vec<PhraseRegionPair> = meta
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if entries.len() != header.count {
            return Err(bad("entry count mismatch"));
        }
        let split = |flat: &[f64], d: usize| -> Vec<Vec<f64>> {
            if d == 0 {
                vec![Vec::new(); header.count]
            } else {
                flat.chunks(d).map(<[f64]>::to_vec).collect()
            }
        };
        Self::assemble(
            entries,
            split(emb, header.emb_dim),
            split(reps, header.rep_dim),
            header.encoder_id,
            header.encoder,
            header.checkpoint_id,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Encodes every pair's phrase and caches its phrase-guided representation.
pub fn build_index(
    pairs: &[PhraseRegionPair],
    encoder: &dyn PhraseEncoder,
    model: &Cvae,
    checkpoint_id: &str,
) -> Result<RetrievalIndex> {
    if let Some(p) = pairs.iter().find(|p| p.feat.len() != model.cfg.feat_dim) {
        return Err(Error::Index(format!(
            "pair `{}` has feature dimension {}, checkpoint expects {}",
            p.phrase.join(" "),
            p.feat.len(),
            model.cfg.feat_dim
        )));
    }
    let embeddings = pairs
        .iter()
        .map(|p| encoder.encode(&p.phrase))
        .collect::<Result<Vec<_>>>()?;
    let reps = model.infer_reps(pairs, RepMode::Posterior)?;
    RetrievalIndex::from_parts(pairs.to_vec(), embeddings, reps, encoder, checkpoint_id)
}

/// Mean over queries of the score of the `k`-th (1-based) retrieved entry.
pub fn ars(queries: &[Vec<f64>], index: &RetrievalIndex, k: usize) -> Result<f64> {
    Ok(ars_curve(queries, index, k)?[k - 1])
}

/// `ARS(1..=k_max)` in one pass.
pub fn ars_curve(queries: &[Vec<f64>], index: &RetrievalIndex, k_max: usize) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::Domain("ARS needs at least one query phrase".into()));
    }
    if k_max == 0 || k_max > index.len() {
        return Err(Error::Domain(format!("k = {k_max} outside 1..={}", index.len())));
    }
    let mut acc = vec![0.0; k_max];
    for q in queries {
        let r = index.topk(q, k_max, None)?;
        for (a, h) in acc.iter_mut().zip(&r.hits) {
            *a += h.score;
        }
    }
    let n = queries.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Turns sentences into fusion inputs: one universal representation per
/// phrase span proposed by `provider`.
pub struct SentenceRetriever<'a> {
    pub index: &'a RetrievalIndex,
    pub encoder: &'a dyn PhraseEncoder,
    pub provider: &'a dyn PhraseProvider,
    pub k: usize,
    pub kind: RepKind,
    /// Skip entries that came from the query sentence itself.
    pub exclude_self: bool,
}

impl SentenceRetriever<'_> {
    pub fn phrase_rep(&self, phrase: &[String], source_id: Option<&str>) -> Result<Vec<f64>> {
        let exclude = if self.exclude_self { source_id } else { None };
        let r = self.index.query(self.encoder, phrase, self.k, exclude)?;
        Ok(self.index.universal_rep(&r, self.kind))
    }

    /// Phrases are read from `pair` as given; pass the unmasked sentence.
    pub fn fusion_input(&self, pair: &SentenceImagePair) -> Result<FusionInput> {
        let mut out = FusionInput::empty();
        for (span, phrase) in sentence_phrases(pair, self.provider) {
            out.reps.push(self.phrase_rep(&phrase, Some(&pair.id))?);
            out.spans.push(span);
        }
        Ok(out)
    }

    pub fn fusion_inputs(&self, corpus: &[SentenceImagePair]) -> Result<Vec<FusionInput>> {
        let mut cache: HashMap<Vec<String>, Vec<f64>> = HashMap::new();
        let mut all = Vec::with_capacity(corpus.len());
        for pair in corpus {
            if self.exclude_self {
                all.push(self.fusion_input(pair)?);
                continue;
            }
            let mut out = FusionInput::empty();
            for (span, phrase) in sentence_phrases(pair, self.provider) {
                let rep = match cache.get(&phrase) {
                    Some(r) => r.clone(),
                    None => {
                        let r = self.phrase_rep(&phrase, None)?;
                        cache.insert(phrase, r.clone());
                        r
                    }
                };
                out.spans.push(span);
                out.reps.push(rep);
            }
            all.push(out);
        }
        Ok(all)
    }
}
