//! Noun-phrase chunking, grounding against region annotations and the
//! phrase-level image set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::synth::{DETS, HEADS, MODIFIERS, PREPS, VERBS};
use crate::data::SentenceImagePair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Punct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhraseSpan {
    pub start: usize,
    pub len: usize,
}

impl PhraseSpan {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Closed word-class lexicon; unknown words have no class.
#[derive(Clone, Debug, Default)]
pub struct PosLexicon {
    tags: HashMap<String, Pos>,
}

impl PosLexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Lexicon of the synthetic world's source side.
    pub fn synthetic() -> Self {
        let mut lex = Self::new();
        let classes: [(&[(&str, &str)], Pos); 5] = [
            (&DETS, Pos::Det),
            (&MODIFIERS, Pos::Adj),
            (&HEADS, Pos::Noun),
            (&VERBS, Pos::Verb),
            (&PREPS, Pos::Prep),
        ];
        for (words, pos) in classes {
            for (w, _) in words {
                lex.insert(w, pos);
            }
        }
        lex.insert(".", Pos::Punct);
        lex
    }

    pub fn insert(&mut self, word: &str, pos: Pos) {
        self.tags.insert(word.to_string(), pos);
    }

    pub fn tag(&self, word: &str) -> Option<Pos> {
        self.tags.get(word).copied()
    }
}

/// Anything that proposes phrase spans for a sentence.
pub trait PhraseProvider {
    fn spans(&self, pair: &SentenceImagePair) -> Vec<PhraseSpan>;
}

/// Greedy left-to-right matcher for `DET? ADJ* NOUN+`.
#[derive(Clone, Debug)]
pub struct PatternChunker {
    pub lexicon: PosLexicon,
}

impl PatternChunker {
    pub fn new(lexicon: PosLexicon) -> Self {
        Self { lexicon }
    }

    pub fn synthetic() -> Self {
        Self::new(PosLexicon::synthetic())
    }

    fn is(&self, tok: &str, pos: Pos) -> bool {
        self.lexicon.tag(tok) == Some(pos)
    }

    /// Length of the longest match starting at `i`, if any.
    fn match_at(&self, tokens: &[String], i: usize) -> Option<usize> {
        let mut j = i;
        if j < tokens.len() && self.is(&tokens[j], Pos::Det) {
            j += 1;
        }
        while j < tokens.len() && self.is(&tokens[j], Pos::Adj) {
            j += 1;
        }
        let nouns_from = j;
        while j < tokens.len() && self.is(&tokens[j], Pos::Noun) {
            j += 1;
        }
        (j > nouns_from).then_some(j - i)
    }

    pub fn chunk(&self, tokens: &[String]) -> Vec<PhraseSpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            match self.match_at(tokens, i) {
                Some(len) => {
                    spans.push(PhraseSpan::new(i, len));
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }

    pub fn head_of(&self, phrase: &[String]) -> Result<String> {
        phrase
            .iter()
            .rev()
            .find(|t| self.is(t, Pos::Noun))
            .cloned()
            .ok_or_else(|| Error::Domain(format!("no noun in phrase `{}`", phrase.join(" "))))
    }
}

impl PhraseProvider for PatternChunker {
    fn spans(&self, pair: &SentenceImagePair) -> Vec<PhraseSpan> {
        self.chunk(&pair.src)
    }
}

/// Treats the precomputed region spans as the sentence's phrases.
#[derive(Clone, Copy, Debug, Default)]
pub struct RegionSpanProvider;

impl PhraseProvider for RegionSpanProvider {
    fn spans(&self, pair: &SentenceImagePair) -> Vec<PhraseSpan> {
        let mut spans: Vec<PhraseSpan> = pair
            .regions
            .iter()
            .map(|r| PhraseSpan::new(r.start, r.len))
            .collect();
        spans.sort();
        spans.dedup();
        spans
    }
}

/// Non-overlapping `DET? ADJ* NOUN+` spans of `tokens`, left to right.
pub fn chunk_noun_phrases(chunker: &PatternChunker, tokens: &[String]) -> Vec<PhraseSpan> {
    chunker.chunk(tokens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseRegionPair {
    pub phrase: Vec<String>,
    pub head: String,
    pub feat: Vec<f64>,
    pub source_id: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundingPolicy {
    #[default]
    Skip,
    Fail,
}

impl std::str::FromStr for GroundingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(Self::Skip),
            "fail" => Ok(Self::Fail),
            other => Err(Error::Config(format!("unknown grounding policy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingStats {
    pub phrases: usize,
    pub grounded: usize,
    pub skipped: usize,
}

/// Builds the phrase-level image set: one pair per phrase whose span
/// exactly matches a region annotation, in corpus order.
pub fn build_phrase_image_set(
    corpus: &[SentenceImagePair],
    provider: &dyn PhraseProvider,
    chunker: &PatternChunker,
    policy: GroundingPolicy,
) -> Result<(Vec<PhraseRegionPair>, GroundingStats)> {
    let mut out = Vec::new();
    let mut stats = GroundingStats::default();
    for pair in corpus {
        for span in provider.spans(pair) {
            stats.phrases += 1;
            let region = pair
                .regions
                .iter()
                .find(|r| r.start == span.start && r.len == span.len);
            let Some(region) = region else {
                if policy == GroundingPolicy::Fail {
                    return Err(Error::Grounding(format!(
                        "phrase at ({}, {}) in `{}` has no matching region",
                        span.start, span.len, pair.id
                    )));
                }
                stats.skipped += 1;
                continue;
            };
            let phrase = pair.src[span.start..span.end()].to_vec();
            let head = chunker
                .head_of(&phrase)
                .unwrap_or_else(|_| phrase.last().cloned().unwrap_or_default());
            out.push(PhraseRegionPair {
                phrase,
                head,
                feat: region.feat.clone(),
                source_id: pair.id.clone(),
            });
            stats.grounded += 1;
        }
    }
    Ok((out, stats))
}

/// Phrase spans of one sentence paired with their tokens, the retrieval
/// queries of that sentence.
pub fn sentence_phrases(
    pair: &SentenceImagePair,
    provider: &dyn PhraseProvider,
) -> Vec<(PhraseSpan, Vec<String>)> {
    provider
        .spans(pair)
        .into_iter()
        .map(|s| (s, pair.src[s.start..s.end()].to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, tokenize, RegionAnnotation, SynthConfig};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn chunk_examples() {
        let c = PatternChunker::synthetic();
        assert_eq!(c.chunk(&toks("a black car")), [PhraseSpan::new(0, 3)]);
        assert!(c.chunk(&toks("stands near runs with")).is_empty());
        let s = toks("a person stands near a black car");
        let spans = c.chunk(&s);
        assert_eq!(spans, [PhraseSpan::new(0, 2), PhraseSpan::new(4, 3)]);
        let heads: Vec<String> = spans
            .iter()
            .map(|sp| c.head_of(&s[sp.start..sp.end()]).unwrap())
            .collect();
        assert_eq!(heads, ["person", "car"]);
    }

    #[test]
    fn chunk_handles_dangling_determiners_and_noun_runs() {
        let mut lex = PosLexicon::synthetic();
        lex.insert("dogs", Pos::Noun);
        let c = PatternChunker::new(lex);
        assert_eq!(
            c.chunk(&toks("the red runs dogs car")),
            [PhraseSpan::new(3, 2)]
        );
        assert_eq!(c.head_of(&toks("dogs")).unwrap(), "dogs");
        assert!(c.head_of(&toks("the red")).is_err());
    }

    #[test]
    fn synthetic_heads_match_generator() {
        let corpus = gen_synthetic(&SynthConfig { sentences: 40, ..Default::default() }).unwrap();
        let c = PatternChunker::synthetic();
        let (dp, stats) =
            build_phrase_image_set(&corpus.pairs, &c, &c, GroundingPolicy::Fail).unwrap();
        assert_eq!(dp.len(), 80);
        assert_eq!(stats.skipped, 0);
        for (i, ents) in corpus.entities.iter().enumerate() {
            for (j, e) in ents.iter().enumerate() {
                let p = &dp[2 * i + j];
                assert_eq!(p.head, crate::data::synth::HEADS[e.head].0);
                assert_eq!(p.feat, corpus.pairs[i].regions[j].feat);
            }
        }
    }

    #[test]
    fn policies_and_empty_corpus() {
        let c = PatternChunker::synthetic();
        let (dp, _) = build_phrase_image_set(&[], &c, &c, GroundingPolicy::Fail).unwrap();
        assert!(dp.is_empty());

        let pair = SentenceImagePair {
            id: "p".into(),
            src: toks("a dog runs near the car ."),
            tgt: toks("x"),
            regions: vec![RegionAnnotation { start: 0, len: 2, feat: vec![1.0] }],
        };
        let (dp, stats) =
            build_phrase_image_set(std::slice::from_ref(&pair), &c, &c, GroundingPolicy::Skip)
                .unwrap();
        assert_eq!(dp.len(), 1);
        assert_eq!(stats, GroundingStats { phrases: 2, grounded: 1, skipped: 1 });
        assert!(matches!(
            build_phrase_image_set(&[pair], &c, &c, GroundingPolicy::Fail),
            Err(Error::Grounding(_))
        ));
    }

    #[test]
    fn region_spans_survive_masking() {
        let corpus = gen_synthetic(&SynthConfig { sentences: 3, ..Default::default() }).unwrap();
        let c = PatternChunker::synthetic();
        let p = &corpus.pairs[0];
        let plain = sentence_phrases(p, &c);
        assert_eq!(sentence_phrases(p, &RegionSpanProvider), plain);
        let masked = crate::data::mask_visual_tokens(p);
        assert!(c.chunk(&masked.src).is_empty());
        let spans: Vec<_> = sentence_phrases(&masked, &RegionSpanProvider)
            .into_iter()
            .map(|x| x.0)
            .collect();
        assert_eq!(spans, plain.iter().map(|x| x.0).collect::<Vec<_>>());
    }
}
