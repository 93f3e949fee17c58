//! Corpus records, vocabulary, JSONL persistence, source masking and the
//! synthetic grounded world.

pub mod synth;
mod text;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{gen_synthetic, EntityMeta, SynthConfig, SynthCorpus, SynthWorld};
pub use text::{detokenize, tokenize};
pub use vocab::{build_vocab, count_tokens, Vocab, BOS, EOS, MASK, MASK_TOKEN, PAD, RESERVED, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub start: usize,
    pub len: usize,
    pub feat: Vec<f64>,
}

impl RegionAnnotation {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceImagePair {
    pub id: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub regions: Vec<RegionAnnotation>,
}

impl SentenceImagePair {
    pub fn validate(&self) -> Result<()> {
        if self.src.is_empty() || self.tgt.is_empty() {
            return Err(Error::Domain(format!("pair `{}` has an empty side", self.id)));
        }
        for r in &self.regions {
            if r.len == 0 || r.end() > self.src.len() {
                return Err(Error::Domain(format!(
                    "pair `{}` has region span ({}, {}) outside {} source tokens",
                    self.id,
                    r.start,
                    r.len,
                    self.src.len()
                )));
            }
        }
        Ok(())
    }
}

/// Replaces every source token covered by a region span with `<mask>`.
pub fn mask_visual_tokens(pair: &SentenceImagePair) -> SentenceImagePair {
    let mut out = pair.clone();
    for r in &pair.regions {
        for t in &mut out.src[r.start..r.end().min(pair.src.len())] {
            *t = MASK_TOKEN.to_string();
        }
    }
    out
}

/// Fraction of source tokens that masking would hide.
pub fn masked_fraction(corpus: &[SentenceImagePair]) -> f64 {
    let (mut hidden, mut total) = (0usize, 0usize);
    for p in corpus {
        let masked = mask_visual_tokens(p);
        hidden += masked.src.iter().filter(|t| *t == MASK_TOKEN).count();
        total += p.src.len();
    }
    if total == 0 {
        0.0
    } else {
        hidden as f64 / total as f64
    }
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<SentenceImagePair>> {
    let path = path.as_ref();
    let corpus: Vec<SentenceImagePair> = read_jsonl(path)?;
    for (i, p) in corpus.iter().enumerate() {
        p.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &[SentenceImagePair], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path, corpus)
}

/// Consecutive train/valid/test split by fractions of the corpus length.
pub fn split_corpus(
    corpus: &[SentenceImagePair],
    train_frac: f64,
    valid_frac: f64,
) -> (Vec<SentenceImagePair>, Vec<SentenceImagePair>, Vec<SentenceImagePair>) {
    let n = corpus.len();
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_valid = (((n as f64) * valid_frac).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    (
        corpus[..n_train].to_vec(),
        corpus[n_train..n_train + n_valid].to_vec(),
        corpus[n_train + n_valid..].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> SentenceImagePair {
        SentenceImagePair {
            id: "s0".into(),
            src: tokenize("a red dog runs near the car ."),
            tgt: tokenize("ein hund rot rennt nahe der auto ."),
            regions: vec![
                RegionAnnotation { start: 0, len: 3, feat: vec![0.1, -0.25] },
                RegionAnnotation { start: 5, len: 2, feat: vec![1.0 / 3.0, 2e-300] },
            ],
        }
    }

    #[test]
    fn masking_covers_spans_exactly() {
        let p = pair();
        let m = mask_visual_tokens(&p);
        let mask = MASK_TOKEN.to_string();
        assert_eq!(m.src[..3], [mask.clone(), mask.clone(), mask.clone()]);
        assert_eq!(m.src[3..5], p.src[3..5]);
        assert_eq!(m.src[5..7], [mask.clone(), mask]);
        assert_eq!(m.src[7], ".");
        assert_eq!(m.regions, p.regions);
        assert_eq!(m.tgt, p.tgt);
        assert!((masked_fraction(&[p]) - 5.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn masking_edge_cases() {
        let mut p = pair();
        p.regions.clear();
        assert_eq!(mask_visual_tokens(&p), p);
        p.regions.push(RegionAnnotation { start: 0, len: p.src.len(), feat: vec![] });
        assert!(mask_visual_tokens(&p).src.iter().all(|t| t == MASK_TOKEN));
    }

    #[test]
    fn jsonl_fixture_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"src\":[\"a\",\"dog\"],\"tgt\":[\"ein\",\"hund\"],\"regions\":[{\"start\":0,\"len\":2,\"feat\":[0.5,-1.0]}]}\n\
             \n\
             {\"id\":\"b\",\"src\":[\"hi\"],\"tgt\":[\"hallo\"],\"regions\":[]}\n",
        )
        .unwrap();
        let c = load_corpus(&path).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].regions[0].feat, vec![0.5, -1.0]);
        assert_eq!(c[1].tgt, ["hallo"]);

        let corpus = vec![pair(), c[1].clone()];
        save_corpus(&corpus, &path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);

        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"b\",\"src\":[\"hi\"],\"tgt\":[\"hallo\"],\"regions\":[]}\n{\"id\": 3}\n",
        )
        .unwrap();
        match load_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(
            &path,
            "{\"id\":\"b\",\"src\":[\"hi\"],\"tgt\":[\"x\"],\"regions\":[{\"start\":0,\"len\":2,\"feat\":[]}]}\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_sizes() {
        let c: Vec<_> = (0..10).map(|_| pair()).collect();
        let (a, b, t) = split_corpus(&c, 0.8, 0.1);
        assert_eq!((a.len(), b.len(), t.len()), (8, 1, 1));
    }
}
