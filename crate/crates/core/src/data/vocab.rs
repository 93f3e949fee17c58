use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::SentenceImagePair;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<mask>"];

pub const MASK_TOKEN: &str = "<mask>";

/// Token table shared by source and target. Ids `0..5` are reserved; the
/// rest follow descending frequency with ties broken alphabetically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds from token counts; tokens seen fewer than `min_freq` times
    /// are left out and will map to UNK.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !RESERVED.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.clone()))
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and dropping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

pub fn count_tokens<'a>(sequences: impl IntoIterator<Item = &'a [String]>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for seq in sequences {
        for t in seq {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Vocabulary over both sides of `corpus`.
pub fn build_vocab(corpus: &[SentenceImagePair], min_freq: usize) -> Vocab {
    let counts = count_tokens(
        corpus
            .iter()
            .flat_map(|p| [p.src.as_slice(), p.tgt.as_slice()]),
    );
    Vocab::from_counts(&counts, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(src: &str, tgt: &str) -> SentenceImagePair {
        SentenceImagePair {
            id: "x".into(),
            src: src.split(' ').map(String::from).collect(),
            tgt: tgt.split(' ').map(String::from).collect(),
            regions: vec![],
        }
    }

    #[test]
    fn hand_tally() {
        let corpus = [
            pair("a dog runs", "ein hund rennt"),
            pair("a cat", "eine katze"),
            pair("the dog", "der hund"),
        ];
        let counts = count_tokens(corpus.iter().flat_map(|p| [p.src.as_slice(), p.tgt.as_slice()]));
        assert_eq!(counts["a"], 2);
        assert_eq!(counts["dog"], 2);
        assert_eq!(counts["hund"], 2);
        assert_eq!(counts["runs"], 1);
        assert_eq!(counts.len(), 11);

        let v = build_vocab(&corpus, 1);
        assert_eq!(v.len(), 5 + 11);
        assert_eq!(&v.tokens()[5..8], ["a", "dog", "hund"]);
        assert_eq!(v.id("cat"), 5 + 3);

        let v2 = build_vocab(&corpus, 2);
        assert_eq!(v2.len(), 8);
        assert_eq!(v2.id("cat"), UNK);

        let v3 = build_vocab(&corpus, 3);
        assert_eq!(v3.tokens(), RESERVED);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = build_vocab(&[pair("<mask> b", "c")], 1);
        assert_eq!(v.id("<mask>"), MASK);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.len(), 7);
        assert_eq!(v.decode(&[BOS, 5, 6, EOS, 5]), ["b", "c"]);
    }

    #[test]
    fn serde_as_token_list() {
        let v = build_vocab(&[pair("x y", "z")], 1);
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with("[\"<pad>\""));
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
