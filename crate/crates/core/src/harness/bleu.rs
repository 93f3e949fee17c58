//! Corpus BLEU with 13a tokenization and exponential smoothing, bootstrap
//! confidence intervals and paired bootstrap significance.

use std::collections::HashMap;
use std::sync::LazyLock;

use prmt_neural::RngState;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 12345;

static TOK_RULES: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("regex"), " $1 "),
        (Regex::new(r"([^0-9])([\.,])").expect("regex"), "$1 $2 "),
        (Regex::new(r"([\.,])([^0-9])").expect("regex"), " $1 $2"),
        (Regex::new(r"([0-9])(-)").expect("regex"), "$1 $2 "),
    ]
});

/// The mteval-v13a tokenizer.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in TOK_RULES.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(String::from).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of one sentence pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub sys_len: usize,
    pub ref_len: usize,
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
}

impl BleuStats {
    pub fn of(hyp: &str, reference: &str) -> Self {
        let h = tokenize_13a(hyp);
        let r = tokenize_13a(reference);
        let mut st = Self { sys_len: h.len(), ref_len: r.len(), ..Self::default() };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            st.total[n - 1] = h.len().saturating_sub(n - 1);
            st.correct[n - 1] = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        st
    }

    pub fn add(&mut self, o: &Self) {
        self.sys_len += o.sys_len;
        self.ref_len += o.ref_len;
        for n in 0..MAX_ORDER {
            self.correct[n] += o.correct[n];
            self.total[n] += o.total[n];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    /// Percentages, smoothed where the match count is zero.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub sys_len: usize,
    pub ref_len: usize,
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub ci: Option<(f64, f64)>,
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

/// BLEU from aggregated statistics.
pub fn bleu_from_stats(st: &BleuStats) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if st.total[n] == 0 {
            break;
        }
        precisions[n] = if st.correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * st.total[n] as f64)
        } else {
            100.0 * st.correct[n] as f64 / st.total[n] as f64
        };
    }
    let bp = if st.sys_len == 0 {
        0.0
    } else if st.sys_len < st.ref_len {
        (1.0 - st.ref_len as f64 / st.sys_len as f64).exp()
    } else {
        1.0
    };
    let score = if st.sys_len == 0 {
        0.0
    } else {
        bp * (precisions.iter().map(|&p| my_log(p)).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    BleuReport {
        score,
        precisions,
        brevity_penalty: bp,
        sys_len: st.sys_len,
        ref_len: st.ref_len,
        correct: st.correct,
        total: st.total,
        ci: None,
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch(format!("{a} hypotheses for {b} references")));
    }
    if a == 0 {
        return Err(Error::Domain("BLEU needs at least one sentence".into()));
    }
    Ok(())
}

pub fn sentence_stats<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<Vec<BleuStats>> {
    check_lengths(hyps.len(), refs.len())?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| BleuStats::of(h.as_ref(), r.as_ref())).collect())
}

fn corpus_stats(stats: &[BleuStats], idx: impl Iterator<Item = usize>) -> BleuStats {
    let mut acc = BleuStats::default();
    for i in idx {
        acc.add(&stats[i]);
    }
    acc
}

/// Corpus BLEU over detokenized hypothesis and reference lines.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R]) -> Result<BleuReport> {
    let stats = sentence_stats(hyps, refs)?;
    Ok(bleu_from_stats(&corpus_stats(&stats, 0..stats.len())))
}

/// `resamples` index lists of length `n`, drawn with replacement.
pub fn bootstrap_indices(n: usize, resamples: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = RngState::new(seed);
    (0..resamples).map(|_| (0..n).map(|_| rng.below(n)).collect()).collect()
}

/// BLEU with a `score ± 1.96 sd` interval over bootstrap resamples.
pub fn bleu_with_ci<S: AsRef<str>, R: AsRef<str>>(hyps: &[S], refs: &[R], resamples: usize, seed: u64) -> Result<BleuReport> {
    let stats = sentence_stats(hyps, refs)?;
    let mut report = bleu_from_stats(&corpus_stats(&stats, 0..stats.len()));
    if resamples > 1 {
        let scores: Vec<f64> = bootstrap_indices(stats.len(), resamples, seed)
            .iter()
            .map(|ix| bleu_from_stats(&corpus_stats(&stats, ix.iter().copied())).score)
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64;
        let half = 1.96 * var.sqrt();
        report.ci = Some(((report.score - half).max(0.0), (report.score + half).min(100.0)));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    pub bleu_a: f64,
    pub bleu_b: f64,
    /// Share of resamples where `b` does not beat `a`, ties counted half.
    pub p_value: f64,
    pub resamples: usize,
}

/// Paired bootstrap resampling test of system `b` against system `a`.
pub fn paired_bootstrap<S: AsRef<str>, T: AsRef<str>, R: AsRef<str>>(
    sys_a: &[S],
    sys_b: &[T],
    refs: &[R],
    resamples: usize,
    seed: u64,
) -> Result<PairedBootstrap> {
    check_lengths(sys_a.len(), refs.len())?;
    check_lengths(sys_b.len(), refs.len())?;
    if resamples == 0 {
        return Err(Error::Config("at least one bootstrap resample is required".into()));
    }
    let sa = sentence_stats(sys_a, refs)?;
    let sb = sentence_stats(sys_b, refs)?;
    let mut not_better = 0.0;
    for ix in bootstrap_indices(refs.len(), resamples, seed) {
        let a = bleu_from_stats(&corpus_stats(&sa, ix.iter().copied())).score;
        let b = bleu_from_stats(&corpus_stats(&sb, ix.iter().copied())).score;
        if b < a {
            not_better += 1.0;
        } else if b == a {
            not_better += 0.5;
        }
    }
    Ok(PairedBootstrap {
        bleu_a: bleu_from_stats(&corpus_stats(&sa, 0..sa.len())).score,
        bleu_b: bleu_from_stats(&corpus_stats(&sb, 0..sb.len())).score,
        p_value: not_better / resamples as f64,
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_13a_cases() {
        assert_eq!(tokenize_13a("Hello, world."), ["Hello", ",", "world", "."]);
        assert_eq!(tokenize_13a("3.5 and 1,000"), ["3.5", "and", "1,000"]);
        assert_eq!(tokenize_13a("a&amp;b (x)"), ["a", "&", "b", "(", "x", ")"]);
        assert_eq!(tokenize_13a("well-known 5-6"), ["well-known", "5", "-", "6"]);
    }

    #[test]
    fn identical_is_hundred() {
        let s = ["der hund rennt .", "ein auto steht nahe der katze ."];
        assert!((bleu(&s, &s).unwrap().score - 100.0).abs() < 1e-9);
        assert!(bleu(&s, &s[..1]).is_err());
    }
}
