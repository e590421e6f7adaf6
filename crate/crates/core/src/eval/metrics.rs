use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one sample.
fn clipped_matches<T: Hash + Eq>(candidate: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `len`, preferring the shorter on ties.
fn closest_ref_len<T>(len: usize, references: &[Vec<T>]) -> usize {
    references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// Corpus BLEU with uniform weights over orders `1..=k`, clipping against
/// all references of a sample and add-one smoothing for orders above one.
pub fn corpus_bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>], k: usize) -> Result<f64> {
    if !(1..=4).contains(&k) {
        return Err(Error::Contract(format!("BLEU order {k} outside 1..=4")));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, refs) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += closest_ref_len(c.len(), refs);
        for n in 1..=k {
            let (m, t) = clipped_matches(c, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if cand_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (1..=k)
        .map(|n| {
            let (m, t) = (matched[n - 1] as f64, total[n - 1] as f64);
            if n == 1 {
                (m / t).ln()
            } else {
                ((m + 1.0) / (t + 1.0)).ln()
            }
        })
        .sum::<f64>()
        / k as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_precision.exp())
}

/// BLEU of a single candidate.
pub fn bleu_k<T: Hash + Eq + Clone>(candidate: &[T], references: &[Vec<T>], k: usize) -> Result<f64> {
    corpus_bleu(&[candidate.to_vec()], &[references.to_vec()], k)
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 || cand == 0 || reference == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// N-gram overlap F1; zero when either side has no n-grams.
pub fn rouge_n<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    f1(
        overlap,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of one candidate, each maximized over the
/// non-empty references; `None` if every reference is empty.
pub fn rouge<T: Hash + Eq>(candidate: &[T], references: &[Vec<T>]) -> Option<[f64; 3]> {
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| [rouge_n(candidate, r, 1), rouge_n(candidate, r, 2), rouge_l(candidate, r)])
        .reduce(|a, b| [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])])
}

/// Unique k-grams over total k-grams across all candidates.
pub fn distinct_k<T: Hash + Eq>(candidates: &[Vec<T>], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for c in candidates {
        for g in c.windows(k) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Automatic metrics over a set of replies, each in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub samples: usize,
    /// Candidate tokens.
    pub tokens: usize,
    /// Samples left out of ROUGE for lack of a non-empty reference.
    pub skipped_references: usize,
}

impl MetricReport {
    /// `(key, value)` for every score.
    pub fn scores(&self) -> [(&'static str, f64); 9] {
        [
            ("bleu_1", self.bleu[0]),
            ("bleu_2", self.bleu[1]),
            ("bleu_3", self.bleu[2]),
            ("bleu_4", self.bleu[3]),
            ("rouge_1", self.rouge_1),
            ("rouge_2", self.rouge_2),
            ("rouge_l", self.rouge_l),
            ("distinct_1", self.distinct_1),
            ("distinct_2", self.distinct_2),
        ]
    }
}

/// `key: value` lines, scores as percentages with two decimals.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.scores() {
            writeln!(f, "{k}: {:.2}", 100.0 * v)?;
        }
        writeln!(f, "samples: {}", self.samples)?;
        writeln!(f, "tokens: {}", self.tokens)?;
        write!(f, "skipped_references: {}", self.skipped_references)
    }
}

/// Scores `candidates` against aligned reference sets.
pub fn compute_metrics<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<MetricReport> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} replies for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let mut bleu = [0.0; 4];
    for (k, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(candidates, references, k + 1)?;
    }
    let mut sums = [0.0; 3];
    let mut scored = 0usize;
    for (c, refs) in candidates.iter().zip(references) {
        if let Some(r) = rouge(c, refs) {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
            scored += 1;
        }
    }
    let mean = |s: f64| if scored == 0 { 0.0 } else { s / scored as f64 };
    Ok(MetricReport {
        bleu,
        rouge_1: mean(sums[0]),
        rouge_2: mean(sums[1]),
        rouge_l: mean(sums[2]),
        distinct_1: distinct_k(candidates, 1),
        distinct_2: distinct_k(candidates, 2),
        samples: candidates.len(),
        tokens: candidates.iter().map(Vec::len).sum(),
        skipped_references: candidates.len() - scored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_basic_cases() {
        let c = toks("the cat sat on the mat");
        assert!((bleu_k(&c, std::slice::from_ref(&c), 4).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bleu_k(&toks("a b"), &[toks("c d")], 1).unwrap(), 0.0);
        assert_eq!(bleu_k(&[] as &[String], &[toks("c d")], 1).unwrap(), 0.0);
        assert!(bleu_k(&c, std::slice::from_ref(&c), 5).is_err());
    }

    #[test]
    fn bleu_two_references_by_hand() {
        // unigrams: the, cat both clipped to 1 -> 2/2; bigram "the cat" matches -> (1+1)/(1+1);
        // closest reference length is 2, so no brevity penalty.
        let c = toks("the cat");
        let refs = vec![toks("the cat sat"), toks("a cat")];
        assert!((bleu_k(&c, &refs, 2).unwrap() - 1.0).abs() < 1e-15);
        // "the the the" against "the cat": clipped unigram 1/3, bigrams 0 -> (0+1)/(2+1).
        let c = toks("the the the");
        let refs = vec![toks("the cat")];
        let expected = ((1.0f64 / 3.0).ln() / 2.0 + (1.0f64 / 3.0).ln() / 2.0).exp();
        assert!((bleu_k(&c, &refs, 2).unwrap() - expected).abs() < 1e-12);
        // Brevity: one token against a three token reference.
        let b1 = bleu_k(&toks("cat"), &[toks("the cat sat")], 1).unwrap();
        assert!((b1 - (1.0f64 - 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        let r = rouge(&toks("a b c"), &[toks("a x c")]).unwrap();
        assert!((r[2] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
        let same = rouge(&toks("good morning doctor"), &[toks("good morning doctor")]).unwrap();
        assert_eq!(same, [1.0, 1.0, 1.0]);
        assert_eq!(rouge(&toks("a b"), &[toks("c d")]).unwrap(), [0.0; 3]);
        assert!(rouge(&toks("a"), &[vec![]]).is_none());
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct_k(&[toks("a a a")], 1), 1.0 / 3.0);
        assert_eq!(distinct_k(&[toks("a b c")], 1), 1.0);
        assert_eq!(distinct_k(&[toks("a b"), toks("a b")], 2), 0.5);
        assert_eq!(distinct_k(&[toks("a")], 2), 0.0);
        let same = vec![toks("x y z w"); 5];
        assert!((distinct_k(&same, 2) - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn identical_corpus_scores_one() {
        let cands = vec![toks("hello there"), toks("how are you doing today")];
        let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let r = compute_metrics(&cands, &refs).unwrap();
        assert_eq!(r.bleu[0], 1.0);
        assert_eq!(r.rouge_1, 1.0);
        assert!(r.scores().iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        let text = r.to_string();
        assert!(text.starts_with("bleu_1: 100.00\n"));
        assert!(text.contains("rouge_l: 100.00"));
        assert!(compute_metrics(&cands, &refs[..1]).is_err());
    }

    #[test]
    fn lcs_matches_small_cases() {
        assert_eq!(lcs_len(&[1, 2, 3, 4], &[2, 4, 3]), 2);
        assert_eq!(lcs_len::<u8>(&[], &[1]), 0);
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>)> {
        prop::collection::vec(
            (
                prop::collection::vec(0u8..5, 0..7),
                prop::collection::vec(prop::collection::vec(0u8..5, 0..7), 1..3),
            ),
            1..6,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn order_does_not_matter((c, r) in corpus()) {
            let mut c2 = c.clone();
            let mut r2 = r.clone();
            c2.reverse();
            r2.reverse();
            let a = compute_metrics(&c, &r).unwrap();
            let b = compute_metrics(&c2, &r2).unwrap();
            for ((_, x), (_, y)) in a.scores().iter().zip(b.scores().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn extra_reference_never_hurts((c, r) in corpus(), seed in 0u8..5) {
            // The added reference has the same length as an existing one, so the
            // closest reference length (and hence the brevity penalty) is unchanged.
            let mut more = r.clone();
            for refs in &mut more {
                let twin: Vec<u8> = refs[0].iter().map(|&t| (t + seed) % 5).collect();
                refs.push(twin);
            }
            let before = compute_metrics(&c, &r).unwrap();
            let after = compute_metrics(&c, &more).unwrap();
            for k in 0..4 {
                prop_assert!(after.bleu[k] >= before.bleu[k] - 1e-15);
            }
            for (cand, (a, b)) in c.iter().zip(r.iter().zip(&more)) {
                if let (Some(x), Some(y)) = (rouge(cand, a), rouge(cand, b)) {
                    for i in 0..3 {
                        prop_assert!(y[i] >= x[i]);
                    }
                }
            }
        }
    }
}
