//! Case-insensitive corpus BLEU with multi-bleu.perl semantics, and BLEU
//! by source-length bucket.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
pub const DEFAULT_BUCKETS: [usize; 4] = [20, 40, 60, 80];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    /// Modified n-gram precisions as percentages, n = 1..4.
    pub precisions: [f64; MAX_ORDER],
    /// Clipped n-gram matches.
    pub matches: [u64; MAX_ORDER],
    /// Hypothesis n-gram counts.
    pub totals: [u64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub ratio: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub smoothed: bool,
}

impl fmt::Display for BleuReport {
    /// The summary line printed by multi-bleu.perl.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.precisions;
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu, p[0], p[1], p[2], p[3], self.brevity_penalty, self.ratio, self.hyp_len, self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn fold(s: &[String]) -> Vec<String> {
    s.iter().map(|t| t.to_lowercase()).collect()
}

/// Reference length closest to `hyp_len`, the shorter one on ties.
pub fn closest_ref_len(hyp_len: usize, refs: &[Sentence]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp_len), l))
        .unwrap_or(0)
}

/// Corpus BLEU. `refs[i]` holds every reference for `hyps[i]`. With
/// `smooth`, orders n >= 2 use `(matches + 1) / (total + 1)`.
pub fn bleu(hyps: &[Sentence], refs: &[Vec<Sentence>], smooth: bool) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses for {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut matches = [0u64; MAX_ORDER];
    let mut totals = [0u64; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (hyp, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::Validation("hypothesis without a reference".into()));
        }
        let hyp = fold(hyp);
        let rs: Vec<Sentence> = rs.iter().map(|r| fold(r)).collect();
        hyp_len += hyp.len() as u64;
        ref_len += closest_ref_len(hyp.len(), &rs) as u64;
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in &rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &h {
                matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..MAX_ORDER {
        let (m, t) = if smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            zero = true;
        } else {
            log_sum += (m as f64 / t as f64).ln();
        }
        precisions[n] = if totals[n] == 0 {
            0.0
        } else {
            100.0 * matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if zero {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        ratio: if ref_len == 0 {
            0.0
        } else {
            hyp_len as f64 / ref_len as f64
        },
        hyp_len,
        ref_len,
        smoothed: smooth,
    })
}

/// Turns per-file reference lists (one file per reference set) into
/// per-sentence reference sets.
pub fn transpose_references(sets: Vec<Vec<Sentence>>) -> Result<Vec<Vec<Sentence>>> {
    let n = sets.first().map_or(0, |s| s.len());
    if sets.iter().any(|s| s.len() != n) {
        return Err(Error::Validation("reference sets differ in length".into()));
    }
    let mut out = vec![Vec::with_capacity(sets.len()); n];
    for set in sets {
        for (i, r) in set.into_iter().enumerate() {
            out[i].push(r);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Inclusive lower bound on source length.
    pub min_len: usize,
    /// Exclusive upper bound; `None` for the last bucket.
    pub max_len: Option<usize>,
    pub sentences: usize,
    /// `None` when no sentence falls in the bucket.
    pub report: Option<BleuReport>,
}

/// Corpus BLEU per source-length bucket. `boundaries` must be strictly
/// increasing; `[20, 40]` gives buckets `[0,20)`, `[20,40)`, `[40,inf)`.
pub fn length_bucket_report(
    hyps: &[Sentence],
    refs: &[Vec<Sentence>],
    sources: &[Sentence],
    boundaries: &[usize],
    smooth: bool,
) -> Result<Vec<BucketReport>> {
    if hyps.len() != refs.len() || hyps.len() != sources.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses, {} reference sets, {} sources",
            hyps.len(),
            refs.len(),
            sources.len()
        )));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "bucket boundaries must increase: {boundaries:?}"
        )));
    }
    let mut edges = vec![0];
    edges.extend(boundaries.iter().copied().filter(|&b| b > 0));
    let mut out = Vec::with_capacity(edges.len());
    for (b, &lo) in edges.iter().enumerate() {
        let hi = edges.get(b + 1).copied();
        let idx: Vec<usize> = (0..sources.len())
            .filter(|&i| sources[i].len() >= lo && hi.is_none_or(|h| sources[i].len() < h))
            .collect();
        let report = if idx.is_empty() {
            None
        } else {
            let h: Vec<Sentence> = idx.iter().map(|&i| hyps[i].clone()).collect();
            let r: Vec<Vec<Sentence>> = idx.iter().map(|&i| refs[i].clone()).collect();
            Some(bleu(&h, &r, smooth)?)
        };
        out.push(BucketReport {
            min_len: lo,
            max_len: hi,
            sentences: idx.len(),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use proptest::prelude::*;

    fn sents(lines: &[&str]) -> Vec<Sentence> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    fn single(refs: &[Sentence]) -> Vec<Vec<Sentence>> {
        refs.iter().map(|r| vec![r.clone()]).collect()
    }

    #[test]
    fn identity_scores_100() {
        let x = sents(&["the cat sat on the mat", "a b c d e"]);
        let r = bleu(&x, &single(&x), false).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn no_four_gram_is_zero_unless_smoothed() {
        let h = sents(&["a b c x"]);
        let r = sents(&["a b c d"]);
        assert_eq!(bleu(&h, &single(&r), false).unwrap().bleu, 0.0);
        assert!(bleu(&h, &single(&r), true).unwrap().bleu > 0.0);
    }

    #[test]
    fn case_insensitive() {
        let h = sents(&["The Cat sat ON the mat"]);
        let r = sents(&["the cat sat on THE mat"]);
        assert!((bleu(&h, &single(&r), false).unwrap().bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_and_closest_reference() {
        // "the the the the" against "the cat": one clipped unigram match
        let h = sents(&["the the the the"]);
        let refs = vec![sents(&["the cat", "the cat is on the mat now"])];
        let r = bleu(&h, &refs, false).unwrap();
        assert_eq!(r.matches[0], 2);
        assert_eq!(r.totals[0], 4);
        // |4-2| = 2 < |4-7| = 3
        assert_eq!(r.ref_len, 2);
        assert_eq!(closest_ref_len(5, &sents(&["a b c d", "a b c d e f"])), 4);
    }

    #[test]
    fn summary_line() {
        let x = sents(&["a b c d e"]);
        let r = bleu(&x, &single(&x), false).unwrap();
        assert_eq!(
            r.to_string(),
            "BLEU = 100.00, 100.0/100.0/100.0/100.0 (BP=1.000, ratio=1.000, hyp_len=5, ref_len=5)"
        );
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let x = sents(&["a"]);
        assert!(bleu(&x, &[], false).is_err());
        assert!(bleu(&[], &[], false).is_err());
    }

    #[test]
    fn buckets_rerun_bleu_on_subsets() {
        let src = sents(&["a b", "a b c", &"w ".repeat(25), &"w ".repeat(30)]);
        let hyp = sents(&["x y z w", "p q r s t", "a b c d e", "a b c d"]);
        let refs = single(&sents(&["x y z w", "p q r s", "a b c d e", "a b d c"]));
        let rep = length_bucket_report(&hyp, &refs, &src, &DEFAULT_BUCKETS, true).unwrap();
        assert_eq!(rep.len(), 5);
        assert_eq!(rep[0].sentences, 2);
        assert_eq!(rep[1].sentences, 2);
        assert!(rep[2].report.is_none() && rep[3].report.is_none() && rep[4].report.is_none());
        let low = bleu(&hyp[..2], &refs[..2], true).unwrap();
        assert_eq!(rep[0].report.as_ref().unwrap(), &low);
        let whole = bleu(&hyp, &refs, true).unwrap().bleu;
        let mean = (low.bleu + rep[1].report.as_ref().unwrap().bleu) / 2.0;
        assert!((whole - mean).abs() > 1e-6);
    }

    #[test]
    fn single_bucket_for_uniform_lengths() {
        let src = sents(&["a b c d e f g h i j"; 3]);
        let hyp = sents(&["x y", "x y", "x y"]);
        let rep = length_bucket_report(&hyp, &single(&hyp), &src, &DEFAULT_BUCKETS, false).unwrap();
        assert_eq!(rep.iter().filter(|b| b.report.is_some()).count(), 1);
    }

    #[test]
    fn transposes_reference_files() {
        let a = sents(&["r0 s0", "r0 s1"]);
        let b = sents(&["r1 s0", "r1 s1"]);
        let t = transpose_references(vec![a, b]).unwrap();
        assert_eq!(t[1], sents(&["r0 s1", "r1 s1"]));
        assert!(transpose_references(vec![sents(&["a"]), vec![]]).is_err());
    }

    fn corpus() -> impl Strategy<Value = Vec<Sentence>> {
        prop::collection::vec(prop::collection::vec("[a-eA-E]", 1..12), 1..6)
    }

    proptest! {
        #[test]
        fn self_bleu_is_100(x in corpus()) {
            let r = bleu(&x, &single(&x), false).unwrap();
            // sentences shorter than 4 tokens have no 4-grams at all
            if r.totals[3] > 0 {
                prop_assert!((r.bleu - 100.0).abs() < 1e-9);
            }
            prop_assert!((bleu(&x, &single(&x), true).unwrap().bleu - 100.0).abs() < 1e-9);
        }

        #[test]
        fn case_changes_do_not_matter(h in corpus(), r in corpus()) {
            let n = h.len().min(r.len());
            let (h, r) = (&h[..n], &r[..n]);
            let up = |c: &[Sentence]| -> Vec<Sentence> { c.iter().map(|s| s.iter().map(|t| t.to_uppercase()).collect()).collect() };
            let a = bleu(h, &single(r), true).unwrap();
            let b = bleu(&up(h), &single(&up(r)), true).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dropping_last_word_never_adds_unigram_matches(h in corpus(), r in corpus()) {
            let n = h.len().min(r.len());
            let (h, r) = (&h[..n], &r[..n]);
            let cut: Vec<Sentence> = h.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
            let a = bleu(h, &single(r), false).unwrap();
            let b = bleu(&cut, &single(r), false).unwrap();
            prop_assert!(b.matches[0] <= a.matches[0]);
        }

        #[test]
        fn bleu_is_bounded(h in corpus(), r in corpus(), smooth: bool) {
            let n = h.len().min(r.len());
            let rep = bleu(&h[..n], &single(&r[..n]), smooth).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&rep.bleu));
            prop_assert!(rep.brevity_penalty <= 1.0);
        }
    }
}
