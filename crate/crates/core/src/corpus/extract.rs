use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::index::{PhraseIndex, Sentence, Span};
use super::phrase::{ExtractionConfig, PhrasePair};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// One aligned phrase occurrence: `source[src]` translates `target[tgt]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanPair {
    pub k: usize,
    pub src: Span,
    pub tgt: Span,
}

/// A non-parallel sentence pair that shares one or more translated phrases.
#[derive(Debug, Clone, PartialEq)]
pub struct PartiallyAlignedPair {
    /// Corpus line numbers, when the pair came from extraction.
    pub ids: Option<(usize, usize)>,
    pub source: Sentence,
    pub target: Sentence,
    pub aligned: Vec<SpanPair>,
}

impl PartiallyAlignedPair {
    /// Checks span bounds and pairwise disjointness on each side.
    pub fn validate(&self) -> Result<()> {
        for sp in &self.aligned {
            if sp.src.is_empty()
                || sp.tgt.is_empty()
                || sp.src.end > self.source.len()
                || sp.tgt.end > self.target.len()
            {
                return Err(Error::Validation(format!(
                    "span pair {} ({:?}, {:?}) out of bounds for lengths ({}, {})",
                    sp.k,
                    sp.src,
                    sp.tgt,
                    self.source.len(),
                    self.target.len()
                )));
            }
        }
        for (a, sa) in self.aligned.iter().enumerate() {
            for sb in &self.aligned[a + 1..] {
                if sa.src.overlaps(&sb.src) || sa.tgt.overlaps(&sb.tgt) {
                    return Err(Error::Validation(format!("span pairs {} and {} overlap", sa.k, sb.k)));
                }
            }
        }
        Ok(())
    }
}

/// 0/1 attention prior, `target_len x source_len`. Entry `(i, j)` is 1 iff
/// target position `i` and source position `j` sit in the same span pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionMatrix {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl SupervisionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SupervisionMatrix {
            rows,
            cols,
            values: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Row `i` contains at least one 1.
    pub fn row_is_aligned(&self, i: usize) -> bool {
        self.row(i).contains(&1)
    }

    pub fn ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

pub fn supervision_matrix(pair: &PartiallyAlignedPair) -> SupervisionMatrix {
    let mut m = SupervisionMatrix::zeros(pair.target.len(), pair.source.len());
    for sp in &pair.aligned {
        for i in sp.tgt.begin..sp.tgt.end {
            for j in sp.src.begin..sp.src.end {
                m.set(i, j, 1);
            }
        }
    }
    m
}

#[derive(Debug, Clone)]
struct Candidate {
    phrase: usize,
    src: Span,
    tgt: Span,
}

/// Mines partially aligned sentence pairs: for every phrase pair, the first
/// `n_cap` source and target sentences containing it are crossed; a
/// sentence pair is kept when at least `min_aligned` phrase pairs can be
/// placed on mutually disjoint spans. Output is sorted by (source id,
/// target id) and does not depend on `shard_count` or `exec`.
pub fn extract_partially_aligned(
    src_corpus: &[Sentence],
    tgt_corpus: &[Sentence],
    retained: &[PhrasePair],
    cfg: &ExtractionConfig,
    shard_count: usize,
    exec: Exec,
) -> Result<Vec<PartiallyAlignedPair>> {
    cfg.validate()?;
    let src_index = PhraseIndex::build(src_corpus, shard_count, exec)?;
    let tgt_index = PhraseIndex::build(tgt_corpus, shard_count, exec)?;

    let per_phrase = exec.map_range(retained.len(), |p| {
        let pair = &retained[p];
        let src_occ = src_index.find_occurrences(src_corpus, &pair.source, Exec::Sequential);
        if src_occ.is_empty() {
            return Vec::new();
        }
        let tgt_occ = tgt_index.find_occurrences(tgt_corpus, &pair.target, Exec::Sequential);
        let mut out = Vec::new();
        for s in src_occ.iter().take(cfg.n_cap) {
            for t in tgt_occ.iter().take(cfg.n_cap) {
                out.push((
                    (s.sentence_id, t.sentence_id),
                    Candidate {
                        phrase: p,
                        src: s.span,
                        tgt: t.span,
                    },
                ));
            }
        }
        out
    });

    let mut by_pair: BTreeMap<(usize, usize), Vec<Candidate>> = BTreeMap::new();
    for (key, cand) in per_phrase.into_iter().flatten() {
        by_pair.entry(key).or_default().push(cand);
    }
    let entries: Vec<((usize, usize), Vec<Candidate>)> = by_pair
        .into_iter()
        .filter(|(_, c)| c.len() >= cfg.min_aligned)
        .collect();

    let emitted = exec.map(&entries, |((sid, tid), cands)| {
        let aligned = assign_disjoint(cands, retained);
        (aligned.len() >= cfg.min_aligned).then(|| PartiallyAlignedPair {
            ids: Some((*sid, *tid)),
            source: src_corpus[*sid].clone(),
            target: tgt_corpus[*tid].clone(),
            aligned,
        })
    });
    Ok(emitted.into_iter().flatten().collect())
}

/// Greedy span assignment: longer phrases first, then leftmost source and
/// target span, then lexicographic phrase order. A candidate overlapping an
/// already placed span on either side is skipped.
fn assign_disjoint(cands: &[Candidate], phrases: &[PhrasePair]) -> Vec<SpanPair> {
    let mut order: Vec<&Candidate> = cands.iter().collect();
    order.sort_by(|a, b| {
        let (pa, pb) = (&phrases[a.phrase], &phrases[b.phrase]);
        let key_a = (Reverse(pa.source.len() + pa.target.len()), a.src.begin, a.tgt.begin);
        let key_b = (Reverse(pb.source.len() + pb.target.len()), b.src.begin, b.tgt.begin);
        key_a
            .cmp(&key_b)
            .then_with(|| pa.source.cmp(&pb.source))
            .then_with(|| pa.target.cmp(&pb.target))
            .then_with(|| a.phrase.cmp(&b.phrase))
    });
    let mut placed: Vec<(Span, Span)> = Vec::new();
    for c in order {
        if placed.iter().all(|(s, t)| !s.overlaps(&c.src) && !t.overlaps(&c.tgt)) {
            placed.push((c.src, c.tgt));
        }
    }
    placed.sort();
    placed
        .into_iter()
        .enumerate()
        .map(|(k, (src, tgt))| SpanPair { k, src, tgt })
        .collect()
}

// ---------------------------------------------------------------------------
// JSON Lines I/O

#[derive(Serialize, Deserialize)]
struct AlignedRecord {
    src: Span,
    tgt: Span,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    src: Vec<String>,
    tgt: Vec<String>,
    aligned: Vec<AlignedRecord>,
}

pub fn pair_to_json(pair: &PartiallyAlignedPair) -> Result<String> {
    let rec = PairRecord {
        src: pair.source.clone(),
        tgt: pair.target.clone(),
        aligned: pair
            .aligned
            .iter()
            .map(|sp| AlignedRecord {
                src: sp.src,
                tgt: sp.tgt,
            })
            .collect(),
    };
    Ok(serde_json::to_string(&rec)?)
}

pub fn pair_from_json(line: &str) -> Result<PartiallyAlignedPair> {
    let rec: PairRecord = serde_json::from_str(line)?;
    let pair = PartiallyAlignedPair {
        ids: None,
        source: rec.src,
        target: rec.tgt,
        aligned: rec
            .aligned
            .into_iter()
            .enumerate()
            .map(|(k, a)| SpanPair {
                k,
                src: a.src,
                tgt: a.tgt,
            })
            .collect(),
    };
    pair.validate()?;
    Ok(pair)
}

pub fn write_pairs_jsonl(path: impl AsRef<Path>, pairs: &[PartiallyAlignedPair]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        writeln!(w, "{}", pair_to_json(p)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs_jsonl(path: impl AsRef<Path>) -> Result<Vec<PartiallyAlignedPair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair = pair_from_json(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(pair);
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

    fn pp(s: &str, t: &str) -> PhrasePair {
        PhrasePair::from_strs(s, t, 1.0).unwrap()
    }

    #[test]
    fn two_shared_phrases_are_emitted() {
        let src = sents(&["q a b c d r e f g h", "a b c d z"]);
        let tgt = sents(&["A B C D x E F G H y", "A B C D"]);
        let phrases = vec![pp("a b c d", "A B C D"), pp("e f g h", "E F G H")];
        let out =
            extract_partially_aligned(&src, &tgt, &phrases, &ExtractionConfig::default(), 1, Exec::Sequential).unwrap();
        assert_eq!(out.len(), 1);
        let p = &out[0];
        assert_eq!(p.ids, Some((0, 0)));
        assert_eq!(p.aligned.len(), 2);
        assert_eq!(p.aligned[0].src, Span::new(1, 5));
        assert_eq!(p.aligned[0].tgt, Span::new(0, 4));
        assert_eq!(p.aligned[1].src, Span::new(6, 10));
        assert_eq!(p.aligned[1].tgt, Span::new(5, 9));
        p.validate().unwrap();
    }

    #[test]
    fn one_shared_phrase_is_not_enough() {
        let src = sents(&["a b c d e f g h"]);
        let tgt = sents(&["A B C D"]);
        let phrases = vec![pp("a b c d", "A B C D"), pp("e f g h", "E F G H")];
        let out =
            extract_partially_aligned(&src, &tgt, &phrases, &ExtractionConfig::default(), 1, Exec::Sequential).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn n_cap_limits_sentences_per_phrase() {
        // nine source sentences all share both phrases with the single target
        let src: Vec<Sentence> = (0..9).map(|_| tokenize("a b c d e f g h")).collect();
        let tgt = sents(&["A B C D E F G H"]);
        let phrases = vec![pp("a b c d", "A B C D"), pp("e f g h", "E F G H")];
        let out =
            extract_partially_aligned(&src, &tgt, &phrases, &ExtractionConfig::default(), 3, Exec::Parallel).unwrap();
        let ids: Vec<usize> = out.iter().map(|p| p.ids.unwrap().0).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn overlapping_phrases_resolve_longest_first() {
        // "b c d e" and "c d e f g" overlap on the source side; the longer wins.
        let src = sents(&["a b c d e f g x y z w"]);
        let tgt = sents(&["B C D E C D E F G X Y Z W"]);
        let phrases = vec![
            pp("b c d e", "B C D E"),
            pp("c d e f g", "C D E F G"),
            pp("x y z w", "X Y Z W"),
        ];
        let out =
            extract_partially_aligned(&src, &tgt, &phrases, &ExtractionConfig::default(), 1, Exec::Sequential).unwrap();
        assert_eq!(out.len(), 1);
        let spans: Vec<Span> = out[0].aligned.iter().map(|s| s.src).collect();
        assert_eq!(spans, vec![Span::new(2, 7), Span::new(7, 11)]);
    }

    #[test]
    fn supervision_examples() {
        let pair = |aligned: Vec<SpanPair>| PartiallyAlignedPair {
            ids: None,
            source: tokenize("a b c d"),
            target: tokenize("w x y z"),
            aligned,
        };
        let m = supervision_matrix(&pair(vec![SpanPair {
            k: 0,
            src: Span::new(1, 3),
            tgt: Span::new(1, 3),
        }]));
        let ones: Vec<(usize, usize)> = (0..4)
            .flat_map(|i| (0..4).map(move |j| (i, j)))
            .filter(|&(i, j)| m.get(i, j) == 1)
            .collect();
        assert_eq!(ones, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);

        assert_eq!(supervision_matrix(&pair(vec![])).ones(), 0);

        let m = supervision_matrix(&pair(vec![
            SpanPair {
                k: 0,
                src: Span::new(0, 1),
                tgt: Span::new(0, 1),
            },
            SpanPair {
                k: 1,
                src: Span::new(2, 3),
                tgt: Span::new(2, 3),
            },
        ]));
        assert_eq!((m.get(0, 0), m.get(2, 2), m.get(0, 2), m.get(2, 0)), (1, 1, 0, 0));
    }

    #[test]
    fn jsonl_format() {
        let p = PartiallyAlignedPair {
            ids: Some((3, 4)),
            source: tokenize("a b"),
            target: tokenize("x y z"),
            aligned: vec![SpanPair {
                k: 0,
                src: Span::new(0, 2),
                tgt: Span::new(1, 3),
            }],
        };
        let line = pair_to_json(&p).unwrap();
        assert_eq!(
            line,
            r#"{"src":["a","b"],"tgt":["x","y","z"],"aligned":[{"src":[0,2],"tgt":[1,3]}]}"#
        );
        let back = pair_from_json(&line).unwrap();
        assert_eq!(back.aligned, p.aligned);
        assert!(pair_from_json(r#"{"src":["a"],"tgt":["x"],"aligned":[{"src":[0,2],"tgt":[0,1]}]}"#).is_err());
    }

    proptest! {
        #[test]
        fn extraction_invariants(
            src in proptest::collection::vec(proptest::collection::vec(0u8..5, 4..14), 1..40),
            tgt in proptest::collection::vec(proptest::collection::vec(0u8..5, 4..14), 1..40),
            phrases in proptest::collection::vec(proptest::collection::vec(0u8..5, 2..4), 1..12),
            n_cap in 1usize..5,
        ) {
            let s = |v: &Vec<u8>, p: &str| v.iter().map(|t| format!("{p}{t}")).collect::<Vec<_>>();
            let src: Vec<Sentence> = src.iter().map(|v| s(v, "s")).collect();
            let tgt: Vec<Sentence> = tgt.iter().map(|v| s(v, "t")).collect();
            let phrases: Vec<PhrasePair> = phrases
                .iter()
                .map(|v| PhrasePair::new(s(v, "s"), s(v, "t"), 1.0).unwrap())
                .collect();
            let cfg = ExtractionConfig { n_cap, min_aligned: 2, ..Default::default() };
            let a = extract_partially_aligned(&src, &tgt, &phrases, &cfg, 1, Exec::Sequential).unwrap();
            let b = extract_partially_aligned(&src, &tgt, &phrases, &cfg, 4, Exec::Parallel).unwrap();
            prop_assert_eq!(&a, &b);
            let mut last = None;
            for p in &a {
                prop_assert!(p.aligned.len() >= 2);
                p.validate().unwrap();
                prop_assert!(last < p.ids);
                last = p.ids;
                for sp in &p.aligned {
                    let xs = &p.source[sp.src.begin..sp.src.end];
                    let ys = &p.target[sp.tgt.begin..sp.tgt.end];
                    prop_assert!(phrases.iter().any(|ph| ph.source == xs && ph.target == ys));
                }
            }
        }
    }
}
