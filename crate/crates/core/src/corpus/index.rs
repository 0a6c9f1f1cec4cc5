use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

pub type Sentence = Vec<String>;

/// Half-open token range `[begin, end)`. Serialized as `[begin, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Self {
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }

    pub fn contains(&self, i: usize) -> bool {
        self.begin <= i && i < self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.begin < other.end && other.begin < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.begin, s.end]
    }
}

/// Leftmost exact occurrence of `phrase` in `sentence`.
pub fn find_leftmost(sentence: &[String], phrase: &[String]) -> Option<Span> {
    if phrase.is_empty() || phrase.len() > sentence.len() {
        return None;
    }
    sentence
        .windows(phrase.len())
        .position(|w| w == phrase)
        .map(|b| Span::new(b, b + phrase.len()))
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Shard {
    /// token -> ascending sentence ids, each id once.
    postings: HashMap<String, Vec<u32>>,
}

/// Inverted index over a corpus, split into shards by `sentence_id % shard_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseIndex {
    shard_count: usize,
    shards: Vec<Shard>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Occurrence {
    pub sentence_id: usize,
    pub span: Span,
}

impl PhraseIndex {
    pub fn build(corpus: &[Sentence], shard_count: usize, exec: Exec) -> Result<Self> {
        if shard_count == 0 {
            return Err(Error::Validation("shard_count must be >= 1".into()));
        }
        let shards = exec.map_range(shard_count, |s| {
            let mut postings: HashMap<String, Vec<u32>> = HashMap::new();
            for id in (s..corpus.len()).step_by(shard_count) {
                for tok in &corpus[id] {
                    let list = postings.entry(tok.clone()).or_default();
                    // ids arrive ascending, so a repeat token shows up as the last entry
                    if list.last() != Some(&(id as u32)) {
                        list.push(id as u32);
                    }
                }
            }
            Shard { postings }
        });
        Ok(PhraseIndex { shard_count, shards })
    }

    pub fn shard_count(&self) -> usize {
        self.shard_count
    }

    /// Sentence ids containing `token` across all shards, ascending.
    pub fn postings(&self, token: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .shards
            .iter()
            .flat_map(|s| s.postings.get(token).into_iter().flatten().map(|&i| i as usize))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Sentence ids stored in shard `s` under `token`.
    pub fn shard_postings(&self, s: usize, token: &str) -> &[u32] {
        self.shards[s].postings.get(token).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn vocabulary_size(&self) -> usize {
        let mut toks: Vec<&String> = self.shards.iter().flat_map(|s| s.postings.keys()).collect();
        toks.sort();
        toks.dedup();
        toks.len()
    }

    fn shard_candidates(&self, s: usize, phrase: &[String]) -> Vec<u32> {
        let shard = &self.shards[s];
        let mut lists: Vec<&Vec<u32>> = Vec::with_capacity(phrase.len());
        for tok in phrase {
            match shard.postings.get(tok) {
                Some(l) => lists.push(l),
                None => return Vec::new(),
            }
        }
        lists.sort_by_key(|l| l.len());
        lists.dedup_by(|a, b| std::ptr::eq(*a, *b));
        let (first, rest) = lists.split_first().expect("phrase is non-empty");
        first
            .iter()
            .copied()
            .filter(|id| rest.iter().all(|l| l.binary_search(id).is_ok()))
            .collect()
    }

    /// Leftmost occurrence of `phrase` in every sentence that contains it,
    /// ordered by sentence id.
    pub fn find_occurrences(&self, corpus: &[Sentence], phrase: &[String], exec: Exec) -> Vec<Occurrence> {
        if phrase.is_empty() {
            return Vec::new();
        }
        let per_shard = exec.map_range(self.shard_count, |s| {
            self.shard_candidates(s, phrase)
                .into_iter()
                .filter_map(|id| {
                    let id = id as usize;
                    find_leftmost(&corpus[id], phrase).map(|span| Occurrence { sentence_id: id, span })
                })
                .collect::<Vec<_>>()
        });
        let mut all: Vec<Occurrence> = per_shard.into_iter().flatten().collect();
        all.sort_unstable();
        all
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(s: &str) -> Sentence {
        crate::corpus::tokenize(s)
    }

    #[test]
    fn postings_are_deduplicated() {
        let idx = PhraseIndex::build(&[sent("a b a")], 1, Exec::Sequential).unwrap();
        assert_eq!(idx.postings("a"), vec![0]);
        assert_eq!(idx.postings("b"), vec![0]);
        assert_eq!(idx.vocabulary_size(), 2);
    }

    #[test]
    fn empty_corpus() {
        let idx = PhraseIndex::build(&[], 3, Exec::Sequential).unwrap();
        assert_eq!(idx.vocabulary_size(), 0);
        assert!(idx.find_occurrences(&[], &sent("a"), Exec::Sequential).is_empty());
    }

    #[test]
    fn shard_assignment_is_mod() {
        let corpus: Vec<Sentence> = ["x", "x", "x", "x"].iter().map(|s| sent(s)).collect();
        let idx = PhraseIndex::build(&corpus, 2, Exec::Parallel).unwrap();
        assert_eq!(idx.shard_postings(0, "x"), &[0, 2]);
        assert_eq!(idx.shard_postings(1, "x"), &[1, 3]);
        assert!(PhraseIndex::build(&corpus, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn finds_leftmost_match() {
        let corpus = vec![sent("a b c d"), sent("b c x b c"), sent("c b")];
        let idx = PhraseIndex::build(&corpus, 2, Exec::Sequential).unwrap();
        let occ = idx.find_occurrences(&corpus, &sent("b c"), Exec::Sequential);
        assert_eq!(
            occ,
            vec![
                Occurrence {
                    sentence_id: 0,
                    span: Span::new(1, 3)
                },
                Occurrence {
                    sentence_id: 1,
                    span: Span::new(0, 2)
                },
            ]
        );
        assert!(idx.find_occurrences(&corpus, &sent("q"), Exec::Sequential).is_empty());
    }

    /// Naive O(|sentence| * |phrase|) scan used as the oracle.
    fn naive(corpus: &[Sentence], phrase: &[String]) -> Vec<Occurrence> {
        let mut out = Vec::new();
        for (id, s) in corpus.iter().enumerate() {
            'start: for b in 0..s.len() {
                if b + phrase.len() > s.len() {
                    break;
                }
                for (k, tok) in phrase.iter().enumerate() {
                    if s[b + k] != *tok {
                        continue 'start;
                    }
                }
                out.push(Occurrence {
                    sentence_id: id,
                    span: Span::new(b, b + phrase.len()),
                });
                break;
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn matches_naive_scan(
            corpus in proptest::collection::vec(proptest::collection::vec(0u8..6, 0..12), 0..1000),
            phrase in proptest::collection::vec(0u8..6, 1..4),
            shards in 1usize..9,
        ) {
            let to_s = |v: &Vec<u8>| v.iter().map(|t| format!("w{t}")).collect::<Vec<_>>();
            let corpus: Vec<Sentence> = corpus.iter().map(to_s).collect();
            let phrase = to_s(&phrase);
            let idx = PhraseIndex::build(&corpus, shards, Exec::Parallel).unwrap();
            prop_assert_eq!(idx.find_occurrences(&corpus, &phrase, Exec::Parallel), naive(&corpus, &phrase));
        }
    }
}
