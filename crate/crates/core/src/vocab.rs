//! Token/id tables and the limited output vocabulary used at decoding time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::PhrasePair;
use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids at the front of every table.
pub const RESERVED: usize = 3;
pub const RESERVED_TOKENS: [&str; RESERVED] = ["<unk>", "<s>", "</s>"];

/// Dense id table. Ids after the reserved symbols are ranked by
/// descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TokenTableRepr", into = "TokenTableRepr")]
pub struct TokenTable {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenTableRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl TryFrom<TokenTableRepr> for TokenTable {
    type Error = Error;

    fn try_from(r: TokenTableRepr) -> Result<Self> {
        TokenTable::from_ranked(r.tokens, r.counts)
    }
}

impl From<TokenTable> for TokenTableRepr {
    fn from(t: TokenTable) -> Self {
        TokenTableRepr {
            tokens: t.tokens,
            counts: t.counts,
        }
    }
}

impl TokenTable {
    /// Counts tokens and keeps at most `max_size` of them (reserved ids not included).
    pub fn build<'a, I>(sentences: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in s {
                *freq.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().filter(|(t, _)| !RESERVED_TOKENS.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(m) = max_size {
            ranked.truncate(m);
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; RESERVED];
        for (t, c) in ranked {
            tokens.push(t.to_owned());
            counts.push(c);
        }
        TokenTable::from_ranked(tokens, counts).expect("tokens are unique")
    }

    pub fn from_ranked(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() != counts.len() || tokens.len() < RESERVED {
            return Err(Error::Validation(
                "token table needs reserved ids and one count per token".into(),
            ));
        }
        if tokens[..RESERVED] != RESERVED_TOKENS {
            return Err(Error::Validation("token table must start with <unk> <s> </s>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate token {t:?}")));
            }
        }
        Ok(TokenTable { tokens, counts, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Fraction of tokens in `sentences` that map to [`UNK`].
    pub fn oov_rate<'a, I>(&self, sentences: I) -> f64
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let (mut total, mut oov) = (0usize, 0usize);
        for s in sentences {
            total += s.len();
            oov += s.iter().filter(|t| self.get(t).is_none()).count();
        }
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub src: TokenTable,
    pub tgt: TokenTable,
    /// Number of most frequent target words always allowed when decoding
    /// with a limited vocabulary.
    pub v1_size: usize,
}

impl Vocabulary {
    pub fn build<'a, I>(pairs: I, max_size: Option<usize>, v1_size: usize) -> Self
    where
        I: IntoIterator<Item = (&'a [String], &'a [String])> + Clone,
    {
        let src = TokenTable::build(pairs.clone().into_iter().map(|(s, _)| s), max_size);
        let tgt = TokenTable::build(pairs.into_iter().map(|(_, t)| t), max_size);
        Vocabulary { src, tgt, v1_size }
    }
}

/// Source word id -> target word ids, from single-word phrase pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpecialMap {
    map: BTreeMap<usize, BTreeSet<usize>>,
}

impl SpecialMap {
    /// Pairs whose source or target word is out of vocabulary are dropped.
    pub fn from_pairs(specials: &[PhrasePair], vocab: &Vocabulary) -> Self {
        let mut map: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for p in specials.iter().filter(|p| p.is_special) {
            if let (Some(s), Some(t)) = (vocab.src.get(&p.source[0]), vocab.tgt.get(&p.target[0])) {
                map.entry(s).or_default().insert(t);
            }
        }
        SpecialMap { map }
    }

    pub fn insert(&mut self, src: usize, tgt: usize) {
        self.map.entry(src).or_default().insert(tgt);
    }

    pub fn targets(&self, src: usize) -> impl Iterator<Item = usize> + '_ {
        self.map.get(&src).into_iter().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Set of target ids the output distribution may put mass on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabMask {
    allowed: Vec<bool>,
}

impl VocabMask {
    pub fn all(size: usize) -> Self {
        VocabMask {
            allowed: vec![true; size],
        }
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn contains(&self, id: usize) -> bool {
        self.allowed.get(id).copied().unwrap_or(false)
    }

    pub fn ids(&self) -> BTreeSet<usize> {
        self.allowed
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `V1 ∪ V2`: the reserved symbols and `v1_size` most frequent target
/// words, plus every special-pair translation of a word in `source`.
pub fn limited_vocab(source: &[usize], vocab: &Vocabulary, specials: &SpecialMap) -> VocabMask {
    let size = vocab.tgt.len();
    let mut allowed = vec![false; size];
    let v1_end = (RESERVED + vocab.v1_size).min(size);
    allowed[..v1_end].iter_mut().for_each(|a| *a = true);
    for &s in source {
        for t in specials.targets(s) {
            if t < size {
                allowed[t] = true;
            }
        }
    }
    VocabMask { allowed }
}
