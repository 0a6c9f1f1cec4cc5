//! Mining partially aligned sentence pairs from two monolingual corpora
//! and a phrase table.

mod extract;
mod index;
mod phrase;

use std::path::Path;

pub use extract::{
    extract_partially_aligned, pair_from_json, pair_to_json, read_pairs_jsonl, supervision_matrix, write_pairs_jsonl,
    PartiallyAlignedPair, SpanPair, SupervisionMatrix,
};
pub use index::{find_leftmost, Occurrence, PhraseIndex, Sentence, Span};
pub use phrase::{
    filter_phrase_pairs, is_punctuation, load_phrase_table, parse_phrase_table, tokenize, write_phrase_table,
    ExtractionConfig, FilteredPhrases, PhrasePair,
};

use crate::error::{Error, Result};

/// Reads a tokenized corpus, one sentence per line.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

pub fn write_corpus(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
