//! Synthetic translation task used for end-to-end runs.
//!
//! Source words come in three classes: function words (F), modifiers (A)
//! and heads (N). Sentences are sequences of chunks matching `F? A{0,2} N`,
//! at most three words each. Translation maps every word through a fixed
//! bijective lexicon and moves each chunk's head in front of its modifiers
//! (`A1 A2 N` becomes `n a1 a2`), so reordering never crosses a three-word
//! window. Phrases are pairs of chunks. Every phrase belongs to one topic,
//! and every sentence of a topic contains the topic's phrases in a fixed
//! order with random filler chunks around them, which is what lets pair
//! extraction find matches. Monolingual sides draw independent sentences
//! from the same topics; parallel sets draw fresh sentences from random
//! topics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, write_phrase_table, PhrasePair, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Words per language.
    pub vocab_size: usize,
    /// Monolingual sentences per side.
    pub sentence_count: usize,
    pub seed: u64,
    pub phrases_per_topic: usize,
    /// Sentences per topic and side; keep at or below the extraction cap.
    pub topic_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub parallel_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 50,
            sentence_count: 300,
            seed: 1,
            phrases_per_topic: 2,
            topic_size: 7,
            dev_size: 200,
            test_size: 200,
            parallel_size: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Function,
    Modifier,
    Head,
}

/// The word classes and bijective lexicon of a generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    classes: Vec<Class>,
    /// Source word `i` translates to target word `map[i]`.
    map: Vec<usize>,
}

fn src_word(i: usize) -> String {
    format!("s{i}")
}

fn tgt_word(i: usize) -> String {
    format!("t{i}")
}

impl Lexicon {
    fn generate(vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let n_f = (vocab_size / 10).max(1);
        let n_a = vocab_size * 3 / 10;
        let mut classes: Vec<Class> = (0..vocab_size)
            .map(|i| match i {
                i if i < n_f => Class::Function,
                i if i < n_f + n_a => Class::Modifier,
                _ => Class::Head,
            })
            .collect();
        classes.shuffle(rng);
        let mut map: Vec<usize> = (0..vocab_size).collect();
        map.shuffle(rng);
        Lexicon { classes, map }
    }

    pub fn vocab_size(&self) -> usize {
        self.map.len()
    }

    fn of_class(&self, c: Class) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i] == c).collect()
    }

    fn index(&self, word: &str) -> Option<usize> {
        let i: usize = word.strip_prefix('s')?.parse().ok()?;
        (i < self.map.len()).then_some(i)
    }

    /// Translates a well-formed source chunk sequence; `None` for unknown
    /// words or a sequence that does not end in a head word.
    pub fn translate(&self, sentence: &[String]) -> Option<Sentence> {
        let ids: Vec<usize> = sentence.iter().map(|w| self.index(w)).collect::<Option<_>>()?;
        let mut out = Vec::with_capacity(ids.len());
        let mut chunk: Vec<usize> = Vec::new();
        for i in ids {
            chunk.push(i);
            if self.classes[i] == Class::Head {
                out.extend(self.translate_chunk(&chunk));
                chunk.clear();
            }
        }
        chunk.is_empty().then_some(out)
    }

    fn translate_chunk(&self, chunk: &[usize]) -> Vec<String> {
        let (head, rest) = chunk.split_last().expect("chunk ends in a head");
        let f = rest.iter().take_while(|&&i| self.classes[i] == Class::Function).count();
        let order = rest[..f].iter().chain(std::iter::once(head)).chain(&rest[f..]);
        order.map(|&i| tgt_word(self.map[i])).collect()
    }

    /// Single-word lexicon entries.
    pub fn word_pairs(&self) -> Vec<PhrasePair> {
        (0..self.map.len())
            .map(|i| PhrasePair::new(vec![src_word(i)], vec![tgt_word(self.map[i])], 1.0).expect("non-empty"))
            .collect()
    }
}

/// A generated task. Parallel sets hold `(source, reference)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub lexicon: Lexicon,
    pub src_mono: Vec<Sentence>,
    pub tgt_mono: Vec<Sentence>,
    pub phrase_table: Vec<PhrasePair>,
    pub dev: Vec<(Sentence, Sentence)>,
    pub test: Vec<(Sentence, Sentence)>,
    pub parallel: Vec<(Sentence, Sentence)>,
}

struct Generator<'a> {
    lex: &'a Lexicon,
    f: Vec<usize>,
    a: Vec<usize>,
    n: Vec<usize>,
}

impl Generator<'_> {
    fn chunk(&self, rng: &mut ChaCha8Rng, min_len: usize) -> Vec<usize> {
        let len = rng.gen_range(min_len..=3);
        let mut c = Vec::with_capacity(len);
        if len >= 2 && rng.gen_bool(0.3) {
            c.push(*self.f.choose(rng).expect("function words"));
        }
        while c.len() < len - 1 {
            c.push(*self.a.choose(rng).expect("modifiers"));
        }
        c.push(*self.n.choose(rng).expect("heads"));
        c
    }

    fn phrase(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut p = self.chunk(rng, 2);
        p.extend(self.chunk(rng, 2));
        p
    }

    /// The given phrases in order, with one or two filler chunks inserted
    /// at random gaps.
    fn sentence(&self, phrases: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Sentence {
        let mut parts: Vec<Vec<usize>> = phrases.to_vec();
        for _ in 0..rng.gen_range(1..=2) {
            let at = rng.gen_range(0..=parts.len());
            parts.insert(at, self.chunk(rng, 1));
        }
        parts.concat().into_iter().map(src_word).collect()
    }

    fn translate(&self, s: &[String]) -> Sentence {
        self.lex.translate(s).expect("generated sentences are well formed")
    }
}

/// Generates a task deterministically from `cfg.seed`.
pub fn gen_toy_task(cfg: &ToyConfig) -> Result<ToyTask> {
    if cfg.vocab_size < 10 {
        return Err(Error::Validation(format!("vocab_size {} is below 10", cfg.vocab_size)));
    }
    if cfg.phrases_per_topic < 1 || cfg.topic_size < 1 {
        return Err(Error::Validation(
            "topics need at least one phrase and one sentence".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lex = Lexicon::generate(cfg.vocab_size, &mut rng);
    let g = Generator {
        lex: &lex,
        f: lex.of_class(Class::Function),
        a: lex.of_class(Class::Modifier),
        n: lex.of_class(Class::Head),
    };

    let topics = cfg.sentence_count.div_ceil(cfg.topic_size);
    let needed = topics * cfg.phrases_per_topic;
    let mut inventory: Vec<Vec<usize>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for _ in 0..100 * needed {
        if inventory.len() == needed {
            break;
        }
        let p = g.phrase(&mut rng);
        if seen.insert(p.clone()) {
            inventory.push(p);
        }
    }
    if inventory.len() < needed {
        return Err(Error::Validation(format!(
            "{} words cannot supply {needed} distinct phrases",
            cfg.vocab_size
        )));
    }

    let topic = |t: usize| &inventory[t * cfg.phrases_per_topic..(t + 1) * cfg.phrases_per_topic];
    let mut src_mono = Vec::with_capacity(cfg.sentence_count);
    let mut tgt_mono = Vec::with_capacity(cfg.sentence_count);
    for t in 0..topics {
        let n = cfg.topic_size.min(cfg.sentence_count - src_mono.len());
        for _ in 0..n {
            src_mono.push(g.sentence(topic(t), &mut rng));
            let hidden = g.sentence(topic(t), &mut rng);
            tgt_mono.push(g.translate(&hidden));
        }
    }

    let mut phrase_table: Vec<PhrasePair> = inventory
        .iter()
        .map(|p| {
            let src: Sentence = p.iter().map(|&i| src_word(i)).collect();
            let tgt = g.translate(&src);
            PhrasePair::new(src, tgt, 1.0).expect("non-empty phrase")
        })
        .collect();
    phrase_table.extend(lex.word_pairs());

    let parallel_set = |size: usize, rng: &mut ChaCha8Rng| -> Vec<(Sentence, Sentence)> {
        (0..size)
            .map(|_| {
                let s = g.sentence(topic(rng.gen_range(0..topics)), rng);
                let t = g.translate(&s);
                (s, t)
            })
            .collect()
    };
    let dev = parallel_set(cfg.dev_size, &mut rng);
    let test = parallel_set(cfg.test_size, &mut rng);
    let parallel = parallel_set(cfg.parallel_size, &mut rng);

    Ok(ToyTask {
        lexicon: lex.clone(),
        src_mono,
        tgt_mono,
        phrase_table,
        dev,
        test,
        parallel,
    })
}

/// File names written by [`ToyTask::write`].
pub mod files {
    pub const SRC_MONO: &str = "mono.src";
    pub const TGT_MONO: &str = "mono.tgt";
    pub const PHRASE_TABLE: &str = "phrases.txt";
    pub const DEV_SRC: &str = "dev.src";
    pub const DEV_TGT: &str = "dev.tgt";
    pub const TEST_SRC: &str = "test.src";
    pub const TEST_TGT: &str = "test.tgt";
    pub const PARALLEL_SRC: &str = "parallel.src";
    pub const PARALLEL_TGT: &str = "parallel.tgt";
}

impl ToyTask {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(dir.join(files::SRC_MONO), &self.src_mono)?;
        write_corpus(dir.join(files::TGT_MONO), &self.tgt_mono)?;
        write_phrase_table(dir.join(files::PHRASE_TABLE), &self.phrase_table)?;
        for (set, s, t) in [
            (&self.dev, files::DEV_SRC, files::DEV_TGT),
            (&self.test, files::TEST_SRC, files::TEST_TGT),
            (&self.parallel, files::PARALLEL_SRC, files::PARALLEL_TGT),
        ] {
            let (src, tgt): (Vec<Sentence>, Vec<Sentence>) = set.iter().cloned().unzip();
            write_corpus(dir.join(s), &src)?;
            write_corpus(dir.join(t), &tgt)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_partially_aligned, filter_phrase_pairs, tokenize, ExtractionConfig};
    use crate::exec::Exec;

    fn small() -> ToyConfig {
        ToyConfig {
            sentence_count: 100,
            dev_size: 10,
            test_size: 10,
            parallel_size: 20,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_toy_task(&small()).unwrap().write(a.path()).unwrap();
        gen_toy_task(&small()).unwrap().write(b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert_eq!(names.len(), 9);
        for n in names {
            assert_eq!(
                std::fs::read(a.path().join(&n)).unwrap(),
                std::fs::read(b.path().join(&n)).unwrap()
            );
        }
        let other = gen_toy_task(&ToyConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(other.src_mono, gen_toy_task(&small()).unwrap().src_mono);
    }

    #[test]
    fn phrase_pairs_are_true_translations() {
        let task = gen_toy_task(&small()).unwrap();
        for p in &task.phrase_table {
            if p.is_special {
                let i: usize = p.source[0][1..].parse().unwrap();
                assert_eq!(p.target[0], tgt_word(task.lexicon.map[i]));
            } else {
                assert_eq!(task.lexicon.translate(&p.source).as_ref(), Some(&p.target));
            }
        }
        for (s, t) in task.dev.iter().chain(&task.parallel) {
            assert_eq!(task.lexicon.translate(s).as_ref(), Some(t));
        }
    }

    #[test]
    fn reordering_stays_within_three_words() {
        let task = gen_toy_task(&small()).unwrap();
        let lex = &task.lexicon;
        for (s, t) in &task.test {
            assert_eq!(s.len(), t.len());
            for (j, w) in s.iter().enumerate() {
                let i: usize = w[1..].parse().unwrap();
                let pos = (j.saturating_sub(2)..(j + 3).min(t.len())).find(|&k| t[k] == tgt_word(lex.map[i]));
                assert!(pos.is_some(), "{s:?} -> {t:?}");
            }
        }
        let reordered = task.test.iter().any(|(s, t)| {
            s.iter().zip(t).any(|(a, b)| {
                let i: usize = a[1..].parse().unwrap();
                *b != tgt_word(lex.map[i])
            })
        });
        assert!(reordered);
    }

    #[test]
    fn lexicon_rejects_malformed_input() {
        let task = gen_toy_task(&small()).unwrap();
        assert!(task.lexicon.translate(&tokenize("zz")).is_none());
        assert!(task.lexicon.translate(&tokenize("s999")).is_none());
        assert_eq!(task.lexicon.translate(&[]), Some(vec![]));
    }

    #[test]
    fn extraction_finds_pairs() {
        let task = gen_toy_task(&small()).unwrap();
        let cfg = ExtractionConfig::default();
        let f = filter_phrase_pairs(&task.phrase_table, &cfg);
        assert_eq!(f.specials.len(), 50);
        let pairs =
            extract_partially_aligned(&task.src_mono, &task.tgt_mono, &f.retained, &cfg, 1, Exec::Sequential).unwrap();
        assert!(!pairs.is_empty());
        assert!(pairs.iter().all(|p| p.aligned.len() >= 2));
    }

    #[test]
    fn rejects_tiny_vocabulary() {
        assert!(gen_toy_task(&ToyConfig {
            vocab_size: 9,
            ..small()
        })
        .is_err());
        assert!(gen_toy_task(&ToyConfig {
            vocab_size: 10,
            ..small()
        })
        .is_ok());
    }
}
