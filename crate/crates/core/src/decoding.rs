//! Beam search with the context gate always open and an optional
//! per-sentence output mask.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{decoder_step, encode, init_decoder_state, DecoderState, EncoderStates, Gate, ModelParams};
use crate::tensor::masked_log_softmax;
use crate::vocab::{limited_vocab, SpecialMap, VocabMask, Vocabulary, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Restrict every step's output distribution to the limited vocabulary.
    pub limited_vocab: bool,
    /// Overrides the default cap of `2 * source_len + 10` tokens.
    pub max_len: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 12,
            limited_vocab: false,
            max_len: None,
        }
    }
}

/// A partial or finished translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids; ends with the end symbol iff finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
}

impl Hypothesis {
    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Log-probability per emitted token (the end symbol counts).
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    /// Emitted words without the end symbol.
    pub fn words(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

pub fn default_max_len(source_len: usize) -> usize {
    2 * source_len + 10
}

fn step_log_probs(
    h: &Hypothesis,
    enc: &EncoderStates,
    params: &ModelParams,
    mask: Option<&VocabMask>,
) -> Result<(Vec<f64>, DecoderState)> {
    let prev = h.tokens.last().copied().unwrap_or(BOS);
    let out = decoder_step(prev, &h.state, enc, Gate::Open, params, None)?;
    let lp = match mask {
        Some(m) => masked_log_softmax(&out.logits, m.allowed()),
        None => out.log_probs,
    };
    Ok((lp, out.state))
}

fn by_score(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Beam search over `source` ids. Finished hypotheses compete on
/// [`Hypothesis::score`]; ties go to the earlier-found hypothesis.
pub fn beam_search(
    source: &[usize],
    params: &ModelParams,
    vocab: &Vocabulary,
    specials: &SpecialMap,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Validation("beam size must be >= 1".into()));
    }
    let enc = encode(source, params, None)?;
    let mask = cfg.limited_vocab.then(|| limited_vocab(source, vocab, specials));
    let max_len = cfg.max_len.unwrap_or_else(|| default_max_len(source.len()));

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init_decoder_state(params.config.layers, params.config.hidden),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..=max_len {
        if live.is_empty() || finished.len() >= cfg.beam {
            break;
        }
        let at_cap = live[0].tokens.len() == max_len;
        let mut expanded = Vec::with_capacity(live.len());
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (k, h) in live.iter().enumerate() {
            let (lp, state) = step_log_probs(h, &enc, params, mask.as_ref())?;
            for (w, &l) in lp.iter().enumerate() {
                // the cap forces the end symbol
                if l.is_finite() && (!at_cap || w == EOS) {
                    candidates.push((h.log_prob + l, k, w));
                }
            }
            expanded.push(state);
        }
        candidates.sort_by(|a, b| by_score(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for &(lp, k, w) in candidates.iter().take(cfg.beam) {
            let mut tokens = live[k].tokens.clone();
            tokens.push(w);
            let h = Hypothesis {
                tokens,
                log_prob: lp,
                state: expanded[k].clone(),
            };
            if w == EOS {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
    }

    let pool = if finished.is_empty() { live } else { finished };
    pool.into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.score().total_cmp(&b.score()).then(j.cmp(i)))
        .map(|(_, h)| h)
        .ok_or_else(|| Error::Validation("beam search produced no hypothesis".into()))
}

/// Argmax decoding; the same result as a beam of one.
pub fn greedy(source: &[usize], params: &ModelParams, max_len: Option<usize>) -> Result<Vec<usize>> {
    let enc = encode(source, params, None)?;
    let max_len = max_len.unwrap_or_else(|| default_max_len(source.len()));
    let mut state = init_decoder_state(params.config.layers, params.config.hidden);
    let mut prev = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let step = decoder_step(prev, &state, &enc, Gate::Open, params, None)?;
        let best = step
            .log_probs
            .iter()
            .enumerate()
            .fold(
                (EOS, f64::NEG_INFINITY),
                |acc, (w, &l)| if l > acc.1 { (w, l) } else { acc },
            )
            .0;
        if best == EOS {
            break;
        }
        out.push(best);
        prev = best;
        state = step.state;
    }
    Ok(out)
}

/// Translates tokenized sentences, keeping input order. Empty inputs
/// yield empty outputs.
pub fn translate_corpus(
    sources: &[Sentence],
    params: &ModelParams,
    vocab: &Vocabulary,
    specials: &SpecialMap,
    cfg: &DecodeConfig,
    exec: Exec,
) -> Result<Vec<Sentence>> {
    exec.map(sources, |s| {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        let ids = vocab.src.encode(s);
        let h = beam_search(&ids, params, vocab, specials, cfg)?;
        Ok(vocab.tgt.decode(h.words()))
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::vocab::TokenTable;

    fn vocab(n: usize, v1: usize) -> Vocabulary {
        let words: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
        let t = TokenTable::build([words.as_slice()], None);
        Vocabulary {
            src: t.clone(),
            tgt: t,
            v1_size: v1,
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let v = vocab(12, 100);
        for seed in 0..20 {
            let p = ModelParams::init_with(ModelConfig::new(15, 15, 6, 2), seed, 0.8).unwrap();
            let src = vec![3 + (seed as usize % 7), 4, 9, 5];
            let cfg = DecodeConfig {
                beam: 1,
                ..Default::default()
            };
            let h = beam_search(&src, &p, &v, &SpecialMap::default(), &cfg).unwrap();
            assert_eq!(h.words(), greedy(&src, &p, None).unwrap().as_slice(), "seed {seed}");
        }
    }

    #[test]
    fn respects_length_cap() {
        let v = vocab(12, 100);
        let mut p = ModelParams::init(ModelConfig::new(15, 15, 4, 1), 3).unwrap();
        // make the end symbol unreachable in practice
        p.out_b.data_mut()[EOS] = -50.0;
        p.out_b.data_mut()[7] = 10.0;
        let cfg = DecodeConfig {
            beam: 3,
            max_len: Some(6),
            ..Default::default()
        };
        let h = beam_search(&[3, 4], &p, &v, &SpecialMap::default(), &cfg).unwrap();
        assert_eq!(h.words(), &[7; 6]);
        assert!(h.is_finished());
        assert_eq!(greedy(&[3, 4], &p, Some(6)).unwrap(), vec![7; 6]);
    }

    #[test]
    fn limited_vocab_restricts_output() {
        let v = vocab(12, 1);
        let mut specials = SpecialMap::default();
        specials.insert(5, 9);
        for seed in 0..10 {
            let p = ModelParams::init_with(ModelConfig::new(15, 15, 6, 1), seed, 1.0).unwrap();
            let src = vec![5, 6, 7];
            let cfg = DecodeConfig {
                beam: 4,
                limited_vocab: true,
                max_len: None,
            };
            let h = beam_search(&src, &p, &v, &specials, &cfg).unwrap();
            let allowed = limited_vocab(&src, &v, &specials);
            assert!(h.tokens.iter().all(|&w| allowed.contains(w)), "{:?}", h.tokens);
        }
    }

    #[test]
    fn rejects_zero_beam() {
        let v = vocab(4, 4);
        let p = ModelParams::init(ModelConfig::new(7, 7, 4, 1), 1).unwrap();
        let cfg = DecodeConfig {
            beam: 0,
            ..Default::default()
        };
        assert!(beam_search(&[3], &p, &v, &SpecialMap::default(), &cfg).is_err());
    }

    #[test]
    fn corpus_translation_is_ordered_and_deterministic() {
        let v = vocab(10, 100);
        let p = ModelParams::init_with(ModelConfig::new(13, 13, 6, 1), 4, 0.8).unwrap();
        let sents: Vec<Sentence> = ["w01 w02 w03", "", "w04 zzz", "w05"]
            .iter()
            .map(|s| crate::corpus::tokenize(s))
            .collect();
        let cfg = DecodeConfig {
            beam: 3,
            ..Default::default()
        };
        let a = translate_corpus(&sents, &p, &v, &SpecialMap::default(), &cfg, Exec::Parallel).unwrap();
        let b = translate_corpus(&sents, &p, &v, &SpecialMap::default(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a[1].is_empty());
        assert!(
            translate_corpus(&[], &p, &v, &SpecialMap::default(), &cfg, Exec::Parallel)
                .unwrap()
                .is_empty()
        );
    }
}
