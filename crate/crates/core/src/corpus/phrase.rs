use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A source/target phrase pair with its translation probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhrasePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub prob: f64,
    /// Both sides are a single word.
    pub is_special: bool,
}

impl PhrasePair {
    pub fn new(source: Vec<String>, target: Vec<String>, prob: f64) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Validation("phrase pair with an empty side".into()));
        }
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Validation(format!(
                "translation probability {prob} outside [0,1]"
            )));
        }
        let is_special = source.len() == 1 && target.len() == 1;
        Ok(PhrasePair {
            source,
            target,
            prob,
            is_special,
        })
    }

    pub fn from_strs(source: &str, target: &str, prob: f64) -> Result<Self> {
        PhrasePair::new(tokenize(source), tokenize(target), prob)
    }

    fn has_punctuation(&self) -> bool {
        self.source.iter().chain(&self.target).any(|t| is_punctuation(t))
    }
}

/// Whitespace tokenization; corpora arrive pre-tokenized.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

/// A token made up solely of Unicode punctuation characters.
pub fn is_punctuation(token: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\p{P}+$").expect("valid regex"))
        .is_match(token)
}

/// Parses `src ||| tgt ||| prob` lines. Blank lines are skipped; `origin`
/// only labels errors.
pub fn parse_phrase_table(text: &str, origin: &Path) -> Result<Vec<PhrasePair>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = raw.split("|||").map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 '|||'-separated fields, found {}",
                fields.len()
            )));
        }
        let source = tokenize(fields[0]);
        let target = tokenize(fields[1]);
        if source.is_empty() || target.is_empty() {
            return Err(parse_err("empty phrase".into()));
        }
        let prob: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("bad probability {:?}: {e}", fields[2])))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: probability {prob} outside [0,1]",
                origin.display()
            )));
        }
        pairs.push(PhrasePair::new(source, target, prob)?);
    }
    Ok(pairs)
}

pub fn load_phrase_table(path: impl AsRef<Path>) -> Result<Vec<PhrasePair>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_phrase_table(&text, path)
}

pub fn write_phrase_table(path: impl AsRef<Path>, pairs: &[PhrasePair]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in pairs {
        out.push_str(&format!(
            "{} ||| {} ||| {}\n",
            p.source.join(" "),
            p.target.join(" "),
            p.prob
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Thresholds for phrase filtering and pair extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    /// Max sentences considered per phrase pair, per side.
    pub n_cap: usize,
    /// Min aligned span pairs per emitted sentence pair.
    pub min_aligned: usize,
    /// Non-special phrases need strictly more tokens than this on both sides.
    pub min_phrase_len: usize,
    /// Translation probability must strictly exceed this.
    pub min_prob: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            n_cap: 7,
            min_aligned: 2,
            min_phrase_len: 3,
            min_prob: 0.5,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cap < 1 {
            return Err(Error::Validation("n_cap must be >= 1".into()));
        }
        if self.min_aligned < 1 {
            return Err(Error::Validation("min_aligned must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output of [`filter_phrase_pairs`]. The two lists are disjoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilteredPhrases {
    /// Multi-word pairs used for pair extraction.
    pub retained: Vec<PhrasePair>,
    /// Single-word pairs, used only to restrict the output vocabulary.
    pub specials: Vec<PhrasePair>,
}

pub fn filter_phrase_pairs(pairs: &[PhrasePair], cfg: &ExtractionConfig) -> FilteredPhrases {
    let mut out = FilteredPhrases::default();
    for p in pairs {
        if p.prob <= cfg.min_prob || p.has_punctuation() {
            continue;
        }
        if p.is_special {
            out.specials.push(p.clone());
        } else if p.source.len() > cfg.min_phrase_len && p.target.len() > cfg.min_phrase_len {
            out.retained.push(p.clone());
        }
    }
    out
}
