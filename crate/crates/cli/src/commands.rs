use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use panmt::checkpoint::Checkpoint;
use panmt::corpus::{
    extract_partially_aligned, filter_phrase_pairs, load_phrase_table, read_corpus, read_pairs_jsonl, write_corpus,
    write_pairs_jsonl, ExtractionConfig, Sentence,
};
use panmt::decoding::{translate_corpus, DecodeConfig};
use panmt::evaluation::{bleu, length_bucket_report, transpose_references};
use panmt::model::{random_gradient_check, GradCheckSetup, ModelConfig, ModelParams, Objective};
use panmt::toy::{gen_toy_task, ToyConfig};
use panmt::training::{self, encode_parallel, Agreement, TrainOutcome, TrainingConfig, TrainingExample};
use panmt::vocab::{SpecialMap, Vocabulary};
use panmt::Exec;

use crate::manifest::Recorder;

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GenToyArgs {
    /// Words per language (at least 10).
    #[arg(long, default_value_t = 50)]
    pub vocab_size: usize,
    /// Monolingual sentences per side.
    #[arg(long, default_value_t = 300)]
    pub sentences: usize,
    /// Sentences per topic and side; every topic shares two phrases.
    #[arg(long, default_value_t = 7)]
    pub topic_size: usize,
    #[arg(long, default_value_t = 200)]
    pub dev_size: usize,
    #[arg(long, default_value_t = 200)]
    pub test_size: usize,
    /// Extra parallel pairs for fine-tuning experiments.
    #[arg(long, default_value_t = 1000)]
    pub parallel_size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_toy(a: GenToyArgs) -> Result<ExitCode> {
    let rec = Recorder::new("gen-toy", &a, Some(a.seed))?;
    let cfg = ToyConfig {
        vocab_size: a.vocab_size,
        sentence_count: a.sentences,
        topic_size: a.topic_size,
        seed: a.seed,
        dev_size: a.dev_size,
        test_size: a.test_size,
        parallel_size: a.parallel_size,
        ..ToyConfig::default()
    };
    gen_toy_task(&cfg)?.write(&a.out)?;
    rec.finish(&a.out, &[&a.out])?;
    println!("wrote synthetic task to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct BuildCorpusArgs {
    #[arg(long, value_name = "FILE")]
    pub phrase_table: PathBuf,
    /// Source-language monolingual corpus.
    #[arg(long, value_name = "FILE")]
    pub src: PathBuf,
    /// Target-language monolingual corpus.
    #[arg(long, value_name = "FILE")]
    pub tgt: PathBuf,
    /// Output JSON Lines file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub n_cap: usize,
    #[arg(long, default_value_t = 2)]
    pub min_aligned: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_prob: f64,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
}

pub fn build_corpus(a: BuildCorpusArgs, exec: Exec) -> Result<ExitCode> {
    let mut rec = Recorder::new("build-corpus", &a, None)?;
    let cfg = ExtractionConfig {
        n_cap: a.n_cap,
        min_aligned: a.min_aligned,
        min_phrase_len: a.min_len,
        min_prob: a.min_prob,
    };
    let table = load_phrase_table(&a.phrase_table)?;
    let src = read_corpus(&a.src)?;
    let tgt = read_corpus(&a.tgt)?;
    for p in [&a.phrase_table, &a.src, &a.tgt] {
        rec.input(p);
    }
    let filtered = filter_phrase_pairs(&table, &cfg);
    let pairs = extract_partially_aligned(&src, &tgt, &filtered.retained, &cfg, a.shards, exec)?;
    write_pairs_jsonl(&a.out, &pairs)?;
    rec.finish(&a.out, &[&a.out])?;
    println!(
        "{} phrase pairs kept ({} single-word), {} sentence pairs written to {}",
        filtered.retained.len(),
        filtered.specials.len(),
        pairs.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn read_parallel(files: &[PathBuf]) -> Result<Vec<(Sentence, Sentence)>> {
    let [src, tgt] = files else {
        bail!("expected SRC,TGT but got {} paths", files.len());
    };
    let s = read_corpus(src)?;
    let t = read_corpus(tgt)?;
    ensure!(
        s.len() == t.len(),
        "{} has {} lines but {} has {}",
        src.display(),
        s.len(),
        tgt.display(),
        t.len()
    );
    Ok(s.into_iter().zip(t).collect())
}

fn write_training_log(out: &Path, outcome: &TrainOutcome) -> Result<PathBuf> {
    let path = out.join("train_log.jsonl");
    let mut text = String::new();
    for e in &outcome.log {
        let line = serde_json::to_string(e)?;
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Partially aligned pairs (JSON Lines).
    #[arg(
        long,
        value_name = "FILE",
        conflicts_with = "parallel",
        required_unless_present = "parallel"
    )]
    pub data: Option<PathBuf>,
    /// Parallel training text instead of partially aligned pairs.
    #[arg(long, value_name = "SRC,TGT", value_delimiter = ',', num_args = 1)]
    pub parallel: Option<Vec<PathBuf>>,
    /// Parallel dev set for perplexity, rate halving and model selection.
    #[arg(long, value_name = "SRC,TGT", value_delimiter = ',', num_args = 1)]
    pub dev: Option<Vec<PathBuf>>,
    #[arg(long, default_value = "mse")]
    pub agreement: Agreement,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Keep the learning rate fixed even when dev perplexity rises.
    #[arg(long)]
    pub no_halving: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Most frequent target words always allowed under a limited vocabulary.
    #[arg(long, default_value_t = 2000)]
    pub v1_size: usize,
    /// Cap on words per side; the rest map to <unk>.
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(a: TrainArgs, exec: Exec) -> Result<ExitCode> {
    let mut rec = Recorder::new("train", &a, Some(a.seed))?;
    let cfg = TrainingConfig {
        lambda: a.lambda,
        agreement: a.agreement,
        minibatch: a.batch,
        lr: a.lr,
        epochs: a.epochs,
        dropout: a.dropout,
        seed: a.seed,
        halve_on_dev_increase: !a.no_halving,
        clip_norm: a.clip_norm,
    };
    cfg.validate()?;

    let (vocab, examples) = if let Some(path) = &a.data {
        rec.input(path);
        let pairs = read_pairs_jsonl(path)?;
        let vocab = Vocabulary::build(
            pairs.iter().map(|p| (p.source.as_slice(), p.target.as_slice())),
            a.max_vocab,
            a.v1_size,
        );
        let ex: Vec<TrainingExample> = pairs.iter().map(|p| TrainingExample::partial(p, &vocab)).collect();
        (vocab, ex)
    } else {
        let files = a.parallel.as_deref().unwrap_or_default();
        files.iter().for_each(|p| rec.input(p));
        let pairs = read_parallel(files)?;
        let vocab = Vocabulary::build(
            pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())),
            a.max_vocab,
            a.v1_size,
        );
        (vocab.clone(), encode_parallel(&pairs, &vocab))
    };
    let dev = match &a.dev {
        Some(files) => {
            files.iter().for_each(|p| rec.input(p));
            encode_parallel(&read_parallel(files)?, &vocab)
        }
        None => Vec::new(),
    };

    let model = ModelConfig::new(vocab.src.len(), vocab.tgt.len(), a.hidden, a.layers);
    let params = ModelParams::init(model, a.seed)?;
    let outcome = training::train(&examples, &dev, params, &cfg, exec)?;
    let ckpt = Checkpoint::new(outcome.best.clone(), vocab, Some(cfg))?;
    ckpt.save(&a.out)?;
    write_training_log(&a.out, &outcome)?;
    rec.finish(&a.out, &[&a.out])?;
    eprintln!(
        "trained on {} examples; kept epoch {:?}; checkpoint in {}",
        examples.len(),
        outcome.best_epoch,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct FineTuneArgs {
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "SRC,TGT", value_delimiter = ',', num_args = 1, required = true)]
    pub parallel: Vec<PathBuf>,
    #[arg(long, value_name = "SRC,TGT", value_delimiter = ',', num_args = 1)]
    pub dev: Option<Vec<PathBuf>>,
    /// Defaults to the checkpoint's training value, as do the flags below.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fine_tune(a: FineTuneArgs, exec: Exec) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let base = ckpt.training.unwrap_or_default();
    let cfg = TrainingConfig {
        lr: a.lr.unwrap_or(base.lr),
        epochs: a.epochs.unwrap_or(base.epochs),
        minibatch: a.batch.unwrap_or(base.minibatch),
        dropout: a.dropout.unwrap_or(base.dropout),
        seed: a.seed.unwrap_or(base.seed),
        ..base
    };
    let mut rec = Recorder::new("fine-tune", &(&a, &cfg), Some(cfg.seed))?;
    rec.input(&a.ckpt);
    a.parallel.iter().for_each(|p| rec.input(p));
    let parallel = read_parallel(&a.parallel)?;
    let dev = match &a.dev {
        Some(files) => {
            files.iter().for_each(|p| rec.input(p));
            read_parallel(files)?
        }
        None => Vec::new(),
    };
    let outcome = training::fine_tune(ckpt.params, &ckpt.vocab, &parallel, &dev, &cfg, exec)?;
    Checkpoint::new(outcome.best.clone(), ckpt.vocab, Some(cfg))?.save(&a.out)?;
    write_training_log(&a.out, &outcome)?;
    rec.finish(&a.out, &[&a.out])?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct TranslateArgs {
    #[arg(long, value_name = "DIR")]
    pub ckpt: PathBuf,
    /// Tokenized source text, one sentence per line.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub beam: usize,
    /// Restrict output words to frequent words plus single-word translations
    /// of the source.
    #[arg(long)]
    pub limited_vocab: bool,
    /// Source of single-word translations for --limited-vocab.
    #[arg(long, value_name = "FILE")]
    pub phrase_table: Option<PathBuf>,
    /// Single-word pairs need a probability above this.
    #[arg(long, default_value_t = 0.5)]
    pub min_prob: f64,
    /// Output length cap; defaults to twice the source length plus 10.
    #[arg(long)]
    pub max_len: Option<usize>,
}

pub fn translate(a: TranslateArgs, exec: Exec) -> Result<ExitCode> {
    let mut rec = Recorder::new("translate", &a, None)?;
    rec.input(&a.ckpt);
    rec.input(&a.input);
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let specials = match &a.phrase_table {
        Some(path) => {
            rec.input(path);
            let cfg = ExtractionConfig {
                min_prob: a.min_prob,
                ..ExtractionConfig::default()
            };
            let f = filter_phrase_pairs(&load_phrase_table(path)?, &cfg);
            SpecialMap::from_pairs(&f.specials, &ckpt.vocab)
        }
        None => SpecialMap::default(),
    };
    let cfg = DecodeConfig {
        beam: a.beam,
        limited_vocab: a.limited_vocab,
        max_len: a.max_len,
    };
    let sources = read_corpus(&a.input)?;
    let hyps = translate_corpus(&sources, &ckpt.params, &ckpt.vocab, &specials, &cfg, exec)?;
    write_corpus(&a.out, &hyps)?;
    rec.finish(&a.out, &[&a.out])?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub hyp: PathBuf,
    /// One or more reference files, line-aligned with the hypotheses.
    #[arg(
        long,
        value_name = "REF[,REF...]",
        value_delimiter = ',',
        num_args = 1,
        required = true
    )]
    pub refs: Vec<PathBuf>,
    /// Add-one smoothing of 2- to 4-gram precisions.
    #[arg(long)]
    pub smooth: bool,
    /// Also score by length bucket; boundaries are exclusive upper bounds.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub buckets: Option<Vec<usize>>,
    /// Source file whose lengths define buckets; the first reference otherwise.
    #[arg(long, value_name = "FILE")]
    pub src: Option<PathBuf>,
    /// Where to write the JSON report; defaults to HYP.bleu.json.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvaluationOutput {
    corpus: panmt::evaluation::BleuReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    buckets: Option<Vec<panmt::evaluation::BucketReport>>,
}

pub fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let mut rec = Recorder::new("evaluate", &a, None)?;
    rec.input(&a.hyp);
    let hyps = read_corpus(&a.hyp)?;
    let mut sets = Vec::new();
    for r in &a.refs {
        rec.input(r);
        sets.push(read_corpus(r)?);
    }
    let first_ref = sets[0].clone();
    let refs = transpose_references(sets)?;
    let corpus = bleu(&hyps, &refs, a.smooth)?;
    let buckets = match &a.buckets {
        Some(bounds) => {
            let lengths = match &a.src {
                Some(p) => {
                    rec.input(p);
                    read_corpus(p)?
                }
                None => first_ref,
            };
            Some(length_bucket_report(&hyps, &refs, &lengths, bounds, a.smooth)?)
        }
        None => None,
    };
    let report = EvaluationOutput { corpus, buckets };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    println!("{}", report.corpus);
    let out = a.out.clone().unwrap_or_else(|| {
        let mut name = a.hyp.file_name().unwrap_or_default().to_os_string();
        name.push(".bleu.json");
        a.hyp.with_file_name(name)
    });
    fs::write(&out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
    rec.finish(&out, &[&out])?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args, Serialize, Deserialize)]
pub struct GradCheckArgs {
    /// Hidden size.
    #[arg(long, default_value_t = 8)]
    pub dims: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Words per side, including the three reserved symbols.
    #[arg(long, default_value_t = 20)]
    pub vocab: usize,
    #[arg(long, default_value_t = 6)]
    pub src_len: usize,
    #[arg(long, default_value_t = 6)]
    pub tgt_len: usize,
    #[arg(long, default_value = "mse")]
    pub agreement: Agreement,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Pass when the largest relative error is below this.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the per-tensor report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

pub fn grad_check(a: GradCheckArgs) -> Result<ExitCode> {
    let rec = Recorder::new("grad-check", &a, Some(a.seed))?;
    let setup = GradCheckSetup {
        hidden: a.dims,
        layers: a.layers,
        vocab: a.vocab,
        src_len: a.src_len,
        tgt_len: a.tgt_len,
        objective: Objective {
            lambda: a.lambda,
            agreement: a.agreement,
        },
        seed: a.seed,
        eps: a.eps,
    };
    let report = random_gradient_check(&setup)?;
    for s in &report.slots {
        println!("{:<24} {:.3e}", s.name, s.max_rel_error);
    }
    println!(
        "max relative error: {:.3e} over {} parameters",
        report.max_rel_error, report.checked
    );
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        rec.finish(out, &[out])?;
    }
    Ok(if report.passes(a.tolerance) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
