use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use panmt::corpus::{extract_partially_aligned, filter_phrase_pairs, ExtractionConfig};
use panmt::decoding::{translate_corpus, DecodeConfig};
use panmt::model::{ModelConfig, ModelParams};
use panmt::toy::{gen_toy_task, ToyConfig};
use panmt::training::{train, TrainingConfig, TrainingExample};
use panmt::vocab::{SpecialMap, Vocabulary};
use panmt::Exec;

const MODES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn benches(c: &mut Criterion) {
    let task = gen_toy_task(&ToyConfig::default()).expect("toy task");
    let ecfg = ExtractionConfig::default();
    let phrases = filter_phrase_pairs(&task.phrase_table, &ecfg);
    let pairs = extract_partially_aligned(
        &task.src_mono,
        &task.tgt_mono,
        &phrases.retained,
        &ecfg,
        4,
        Exec::Parallel,
    )
    .expect("extraction");
    let vocab = Vocabulary::build(
        pairs.iter().map(|p| (p.source.as_slice(), p.target.as_slice())),
        None,
        5,
    );
    let specials = SpecialMap::from_pairs(&phrases.specials, &vocab);
    let examples: Vec<TrainingExample> = pairs
        .iter()
        .take(64)
        .map(|p| TrainingExample::partial(p, &vocab))
        .collect();
    let params = ModelParams::init(ModelConfig::new(vocab.src.len(), vocab.tgt.len(), 32, 2), 1).expect("model");
    let sources: Vec<_> = task.test.iter().take(16).map(|(s, _)| s.clone()).collect();

    let mut group = c.benchmark_group("extract");
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| extract_partially_aligned(&task.src_mono, &task.tgt_mono, &phrases.retained, &ecfg, 4, exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    let cfg = TrainingConfig {
        epochs: 1,
        lr: 1.0,
        ..Default::default()
    };
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| train(&examples, &[], black_box(params.clone()), &cfg, exec))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("translate");
    group.sample_size(10);
    let decode = DecodeConfig {
        beam: 4,
        ..Default::default()
    };
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| translate_corpus(&sources, &params, &vocab, &specials, &decode, exec))
        });
    }
    group.finish();
}

criterion_group!(parallel_vs_sequential, benches);
criterion_main!(parallel_vs_sequential);
