use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use hrnn_bench::{bench_corpus, bench_model};
use hrnn_core::corpus::bleu;
use hrnn_core::decoding::{beam_search_sentence, BeamConfig};
use hrnn_core::layers::Mode;
use hrnn_core::sentence_generator::{init_state, step};
use hrnn_core::training::{backprop, TrainMode};
use hrnn_core::RngState;

fn bench_gru_word_step(c: &mut Criterion) {
    let corpus = bench_corpus();
    let params = bench_model(&corpus, false);
    let pools = corpus.records[0].pools(Some((0, 3))).unwrap();
    let state = init_state(params.sentence_gen.hidden_dim(), None).unwrap();
    let mut rng = RngState::new(0);
    c.bench_function("sentence_step", |b| {
        b.iter(|| {
            let (lp, _, _) = step(
                black_box(&params.sentence_gen),
                black_box(&state),
                2,
                &pools,
                Mode::Eval,
                0.0,
                &mut rng,
            )
            .unwrap();
            lp
        })
    });
}

fn bench_paragraph_backprop(c: &mut Criterion) {
    let corpus = bench_corpus();
    let params = bench_model(&corpus, true);
    let record = &corpus.records[0];
    c.bench_function("paragraph_backprop_hier", |b| {
        b.iter(|| {
            let mut rng = RngState::new(0);
            backprop(
                black_box(&params),
                black_box(record),
                TrainMode::Hier,
                Mode::Eval,
                0.0,
                &mut rng,
                true,
            )
            .unwrap()
            .0
            .numerator
        })
    });
}

fn bench_beam_search(c: &mut Criterion) {
    let corpus = bench_corpus();
    let params = bench_model(&corpus, false);
    let pools = corpus.records[0].pools(Some((0, 3))).unwrap();
    let config = BeamConfig {
        max_sentence_len: 10,
        ..BeamConfig::default()
    };
    c.bench_function("beam_search_l5_j5", |b| {
        b.iter(|| {
            beam_search_sentence(black_box(&params.sentence_gen), None, &pools, &config).unwrap()
        })
    });
}

fn bench_bleu(c: &mut Criterion) {
    let corpus = bench_corpus();
    let refs: Vec<Vec<Vec<String>>> = corpus
        .records
        .iter()
        .map(|r| {
            vec![r
                .sentences
                .iter()
                .flat_map(|s| s.tokens.iter().cloned())
                .collect()]
        })
        .collect();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    c.bench_function("bleu4_corpus", |b| {
        b.iter(|| bleu(black_box(&cands), black_box(&refs), 4).unwrap())
    });
}

criterion_group!(
    benches,
    bench_gru_word_step,
    bench_paragraph_backprop,
    bench_beam_search,
    bench_bleu
);
criterion_main!(benches);
