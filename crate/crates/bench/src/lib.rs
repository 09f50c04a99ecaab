//! Shared fixtures for the benchmarks.

use hrnn_core::corpus::{synth_corpus, Corpus, SynthSpec};
use hrnn_core::training::{ChannelSpec, ModelConfig, ModelParams};
use hrnn_core::RngState;

pub fn bench_corpus() -> Corpus {
    synth_corpus(&SynthSpec {
        videos: 8,
        sentences_per_video: 3,
        activities: 6,
        feature_dim: 8,
        noise_sigma: 0.05,
        ambiguity: false,
        seed: 1,
    })
    .expect("valid spec")
}

pub fn bench_model(corpus: &Corpus, hierarchical: bool) -> ModelParams {
    let channels = corpus.records[0]
        .channels
        .iter()
        .map(|(name, f)| ChannelSpec {
            name: name.clone(),
            dim: f.dim,
        })
        .collect();
    let config = ModelConfig::desk(channels, corpus.vocab.size());
    let mut rng = RngState::new(7);
    ModelParams::init(&config, hierarchical, &mut rng).expect("valid config")
}
