//! Acceptance suite. Each test prints one machine-readable pass/fail line
//! of the form `acceptance <n> <name>: PASS|FAIL` before asserting.

use hrnn_core::corpus::{
    bleu, synth_corpus, Corpus, SynthSpec, BOS_ID, EOS_ID,
};
use hrnn_core::decoding::{beam_search, BeamConfig, DecodeStrategy, ModelScorer};
use hrnn_core::layers::{attend, attention_scores, AttentionParams, Mode};
use hrnn_core::numerics::RngState;
use hrnn_core::sentence_generator::sentence_cost;
use hrnn_core::training::{
    corpus_perplexity, gradient_check, load_checkpoint, paragraph_forward, save_checkpoint, train,
    ChannelSpec, ModelConfig, ModelParams, RmspropState, TrainConfig, TrainMode,
};

fn verdict(n: usize, name: &str, ok: bool) {
    println!("acceptance {n} {name}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} ({name}) failed");
}

fn channel_specs(corpus: &Corpus) -> Vec<ChannelSpec> {
    corpus.records[0]
        .channels
        .iter()
        .map(|(name, f)| ChannelSpec {
            name: name.clone(),
            dim: f.dim,
        })
        .collect()
}

fn tiny_corpus(seed: u64) -> Corpus {
    synth_corpus(&SynthSpec {
        videos: 1,
        sentences_per_video: 2,
        activities: 3,
        feature_dim: 3,
        noise_sigma: 0.1,
        ambiguity: false,
        seed,
    })
    .unwrap()
}

fn tiny_config(corpus: &Corpus) -> ModelConfig {
    ModelConfig {
        d_e: 6,
        d_h: 6,
        d_m: 8,
        d_a: 4,
        d_s: 5,
        d_p: 5,
        channels: channel_specs(corpus),
        vocab_size: corpus.vocab.size(),
        softmax_bias: true,
    }
}

/// 1. Analytic BPTT vs central finite differences on the full hierarchical
/// model (2 channels, 2-sentence paragraph + EOP, dims <= 8, vocab <= 12),
/// 5 random seeds, every tensor under 1e-4 relative error.
#[test]
fn criterion_1_gradient_correctness() {
    let mut ok = true;
    for seed in 1..=5u64 {
        let corpus = tiny_corpus(seed);
        assert!(corpus.vocab.size() <= 12);
        let mut rng = RngState::new(seed);
        let mut params = ModelParams::init(&tiny_config(&corpus), true, &mut rng).unwrap();
        for (_, t) in params.tensors_mut() {
            *t = t.scale(5.0); // leave the near-linear region
        }
        let report =
            gradient_check(&params, &corpus.records[0], TrainMode::Hier, true, 1e-5).unwrap();
        if !report.passes(1e-4) {
            eprintln!("seed {seed}: max rel err {}", report.max_rel_err);
            ok = false;
        }
    }
    verdict(1, "gradient-correctness", ok);
}

/// 2. Attention weights over 1000 random (params, pool, state) triples:
/// nonnegative, sum to 1 within 1e-10, on every channel.
#[test]
fn criterion_2_attention_normalization() {
    let mut rng = RngState::new(2);
    let mut ok = true;
    for _ in 0..1000 {
        let d_a = 1 + rng.below(6);
        let d_h = 1 + rng.below(6);
        for _channel in 0..2 {
            let d_v = 1 + rng.below(5);
            let km = 1 + rng.below(8);
            let attn = AttentionParams::init(d_a, d_v, d_h, &mut rng, 1.0);
            let pool = rng.uniform_tensor(&[km, d_v], -3.0, 3.0);
            let h = rng.uniform_tensor(&[d_h], -3.0, 3.0);
            let (scores, _) = attention_scores(&attn, &pool, &h).unwrap();
            let (_, weights) = attend(&scores, &pool).unwrap();
            let sum = weights.sum();
            if (sum - 1.0).abs() > 1e-10 || weights.data().iter().any(|&w| w < 0.0) {
                ok = false;
            }
        }
    }
    verdict(2, "attention-normalization", ok);
}

/// 3. Beam search equals exhaustive enumeration (top-J by sentence cost,
/// tie order included) on 20 random models with vocab 5 and short length
/// caps, using a beam wide enough to hold every sequence.
#[test]
fn criterion_3_beam_search_oracle() {
    let max_len = 3usize;
    let vocab = 5usize;
    // sequences with interior length 0..=3 over 4 non-EOS words
    let total_sequences: usize = (0..=max_len).map(|k| 4usize.pow(k as u32)).sum();
    let config = BeamConfig {
        beam_width: total_sequences + 8,
        pool_size: 5,
        max_sentence_len: max_len,
        max_sentences: 15,
        prune: true,
    };
    let mut ok = true;
    for seed in 1..=20u64 {
        let corpus = tiny_corpus(seed);
        let mut config_model = tiny_config(&corpus);
        config_model.vocab_size = vocab;
        let mut rng = RngState::new(seed * 31);
        let mut params = ModelParams::init(&config_model, false, &mut rng).unwrap();
        for (_, t) in params.tensors_mut() {
            *t = t.scale(8.0);
        }
        let pools = corpus.records[0].pools(None).unwrap();
        let scorer = ModelScorer {
            params: &params.sentence_gen,
            pools: &pools,
            init_h: None,
        };
        let got = beam_search(&scorer, &config).unwrap();

        // exhaustive enumeration scored by the teacher-forced sentence cost
        let mut all: Vec<(Vec<usize>, f64)> = Vec::new();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(interior) = stack.pop() {
            let mut words = vec![BOS_ID];
            words.extend(&interior);
            words.push(EOS_ID);
            let (cost, _) = sentence_cost(&params.sentence_gen, None, &words, &pools).unwrap();
            all.push((words, cost));
            if interior.len() < max_len {
                for w in (0..vocab).filter(|&w| w != EOS_ID) {
                    let mut ext = interior.clone();
                    ext.push(w);
                    stack.push(ext);
                }
            }
        }
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.truncate(config.pool_size);

        if got.len() != all.len()
            || got
                .iter()
                .zip(&all)
                .any(|((gw, gc), (ww, wc))| gw != ww || gc != wc)
        {
            eprintln!("seed {seed}: beam pool diverged from enumeration");
            ok = false;
        }
    }
    verdict(3, "beam-search-oracle", ok);
}

/// 4. All-zero (bias-free) model: corpus perplexity is exactly ln(vocab)
/// within 1e-9 in every mode.
#[test]
fn criterion_4_uniform_model_analytic() {
    let corpus = synth_corpus(&SynthSpec {
        videos: 5,
        sentences_per_video: 3,
        activities: 4,
        feature_dim: 5,
        noise_sigma: 0.2,
        ambiguity: false,
        seed: 4,
    })
    .unwrap();
    let mut rng = RngState::new(4);
    let params = ModelParams::init(&tiny_config(&corpus), true, &mut rng)
        .unwrap()
        .zeros_like();
    let ln_n = (corpus.vocab.size() as f64).ln();
    let mut ok = true;
    for mode in [TrainMode::Hier, TrainMode::Sent, TrainMode::Cat] {
        let ppl = corpus_perplexity(&params, &corpus, mode).unwrap();
        if (ppl - ln_n).abs() > 1e-9 {
            eprintln!("{mode}: ppl {ppl} vs ln N {ln_n}");
            ok = false;
        }
    }
    verdict(4, "uniform-model-analytic", ok);
}

/// 5. Overfit reproduction: 30 videos x 3 sentences, vocab 24, zero noise,
/// desk dims, hier mode. Training perplexity < 0.15 nats/word and beam
/// decoding (L=J=5) reproduces >= 90% of training sentences token-exactly.
#[test]
fn criterion_5_overfit_reproduction() {
    let corpus = synth_corpus(&SynthSpec {
        videos: 30,
        sentences_per_video: 3,
        activities: 10,
        feature_dim: 12,
        noise_sigma: 0.0,
        ambiguity: false,
        seed: 1,
    })
    .unwrap();
    let config = ModelConfig::desk(channel_specs(&corpus), corpus.vocab.size());
    let cfg = TrainConfig {
        mode: TrainMode::Hier,
        epochs: 20,
        learning_rate: 2e-3,
        dropout_rate: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(cfg.seed);
    let mut params = ModelParams::init(&config, true, &mut rng).unwrap();
    let mut opt = RmspropState::new(&params);
    train(&mut params, &mut opt, &corpus, None, &cfg, |_| {}).unwrap();

    let ppl = corpus_perplexity(&params, &corpus, TrainMode::Hier).unwrap();
    let beam = BeamConfig {
        beam_width: 5,
        pool_size: 5,
        max_sentence_len: 8,
        max_sentences: 15,
        prune: true,
    };
    let mut exact = 0usize;
    let mut total = 0usize;
    for record in &corpus.records {
        let intervals: Vec<(usize, usize)> = record
            .sentences
            .iter()
            .map(|s| s.interval.unwrap())
            .collect();
        let out = hrnn_core::decoding::generate_paragraph(
            &params,
            record,
            TrainMode::Hier,
            Some(&intervals),
            &beam,
            DecodeStrategy::Beam,
        )
        .unwrap();
        for (cands, reference) in out.iter().zip(&record.sentences) {
            total += 1;
            if cands[0].0 == reference.word_ids {
                exact += 1;
            }
        }
    }
    let rate = exact as f64 / total as f64;
    println!("  overfit ppl={ppl:.4} reproduction={exact}/{total}");
    verdict(5, "overfit-reproduction", ppl < 0.15 && rate >= 0.90);
}

/// 6. Hierarchy ablation: on the ambiguity corpus with a 60/20 train/test
/// split and identical seeds/budgets, hier-mode held-out perplexity beats
/// sent mode by at least 0.1 nats/word.
#[test]
fn criterion_6_hierarchy_ablation() {
    let full = synth_corpus(&SynthSpec {
        videos: 80,
        sentences_per_video: 4,
        activities: 4,
        feature_dim: 6,
        noise_sigma: 0.0,
        ambiguity: true,
        seed: 6,
    })
    .unwrap();
    let mut train_corpus = full.clone();
    let test_records = train_corpus.records.split_off(60);
    let test_corpus = Corpus {
        records: test_records,
        ..full.clone()
    };

    let config = ModelConfig::desk(channel_specs(&full), full.vocab.size());
    let run = |mode: TrainMode| -> f64 {
        let cfg = TrainConfig {
            mode,
            epochs: 25,
            learning_rate: 2e-3,
            dropout_rate: 0.0,
            seed: 6,
            ..TrainConfig::default()
        };
        let mut rng = RngState::new(cfg.seed);
        let mut params = ModelParams::init(&config, mode.is_hierarchical(), &mut rng).unwrap();
        let mut opt = RmspropState::new(&params);
        train(&mut params, &mut opt, &train_corpus, None, &cfg, |_| {}).unwrap();
        corpus_perplexity(&params, &test_corpus, mode).unwrap()
    };
    let hier = run(TrainMode::Hier);
    let sent = run(TrainMode::Sent);
    println!("  ablation heldout: hier={hier:.4} sent={sent:.4} gap={:.4}", sent - hier);
    verdict(6, "hierarchy-ablation", sent - hier >= 0.1);
}

/// 7. Mode degeneracy: zeroed paragraph-generator parameters make the
/// hier-mode paragraph cost equal the sent-mode cost once the appended
/// EOP-sentence term is removed.
#[test]
fn criterion_7_mode_degeneracy() {
    let corpus = synth_corpus(&SynthSpec {
        videos: 4,
        sentences_per_video: 3,
        activities: 4,
        feature_dim: 5,
        noise_sigma: 0.1,
        ambiguity: false,
        seed: 7,
    })
    .unwrap();
    let mut rng = RngState::new(7);
    let mut params = ModelParams::init(&tiny_config(&corpus), true, &mut rng).unwrap();
    for (_, t) in params.tensors_mut() {
        *t = t.scale(5.0);
    }
    let zeroed_pg = params.paragraph_gen.as_ref().unwrap().zeros_like();
    params.paragraph_gen = Some(zeroed_pg);

    let mut ok = true;
    for record in &corpus.records {
        let mut rng = RngState::new(0);
        let hier =
            paragraph_forward(&params, record, TrainMode::Hier, Mode::Eval, 0.0, &mut rng)
                .unwrap();
        let sent =
            paragraph_forward(&params, record, TrainMode::Sent, Mode::Eval, 0.0, &mut rng)
                .unwrap();
        // the EOP sentence is scored like any first sentence from zero state
        // over whole-video features; recompute and strip its term
        let pools = record.pools(None).unwrap();
        let (eop_cost, _) =
            sentence_cost(&params.sentence_gen, None, &[BOS_ID, EOS_ID], &pools).unwrap();
        if ((hier.numerator - eop_cost) - sent.numerator).abs() > 1e-10 {
            ok = false;
        }
        if hier.word_count != sent.word_count + 1 {
            ok = false;
        }
    }
    verdict(7, "mode-degeneracy", ok);
}

/// 8. BLEU: perfect match scores exactly 1.0 at orders 1..4; the
/// hand-counted two-sentence example matches to 1e-9.
#[test]
fn criterion_8_bleu_scorer() {
    let toks = |s: &str| -> Vec<String> { s.split_whitespace().map(String::from).collect() };
    let mut ok = true;

    let cands = vec![toks("a man is slicing an onion"), toks("someone pours water")];
    let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
    for n in 1..=4 {
        if bleu(&cands, &refs, n).unwrap() != 1.0 {
            ok = false;
        }
    }

    // Hand count. Segment 1: cand "the the the cat" / ref "the cat sat":
    //   p1 matches 2 (the clipped to 1, cat 1) of 4; p2 matches 1 of 3.
    // Segment 2: cand "a dog runs" / ref "a dog runs":
    //   p1 3/3, p2 2/2.
    // Pooled: p1 = 5/7, p2 = 3/5; c = 7, r = 6 -> BP = 1.
    // BLEU-2 = sqrt(5/7 * 3/5).
    let cands = vec![toks("the the the cat"), toks("a dog runs")];
    let refs = vec![vec![toks("the cat sat")], vec![toks("a dog runs")]];
    let got = bleu(&cands, &refs, 2).unwrap();
    let want = (5.0f64 / 7.0 * 3.0 / 5.0).sqrt();
    if (got - want).abs() > 1e-9 {
        eprintln!("hand-counted example: got {got}, want {want}");
        ok = false;
    }
    verdict(8, "bleu-scorer", ok);
}

/// 9. Same-seed training runs produce bit-identical checkpoints, and a
/// checkpoint round trip is byte-identical.
#[test]
fn criterion_9_reproducibility_serialization() {
    let corpus = synth_corpus(&SynthSpec {
        videos: 6,
        sentences_per_video: 2,
        activities: 4,
        feature_dim: 5,
        noise_sigma: 0.05,
        ambiguity: false,
        seed: 9,
    })
    .unwrap();
    let config = tiny_config(&corpus);
    let cfg = TrainConfig {
        mode: TrainMode::Hier,
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for run in 0..2 {
        let mut rng = RngState::new(cfg.seed);
        let mut params = ModelParams::init(&config, true, &mut rng).unwrap();
        let mut opt = RmspropState::new(&params);
        train(&mut params, &mut opt, &corpus, None, &cfg, |_| {}).unwrap();
        let p = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&p, &params, &opt, &cfg).unwrap();
        paths.push(p);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    let b = std::fs::read(&paths[1]).unwrap();
    let mut ok = a == b;

    // round trip: load and re-save byte-identically
    let loaded = load_checkpoint(&paths[0]).unwrap();
    let p2 = dir.path().join("resaved.ckpt");
    save_checkpoint(&p2, &loaded.params, &loaded.opt, &loaded.train).unwrap();
    ok &= std::fs::read(&p2).unwrap() == a;
    verdict(9, "reproducibility-serialization", ok);
}
