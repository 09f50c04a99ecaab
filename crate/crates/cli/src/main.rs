//! `hrnn`: synthesize corpora, train, generate paragraphs, evaluate, and
//! gradient-check the hierarchical video captioner.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage or
//! configuration error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use hrnn_core::corpus::{
    bleu, load_corpus, save_corpus, synth_corpus, Corpus, SynthSpec,
};
use hrnn_core::decoding::{generate_paragraph, BeamConfig, DecodeStrategy};
use hrnn_core::training::{
    corpus_perplexity, gradient_check, load_checkpoint, save_checkpoint, train, ChannelSpec,
    ModelConfig, ModelParams, RmspropState, TrainConfig, TrainMode,
};
use hrnn_core::RngState;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    fn runtime(msg: impl Into<String>) -> CliError {
        CliError {
            code: EXIT_CHECK_FAILED,
            msg: msg.into(),
        }
    }
}

impl From<hrnn_core::Error> for CliError {
    fn from(e: hrnn_core::Error) -> CliError {
        let code = match &e {
            hrnn_core::Error::Config(_) => EXIT_USAGE,
            _ => EXIT_CHECK_FAILED,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "hrnn", version, about = "Hierarchical RNN video paragraph captioner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic activity corpus
    Synth(SynthArgs),
    /// Train a model and write a checkpoint
    Train(TrainArgs),
    /// Decode captions for every video in a corpus
    Generate(GenerateArgs),
    /// Score a caption file against a reference corpus
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus path (JSON)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    videos: usize,
    /// Sentences per video
    #[arg(long, default_value_t = 4)]
    sentences: usize,
    #[arg(long, default_value_t = 10)]
    activities: usize,
    #[arg(long, default_value_t = 12)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Build the corpus so some sentences need paragraph context
    #[arg(long)]
    ambiguity: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSON)
    #[arg(long)]
    corpus: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Held-out corpus reported each epoch
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Global gradient-norm clip
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use full-scale model dimensions instead of the desk defaults
    #[arg(long)]
    paper_dims: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus supplying features (and intervals unless --open-ended)
    #[arg(long)]
    corpus: PathBuf,
    /// Output captions file
    #[arg(long)]
    out: PathBuf,
    /// Beam width L
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Pool size J
    #[arg(long, default_value_t = 5)]
    pool: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    #[arg(long, default_value_t = 15)]
    max_sentences: usize,
    /// Greedy decoding instead of beam search
    #[arg(long)]
    greedy: bool,
    /// Ignore reference intervals; generate until the end-of-paragraph
    /// sentence
    #[arg(long)]
    open_ended: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Captions file produced by `hrnn generate`
    #[arg(long)]
    captions: PathBuf,
    /// Reference corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint used for the perplexity measure
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode, default_value = "hier")]
    mode: TrainMode,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Worst acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Deliberately drop the tied-output term from the embedding gradient;
    /// the check must then fail
    #[arg(long)]
    break_tied_weights: bool,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "hier" => Ok(TrainMode::Hier),
        "sent" => Ok(TrainMode::Sent),
        "cat" => Ok(TrainMode::Cat),
        _ => Err(format!("unknown mode {s:?} (expected hier, sent, or cat)")),
    }
}

/// Seed precedence: flag, then config file, then HRNN_SEED, then 1.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("HRNN_SEED") {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::usage(format!("HRNN_SEED={v:?} is not an integer"))),
        Err(_) => Ok(1),
    }
}

/// Optional overrides loaded from --config; unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    mode: Option<TrainMode>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    rmsprop_decay: Option<f64>,
    rmsprop_epsilon: Option<f64>,
    l1: Option<f64>,
    l2: Option<f64>,
    grad_clip: Option<f64>,
    dropout_rate: Option<f64>,
    seed: Option<u64>,
    dims: Option<DimsConfig>,
    softmax_bias: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DimsConfig {
    d_e: Option<usize>,
    d_h: Option<usize>,
    d_m: Option<usize>,
    d_a: Option<usize>,
    d_s: Option<usize>,
    d_p: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, None)?;
    let spec = SynthSpec {
        videos: a.videos,
        sentences_per_video: a.sentences,
        activities: a.activities,
        feature_dim: a.feature_dim,
        noise_sigma: a.noise_sigma,
        ambiguity: a.ambiguity,
        seed,
    };
    let corpus = synth_corpus(&spec)?;
    save_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} records={} vocab={} ambiguity={}",
        a.out.display(),
        corpus.records.len(),
        corpus.vocab.size(),
        a.ambiguity
    );
    Ok(())
}

fn load_corpus_usage(path: &Path) -> Result<Corpus, CliError> {
    load_corpus(path)
        .map_err(|e| CliError::usage(format!("corpus {}: {e}", path.display())))
}

fn channel_specs(corpus: &Corpus) -> Result<Vec<ChannelSpec>, CliError> {
    let first = corpus
        .records
        .first()
        .ok_or_else(|| CliError::usage("corpus has no records"))?;
    Ok(first
        .channels
        .iter()
        .map(|(name, f)| ChannelSpec {
            name: name.clone(),
            dim: f.dim,
        })
        .collect())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref())?;
    let corpus = load_corpus_usage(&a.corpus)?;
    let heldout = a.heldout.as_deref().map(load_corpus_usage).transpose()?;

    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        mode: a.mode.or(file.mode).unwrap_or(defaults.mode),
        epochs: a.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        learning_rate: a.lr.or(file.learning_rate).unwrap_or(defaults.learning_rate),
        rmsprop_decay: file.rmsprop_decay.unwrap_or(defaults.rmsprop_decay),
        rmsprop_epsilon: file.rmsprop_epsilon.unwrap_or(defaults.rmsprop_epsilon),
        l1: file.l1.unwrap_or(defaults.l1),
        l2: file.l2.unwrap_or(defaults.l2),
        grad_clip: a.clip.or(file.grad_clip),
        dropout_rate: a.dropout.or(file.dropout_rate).unwrap_or(defaults.dropout_rate),
        seed: resolve_seed(a.seed, file.seed)?,
    };
    cfg.validate()?;

    let channels = channel_specs(&corpus)?;
    let mut model = if a.paper_dims {
        ModelConfig::full(channels, corpus.vocab.size())
    } else {
        ModelConfig::desk(channels, corpus.vocab.size())
    };
    if let Some(d) = &file.dims {
        model.d_e = d.d_e.unwrap_or(model.d_e);
        model.d_h = d.d_h.unwrap_or(model.d_h);
        model.d_m = d.d_m.unwrap_or(model.d_m);
        model.d_a = d.d_a.unwrap_or(model.d_a);
        model.d_s = d.d_s.unwrap_or(model.d_s);
        model.d_p = d.d_p.unwrap_or(model.d_p);
    }
    if let Some(b) = file.softmax_bias {
        model.softmax_bias = b;
    }

    let mut rng = RngState::new(cfg.seed);
    let mut params = ModelParams::init(&model, cfg.mode.is_hierarchical(), &mut rng)?;
    let mut opt = RmspropState::new(&params);
    println!(
        "mode={} params={} vocab={} records={} seed={}",
        cfg.mode,
        params.num_params(),
        corpus.vocab.size(),
        corpus.records.len(),
        cfg.seed
    );
    train(&mut params, &mut opt, &corpus, heldout.as_ref(), &cfg, |log| {
        let mut line = format!("epoch={} train_ppl={:.6}", log.epoch, log.train_ppl);
        if let Some(h) = log.heldout_ppl {
            let _ = write!(line, " heldout_ppl={h:.6}");
        }
        println!("{line}");
    })?;
    save_checkpoint(&a.out, &params, &opt, &cfg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus_usage(&a.corpus)?;
    if corpus.vocab.size() != ckpt.params.config.vocab_size {
        return Err(CliError::usage(format!(
            "corpus vocabulary ({}) does not match checkpoint ({})",
            corpus.vocab.size(),
            ckpt.params.config.vocab_size
        )));
    }
    let config = BeamConfig {
        beam_width: a.beam,
        pool_size: a.pool,
        max_sentence_len: a.max_len,
        max_sentences: a.max_sentences,
        prune: true,
    };
    config.validate()?;
    let strategy = if a.greedy {
        DecodeStrategy::Greedy
    } else {
        DecodeStrategy::Beam
    };

    let mut out = String::new();
    let mut sentences = 0usize;
    for record in &corpus.records {
        let intervals: Option<Vec<(usize, usize)>> = if a.open_ended {
            None
        } else {
            Some(
                record
                    .sentences
                    .iter()
                    .map(|s| {
                        s.interval.ok_or_else(|| {
                            CliError::usage(format!(
                                "record {:?} has sentences without intervals; use --open-ended",
                                record.id
                            ))
                        })
                    })
                    .collect::<Result<_, _>>()?,
            )
        };
        let para = generate_paragraph(
            &ckpt.params,
            record,
            ckpt.train.mode,
            intervals.as_deref(),
            &config,
            strategy,
        )?;
        for (i, cands) in para.iter().enumerate() {
            let (words, cost) = &cands[0];
            let tokens: Vec<&str> = words[1..words.len() - 1]
                .iter()
                .map(|&w| corpus.vocab.token(w))
                .collect();
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", record.id, i, cost, tokens.join(" "));
            sentences += 1;
        }
    }
    std::fs::write(&a.out, out).map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "wrote {} sentences={} videos={}",
        a.out.display(),
        sentences,
        corpus.records.len()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let corpus = load_corpus_usage(&a.corpus)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;

    let text = std::fs::read_to_string(&a.captions)
        .map_err(|e| CliError::usage(format!("cannot read captions {}: {e}", a.captions.display())))?;
    // video id -> (sentence index, tokens)
    let mut by_video: Vec<(String, Vec<(usize, Vec<String>)>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, '\t');
        let (id, idx, _cost, toks) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(CliError::usage(format!(
                    "captions line {}: expected 4 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        let idx: usize = idx.parse().map_err(|_| {
            CliError::usage(format!("captions line {}: bad sentence index", lineno + 1))
        })?;
        let tokens: Vec<String> = toks.split_whitespace().map(String::from).collect();
        match by_video.iter_mut().find(|(v, _)| v == id) {
            Some((_, list)) => list.push((idx, tokens)),
            None => by_video.push((id.to_string(), vec![(idx, tokens)])),
        }
    }
    if by_video.is_empty() {
        return Err(CliError::usage("captions file contains no captions"));
    }
    for (id, _) in &by_video {
        if !corpus.records.iter().any(|r| &r.id == id) {
            return Err(CliError::usage(format!(
                "captions reference unknown video {id:?}"
            )));
        }
    }

    // paragraph-level segments: one candidate/reference pair per video, in
    // corpus order; videos without captions count as empty candidates
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    for record in &corpus.records {
        let mut cand: Vec<String> = Vec::new();
        if let Some((_, list)) = by_video.iter_mut().find(|(v, _)| v == &record.id) {
            list.sort_by_key(|(i, _)| *i);
            for (_, toks) in list.iter() {
                cand.extend(toks.iter().cloned());
            }
        }
        let reference: Vec<String> = record
            .sentences
            .iter()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect();
        candidates.push(cand);
        references.push(vec![reference]);
    }

    let mut line = String::new();
    for n in 1..=4 {
        let score = bleu(&candidates, &references, n)?;
        let _ = write!(line, "bleu{n}={score:.4} ");
    }
    let ppl = corpus_perplexity(&ckpt.params, &corpus, ckpt.train.mode)?;
    let _ = write!(line, "ppl={ppl:.6}");
    println!("{line}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, None)?;
    // tiny self-contained setup: a few short sentences, small dimensions
    let corpus = synth_corpus(&SynthSpec {
        videos: 1,
        sentences_per_video: 2,
        activities: 3,
        feature_dim: 3,
        noise_sigma: 0.1,
        ambiguity: false,
        seed,
    })?;
    let config = ModelConfig {
        d_e: 5,
        d_h: 5,
        d_m: 6,
        d_a: 3,
        d_s: 4,
        d_p: 4,
        channels: channel_specs(&corpus)?,
        vocab_size: corpus.vocab.size(),
        softmax_bias: true,
    };
    let mut rng = RngState::new(seed);
    let mut params = ModelParams::init(&config, a.mode.is_hierarchical(), &mut rng)?;
    // push weights away from the near-linear region so the check is not
    // trivially satisfied by tiny activations
    for (_, t) in params.tensors_mut() {
        *t = t.scale(5.0);
    }
    let report = gradient_check(
        &params,
        &corpus.records[0],
        a.mode,
        !a.break_tied_weights,
        a.eps,
    )?;
    for (name, err) in &report.per_tensor {
        println!("tensor={name} rel_err={err:.3e}");
    }
    let pass = report.passes(a.threshold);
    println!(
        "gradcheck mode={} max_rel_err={:.3e} threshold={:.1e} {}",
        a.mode,
        report.max_rel_err,
        a.threshold,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::runtime("gradient check failed"))
    }
}
