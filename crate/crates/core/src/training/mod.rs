//! Model assembly, paragraph-level loss, BPTT, RMSprop, the training loop,
//! gradient checking, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, VideoRecord, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, AttentionParams, EmbeddingParams, GruParams, Mode, MultimodalParams, OutputParams,
};
use crate::numerics::{sign, RngState, Tensor};
use crate::paragraph_generator::{
    embedding_average, embedding_average_backward, paragraph_advance, paragraph_advance_backward,
    sentence_embed, sentence_embed_backward, AdvanceCache, ParagraphGenParams, ParagraphRnnState,
    SentEmbedCache,
};
use crate::sentence_generator::{
    sentence_backward, sentence_forward, FeaturePools, SentenceForward, SentenceGenParams,
};

/// Uniform initialization half-width for all weight matrices.
pub const INIT_SCALE: f64 = 0.08;

/// How recurrent state is (or is not) carried across the sentences of a
/// paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Full model: paragraph generator reinitializes layer I per sentence;
    /// an end-of-paragraph sentence is appended during training.
    Hier,
    /// Sentence-level ablation: every sentence starts from zero state.
    Sent,
    /// Concatenation ablation: layer-I state flows straight across sentence
    /// boundaries, no paragraph generator.
    Cat,
}

impl TrainMode {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, TrainMode::Hier)
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Hier => "hier",
            TrainMode::Sent => "sent",
            TrainMode::Cat => "cat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub dim: usize,
}

/// Static architecture description; everything needed to rebuild parameter
/// shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Word embedding dim.
    pub d_e: usize,
    /// Layer-I hidden dim (also the paragraph state dim).
    pub d_h: usize,
    /// Multimodal layer dim.
    pub d_m: usize,
    /// Attention hidden dim.
    pub d_a: usize,
    /// Sentence embedding dim.
    pub d_s: usize,
    /// Layer-II (paragraph RNN) hidden dim.
    pub d_p: usize,
    pub channels: Vec<ChannelSpec>,
    pub vocab_size: usize,
    /// When false the softmax bias stays frozen at zero.
    #[serde(default = "default_true")]
    pub softmax_bias: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Small dimensions suitable for CPU-only experiments.
    pub fn desk(channels: Vec<ChannelSpec>, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_e: 32,
            d_h: 32,
            d_m: 64,
            d_a: 16,
            d_s: 32,
            d_p: 32,
            channels,
            vocab_size,
            softmax_bias: true,
        }
    }

    /// Full-scale dimensions.
    pub fn full(channels: Vec<ChannelSpec>, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_e: 512,
            d_h: 512,
            d_m: 1024,
            d_a: 100,
            d_s: 512,
            d_p: 512,
            channels,
            vocab_size,
            softmax_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("d_e", self.d_e),
            ("d_h", self.d_h),
            ("d_m", self.d_m),
            ("d_a", self.d_a),
            ("d_s", self.d_s),
            ("d_p", self.d_p),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{label} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocab_size must cover at least BOS and EOS".into(),
            ));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("at least one feature channel required".into()));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.dim == 0 {
                return Err(Error::Config(format!("channel {:?} has dim 0", c.name)));
            }
            if self.channels[..i].iter().any(|p| p.name == c.name) {
                return Err(Error::Config(format!("duplicate channel {:?}", c.name)));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor of the model. The paragraph generator is only
/// present in hierarchical mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub sentence_gen: SentenceGenParams,
    pub paragraph_gen: Option<ParagraphGenParams>,
}

impl ModelParams {
    /// Weights uniform in [-INIT_SCALE, INIT_SCALE], biases zero.
    pub fn init(config: &ModelConfig, hierarchical: bool, rng: &mut RngState) -> Result<ModelParams> {
        config.validate()?;
        let c = config;
        let named: Vec<(String, usize)> = c
            .channels
            .iter()
            .map(|ch| (ch.name.clone(), ch.dim))
            .collect();
        let sentence_gen = SentenceGenParams {
            emb: EmbeddingParams::init(c.d_e, c.vocab_size, rng, INIT_SCALE),
            rnn1: GruParams::init(c.d_e, c.d_h, Activation::Relu, rng, INIT_SCALE),
            attn: named
                .iter()
                .map(|(name, dim)| {
                    (
                        name.clone(),
                        AttentionParams::init(c.d_a, *dim, c.d_h, rng, INIT_SCALE),
                    )
                })
                .collect(),
            mm: MultimodalParams::init(c.d_m, &named, c.d_h, rng, INIT_SCALE),
            out: OutputParams::init(c.d_e, c.d_m, c.vocab_size, rng, INIT_SCALE),
        };
        let paragraph_gen = hierarchical.then(|| ParagraphGenParams {
            sent_w: rng.uniform_tensor(&[c.d_s, c.d_e + c.d_h], -INIT_SCALE, INIT_SCALE),
            sent_b: Tensor::zeros(&[c.d_s]),
            rnn2: GruParams::init(c.d_s, c.d_p, Activation::Stanh, rng, INIT_SCALE),
            state_w: rng.uniform_tensor(&[c.d_h, c.d_p + c.d_s], -INIT_SCALE, INIT_SCALE),
            state_b: Tensor::zeros(&[c.d_h]),
        });
        Ok(ModelParams {
            config: config.clone(),
            sentence_gen,
            paragraph_gen,
        })
    }

    /// Same shapes, all zeros. Used for gradient accumulators and the
    /// RMSprop cache.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            sentence_gen: self.sentence_gen.zeros_like(),
            paragraph_gen: self.paragraph_gen.as_ref().map(|p| p.zeros_like()),
        }
    }

    pub fn is_hierarchical(&self) -> bool {
        self.paragraph_gen.is_some()
    }

    /// Stable (name, tensor) enumeration, same order as [`tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        let sg = &self.sentence_gen;
        out.push(("emb.table".into(), &sg.emb.table));
        for (label, t) in gru_fields(&sg.rnn1) {
            out.push((format!("rnn1.{label}"), t));
        }
        for (name, a) in &sg.attn {
            out.push((format!("attn.{name}.w_q"), &a.w_q));
            out.push((format!("attn.{name}.u_q"), &a.u_q));
            out.push((format!("attn.{name}.b_q"), &a.b_q));
            out.push((format!("attn.{name}.w"), &a.w));
        }
        for (name, t) in &sg.mm.channels {
            out.push((format!("mm.{name}"), t));
        }
        out.push(("mm.u_m".into(), &sg.mm.u_m));
        out.push(("mm.b_m".into(), &sg.mm.b_m));
        out.push(("out.w_hid".into(), &sg.out.w_hid));
        out.push(("out.b_hid".into(), &sg.out.b_hid));
        out.push(("out.b_soft".into(), &sg.out.b_soft));
        if let Some(pg) = &self.paragraph_gen {
            out.push(("para.sent_w".into(), &pg.sent_w));
            out.push(("para.sent_b".into(), &pg.sent_b));
            for (label, t) in gru_fields(&pg.rnn2) {
                out.push((format!("para.rnn2.{label}"), t));
            }
            out.push(("para.state_w".into(), &pg.state_w));
            out.push(("para.state_b".into(), &pg.state_b));
        }
        out
    }

    /// Mutable twin of [`tensors`], identical names and order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let sg = &mut self.sentence_gen;
        out.push(("emb.table".into(), &mut sg.emb.table));
        for (label, t) in gru_fields_mut(&mut sg.rnn1) {
            out.push((format!("rnn1.{label}"), t));
        }
        for (name, a) in &mut sg.attn {
            out.push((format!("attn.{name}.w_q"), &mut a.w_q));
            out.push((format!("attn.{name}.u_q"), &mut a.u_q));
            out.push((format!("attn.{name}.b_q"), &mut a.b_q));
            out.push((format!("attn.{name}.w"), &mut a.w));
        }
        for (name, t) in &mut sg.mm.channels {
            out.push((format!("mm.{name}"), t));
        }
        out.push(("mm.u_m".into(), &mut sg.mm.u_m));
        out.push(("mm.b_m".into(), &mut sg.mm.b_m));
        out.push(("out.w_hid".into(), &mut sg.out.w_hid));
        out.push(("out.b_hid".into(), &mut sg.out.b_hid));
        out.push(("out.b_soft".into(), &mut sg.out.b_soft));
        if let Some(pg) = &mut self.paragraph_gen {
            out.push(("para.sent_w".into(), &mut pg.sent_w));
            out.push(("para.sent_b".into(), &mut pg.sent_b));
            for (label, t) in gru_fields_mut(&mut pg.rnn2) {
                out.push((format!("para.rnn2.{label}"), t));
            }
            out.push(("para.state_w".into(), &mut pg.state_w));
            out.push(("para.state_b".into(), &mut pg.state_b));
        }
        out
    }

    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (n, t) in self.tensors_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(Error::dim("set_tensor", value.shape(), t.shape()));
                }
                *t = value;
                return Ok(());
            }
        }
        Err(Error::Config(format!("no tensor named {name:?}")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

fn gru_fields(g: &GruParams) -> [(&'static str, &Tensor); 9] {
    [
        ("w_r", &g.w_r),
        ("u_r", &g.u_r),
        ("b_r", &g.b_r),
        ("w_z", &g.w_z),
        ("u_z", &g.u_z),
        ("b_z", &g.b_z),
        ("w_h", &g.w_h),
        ("u_h", &g.u_h),
        ("b_h", &g.b_h),
    ]
}

fn gru_fields_mut(g: &mut GruParams) -> [(&'static str, &mut Tensor); 9] {
    [
        ("w_r", &mut g.w_r),
        ("u_r", &mut g.u_r),
        ("b_r", &mut g.b_r),
        ("w_z", &mut g.w_z),
        ("u_z", &mut g.u_z),
        ("b_z", &mut g.b_z),
        ("w_h", &mut g.w_h),
        ("u_h", &mut g.u_h),
        ("b_h", &mut g.b_h),
    ]
}

/// Optimizer and regularization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub l1: f64,
    pub l2: f64,
    pub grad_clip: Option<f64>,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Hier,
            epochs: 10,
            learning_rate: 1e-4,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-6,
            l1: 1e-6,
            l2: 1e-4,
            grad_clip: None,
            dropout_rate: 0.5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config("rmsprop_decay must be in [0, 1)".into()));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::Config("rmsprop_epsilon must be positive".into()));
        }
        if self.l1 < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config("l1/l2 penalties must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct SentencePass {
    fwd: SentenceForward,
    pools: FeaturePools,
}

#[derive(Debug)]
struct AdvancePass {
    adv: AdvanceCache,
    se: SentEmbedCache,
    included: Vec<usize>,
}

/// Forward pass over one video's paragraph, with everything retained for
/// BPTT. `numerator` is the summed -log P over all predicted words; divide
/// by `word_count` (corpus-wide) for the perplexity measure.
#[derive(Debug)]
pub struct ParagraphForward {
    pub numerator: f64,
    pub word_count: usize,
    sentences: Vec<SentencePass>,
    advances: Vec<AdvancePass>,
}

/// Teacher-forced forward over a full paragraph in the given mode. In
/// hierarchical mode an end-of-paragraph sentence (BOS EOS over whole-video
/// features) is appended and layer II advances once per real sentence.
pub fn paragraph_forward(
    params: &ModelParams,
    record: &VideoRecord,
    mode: TrainMode,
    fmode: Mode,
    dropout_rate: f64,
    rng: &mut RngState,
) -> Result<ParagraphForward> {
    if record.sentences.is_empty() {
        return Err(Error::Corpus(format!("record {:?} has no sentences", record.id)));
    }
    let pg = match (mode, &params.paragraph_gen) {
        (TrainMode::Hier, Some(pg)) => Some(pg),
        (TrainMode::Hier, None) => {
            return Err(Error::Config(
                "hier mode requires paragraph generator parameters".into(),
            ))
        }
        _ => None,
    };

    // (words, interval) per modeled sentence; hier appends the EOP marker.
    let mut items: Vec<(Vec<usize>, Option<(usize, usize)>)> = record
        .sentences
        .iter()
        .map(|s| (s.word_ids.clone(), s.interval))
        .collect();
    if mode == TrainMode::Hier {
        items.push((vec![BOS_ID, EOS_ID], None));
    }

    let mut numerator = 0.0;
    let mut word_count = 0;
    let mut sentences = Vec::with_capacity(items.len());
    let mut advances = Vec::new();
    let mut init_h: Option<Tensor> = None;
    let mut para_state = pg.map(|p| ParagraphRnnState::start(p.para_hidden_dim()));

    for (k, (words, interval)) in items.iter().enumerate() {
        let pools = record.pools(*interval)?;
        let fwd = sentence_forward(
            &params.sentence_gen,
            init_h.as_ref(),
            words,
            &pools,
            fmode,
            dropout_rate,
            rng,
        )?;
        numerator += fwd.cost;
        word_count += fwd.targets.len();

        let last = k + 1 == items.len();
        init_h = match mode {
            TrainMode::Sent => None,
            TrainMode::Cat => (!last).then(|| fwd.last_h.clone()),
            TrainMode::Hier => {
                if last {
                    None
                } else {
                    let pg = pg.expect("checked above");
                    let (avg, included) =
                        embedding_average(&params.sentence_gen.emb, words, false)?;
                    let (s_emb, se) = sentence_embed(pg, &avg, &fwd.last_h)?;
                    let state = para_state.as_mut().expect("hier state");
                    let (next_init, new_state, adv) = paragraph_advance(pg, state, &s_emb)?;
                    *state = new_state;
                    advances.push(AdvancePass { adv, se, included });
                    Some(next_init)
                }
            }
        };
        sentences.push(SentencePass { fwd, pools });
    }

    Ok(ParagraphForward {
        numerator,
        word_count,
        sentences,
        advances,
    })
}

/// Full BPTT over one paragraph: run the forward pass, then push the
/// gradient of `numerator` back through every sentence and (in hier mode)
/// the paragraph recurrence. Returns the forward stats and the gradients,
/// shaped exactly like the parameters. `tied` as in
/// [`crate::layers::output_backward`]; pass `true` outside of mutation
/// tests.
pub fn backprop(
    params: &ModelParams,
    record: &VideoRecord,
    mode: TrainMode,
    fmode: Mode,
    dropout_rate: f64,
    rng: &mut RngState,
    tied: bool,
) -> Result<(ParagraphForward, ModelParams)> {
    let pf = paragraph_forward(params, record, mode, fmode, dropout_rate, rng)?;
    let mut grads = params.zeros_like();
    let d_h = params.sentence_gen.hidden_dim();

    // Gradient on the last hidden state of the sentence below, produced by
    // the structure above it (paragraph chain or concatenation).
    let mut d_last_pending: Option<Tensor> = None;
    // Gradient flowing into rnn2's hidden state from later sentences.
    let mut d_h2_future = params
        .paragraph_gen
        .as_ref()
        .map(|p| Tensor::zeros(&[p.para_hidden_dim()]));

    for k in (0..pf.sentences.len()).rev() {
        let pass = &pf.sentences[k];
        let d_last = d_last_pending.take();
        let d_init = sentence_backward(
            &params.sentence_gen,
            &pass.fwd,
            &pass.pools,
            d_last.as_ref(),
            &mut grads.sentence_gen,
            tied,
        )?;
        if k == 0 {
            break;
        }
        match mode {
            TrainMode::Sent => {}
            TrainMode::Cat => {
                // init of sentence k is literally last_h of sentence k-1
                d_last_pending = Some(d_init);
            }
            TrainMode::Hier => {
                let pg = params.paragraph_gen.as_ref().expect("hier params");
                let pg_grads = grads.paragraph_gen.as_mut().expect("hier grads");
                let ap = &pf.advances[k - 1];
                let (d_h2_prev, d_s_emb) = paragraph_advance_backward(
                    pg,
                    &ap.adv,
                    &d_init,
                    d_h2_future.as_ref().expect("hier state"),
                    pg_grads,
                );
                d_h2_future = Some(d_h2_prev);
                let (d_avg, d_last_h) = sentence_embed_backward(pg, &ap.se, &d_s_emb, pg_grads);
                embedding_average_backward(&mut grads.sentence_gen.emb, &ap.included, &d_avg);
                debug_assert_eq!(d_last_h.len(), d_h);
                d_last_pending = Some(d_last_h);
            }
        }
    }
    Ok((pf, grads))
}

/// Corpus-level measure: sum of per-word -log P over all records, divided
/// by the total number of predicted words. Natural log; not exponentiated.
pub fn corpus_perplexity(params: &ModelParams, corpus: &Corpus, mode: TrainMode) -> Result<f64> {
    if corpus.records.is_empty() {
        return Err(Error::Config("perplexity of an empty corpus".into()));
    }
    let mut rng = RngState::new(0); // unused in eval mode
    let mut num = 0.0;
    let mut den = 0usize;
    for record in &corpus.records {
        let pf = paragraph_forward(params, record, mode, Mode::Eval, 0.0, &mut rng)?;
        num += pf.numerator;
        den += pf.word_count;
    }
    Ok(num / den as f64)
}

/// Per-parameter RMSprop cache; shaped exactly like the model.
#[derive(Debug)]
pub struct RmspropState {
    pub cache: ModelParams,
}

impl RmspropState {
    pub fn new(params: &ModelParams) -> RmspropState {
        RmspropState {
            cache: params.zeros_like(),
        }
    }
}

/// One RMSprop step with L2/L1 shrinkage folded into the applied gradient:
///   cache <- decay * cache + (1 - decay) * g^2
///   g_total = g + 2 * l2 * p + l1 * sign(p)
///   p <- p - lr * g_total / (sqrt(cache) + eps)
/// Optional global-norm clipping rescales all g_total jointly.
pub fn rmsprop_update(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut RmspropState,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    let frozen_bias = !params.config.softmax_bias;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();

    let mut g_totals: Vec<Tensor> = Vec::with_capacity(names.len());
    {
        let ps = params.tensors();
        let gs = grads.tensors();
        if ps.len() != gs.len() {
            return Err(Error::Config("gradients do not match parameters".into()));
        }
        for ((_, p), (_, g)) in ps.iter().zip(&gs) {
            let mut gt = (*g).clone();
            gt.add_assign(&p.scale(2.0 * cfg.l2));
            gt.add_assign(&sign(p).scale(cfg.l1));
            g_totals.push(gt);
        }
    }
    if let Some(clip) = cfg.grad_clip {
        let norm: f64 = g_totals
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = clip / norm;
            for g in &mut g_totals {
                *g = g.scale(s);
            }
        }
    }

    let gs = grads.tensors();
    let mut caches = state.cache.tensors_mut();
    let mut ps = params.tensors_mut();
    for i in 0..names.len() {
        if frozen_bias && names[i] == "out.b_soft" {
            continue;
        }
        let (_, cache) = &mut caches[i];
        let (_, g) = &gs[i];
        let (_, p) = &mut ps[i];
        for j in 0..cache.len() {
            let gj = g.data()[j];
            let c = cfg.rmsprop_decay * cache.data()[j] + (1.0 - cfg.rmsprop_decay) * gj * gj;
            cache.data_mut()[j] = c;
            p.data_mut()[j] -=
                cfg.learning_rate * g_totals[i].data()[j] / (c.sqrt() + cfg.rmsprop_epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_ppl: f64,
    pub heldout_ppl: Option<f64>,
}

/// Per-record SGD with RMSprop over a shuffled corpus. Deterministic for a
/// fixed seed. Aborts with a descriptive error if any record produces a
/// non-finite loss.
pub fn train(
    params: &mut ModelParams,
    opt: &mut RmspropState,
    corpus: &Corpus,
    heldout: Option<&Corpus>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if corpus.records.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    let mut rng = RngState::new(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.records.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for &idx in &order {
            let record = &corpus.records[idx];
            let (pf, grads) = backprop(
                params,
                record,
                cfg.mode,
                Mode::Train,
                cfg.dropout_rate,
                &mut rng,
                true,
            )?;
            if !pf.numerator.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss on record {:?} in epoch {epoch}",
                    record.id
                )));
            }
            rmsprop_update(params, &grads, opt, cfg)?;
        }
        let log = EpochLog {
            epoch,
            train_ppl: corpus_perplexity(params, corpus, cfg.mode)?,
            heldout_ppl: heldout
                .map(|h| corpus_perplexity(params, h, cfg.mode))
                .transpose()?,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (tensor name, worst relative error) in enumeration order.
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Compare analytic BPTT gradients on one record against central finite
/// differences of the paragraph loss, tensor by tensor. `tied = false`
/// deliberately mis-computes the tied-output gradient so callers can verify
/// the check actually fails on broken gradients.
pub fn gradient_check(
    params: &ModelParams,
    record: &VideoRecord,
    mode: TrainMode,
    tied: bool,
    eps: f64,
) -> Result<GradCheckReport> {
    use crate::numerics::{finite_diff_grad, grad_rel_error};
    let mut rng = RngState::new(0);
    let (_, grads) = backprop(params, record, mode, Mode::Eval, 0.0, &mut rng, tied)?;

    let loss_with = |name: &str, t: &Tensor| -> f64 {
        let mut q = params.clone();
        q.set_tensor(name, t.clone()).expect("known tensor");
        let mut rng = RngState::new(0);
        paragraph_forward(&q, record, mode, Mode::Eval, 0.0, &mut rng)
            .expect("forward")
            .numerator
    };

    let mut per_tensor = Vec::new();
    let mut worst = 0.0f64;
    for ((name, p), (_, g)) in params.tensors().iter().zip(grads.tensors()) {
        let fd = finite_diff_grad(|t| loss_with(name, t), p, eps);
        let err = grad_rel_error(g, &fd);
        worst = worst.max(err);
        per_tensor.push((name.clone(), err));
    }
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err: worst,
    })
}
