//! Sentence decoding: beam search with a completed-sentence pool, greedy
//! decoding, and paragraph-level generation that chains sentence state the
//! same way training does.

use crate::corpus::{VideoRecord, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numerics::{RngState, Tensor};
use crate::paragraph_generator::{embedding_average, paragraph_advance, ParagraphRnnState};
use crate::sentence_generator::{init_state, step, FeaturePools, SentenceGenParams};
use crate::training::{ModelParams, TrainMode};

/// One autoregressive conditional distribution per step. Abstracted from the
/// concrete model so decoder behavior can be tested against hand-crafted
/// score tables.
pub trait StepScorer {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    /// Consume `input_word` in `state`; return log-probabilities over the
    /// next word and the successor state.
    fn step(&self, state: &Self::State, input_word: usize) -> Result<(Tensor, Self::State)>;
}

/// The sentence generator as a scorer. Eval mode; cost accounting is
/// identical to the teacher-forced sentence cost.
pub struct ModelScorer<'a> {
    pub params: &'a SentenceGenParams,
    pub pools: &'a FeaturePools,
    pub init_h: Option<&'a Tensor>,
}

impl StepScorer for ModelScorer<'_> {
    type State = crate::sentence_generator::SentenceGenState;

    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn start(&self) -> Result<Self::State> {
        init_state(self.params.hidden_dim(), self.init_h)
    }

    fn step(&self, state: &Self::State, input_word: usize) -> Result<(Tensor, Self::State)> {
        let mut rng = RngState::new(0); // unused in eval mode
        let (lp, next, _) = step(
            self.params,
            state,
            input_word,
            self.pools,
            Mode::Eval,
            0.0,
            &mut rng,
        )?;
        Ok((lp, next))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    /// Beam width L.
    pub beam_width: usize,
    /// Pool capacity J (completed sentences kept).
    pub pool_size: usize,
    /// Maximum interior (non-BOS, non-EOS) words per sentence.
    pub max_sentence_len: usize,
    /// Maximum sentences emitted in open-ended paragraph generation.
    pub max_sentences: usize,
    /// Drop live hypotheses already costlier than every pooled sentence.
    /// Exists so tests can verify pruning never changes the result.
    pub prune: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_width: 5,
            pool_size: 5,
            max_sentence_len: 30,
            max_sentences: 15,
            prune: true,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.pool_size == 0 {
            return Err(Error::Config("beam width and pool size must be positive".into()));
        }
        if self.pool_size > self.beam_width {
            return Err(Error::Config(format!(
                "pool size {} exceeds beam width {}",
                self.pool_size, self.beam_width
            )));
        }
        if self.max_sentence_len == 0 || self.max_sentences == 0 {
            return Err(Error::Config("decode length caps must be positive".into()));
        }
        Ok(())
    }
}

struct Hyp<S> {
    words: Vec<usize>,
    cost: f64,
    state: S,
}

/// Completed sentences ordered by (cost, words); ties are broken toward the
/// lexicographically smaller word sequence so decoding is fully
/// deterministic.
fn pool_order(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> std::cmp::Ordering {
    a.1.partial_cmp(&b.1)
        .expect("finite costs")
        .then_with(|| a.0.cmp(&b.0))
}

/// Beam search over one sentence. Starts from BOS, keeps the best
/// `beam_width` live hypotheses per step, moves EOS-completed sentences into
/// a pool capped at `pool_size`, and (when `prune`) discards live
/// hypotheses that can no longer beat the pool. Returns the pool sorted by
/// (cost, words); costs are summed -log P including the EOS term.
pub fn beam_search<S: StepScorer>(scorer: &S, config: &BeamConfig) -> Result<Vec<(Vec<usize>, f64)>> {
    config.validate()?;
    let vocab = scorer.vocab_size();
    let mut beam = vec![Hyp {
        words: vec![BOS_ID],
        cost: 0.0,
        state: scorer.start()?,
    }];
    let mut pool: Vec<(Vec<usize>, f64)> = Vec::new();

    while !beam.is_empty() {
        let mut candidates: Vec<Hyp<S::State>> = Vec::new();
        for hyp in &beam {
            let last = *hyp.words.last().expect("hypotheses never empty");
            let (lp, next_state) = scorer.step(&hyp.state, last)?;
            let interior = hyp.words.len() - 1;
            for w in 0..vocab {
                if w != EOS_ID && interior + 1 > config.max_sentence_len {
                    continue;
                }
                let mut words = hyp.words.clone();
                words.push(w);
                candidates.push(Hyp {
                    words,
                    cost: hyp.cost - lp.data()[w],
                    state: next_state.clone(),
                });
            }
        }
        candidates.sort_by(|a, b| {
            a.cost
                .partial_cmp(&b.cost)
                .expect("finite costs")
                .then_with(|| a.words.cmp(&b.words))
        });
        candidates.truncate(config.beam_width);

        let mut next_beam = Vec::new();
        for cand in candidates {
            if *cand.words.last().unwrap() == EOS_ID {
                pool.push((cand.words, cand.cost));
                pool.sort_by(pool_order);
                pool.truncate(config.pool_size);
            } else {
                next_beam.push(cand);
            }
        }
        if config.prune && pool.len() == config.pool_size {
            let worst = pool.last().expect("pool non-empty").1;
            next_beam.retain(|h| h.cost <= worst);
        }
        beam = next_beam;
    }
    Ok(pool)
}

/// Beam search with the real model.
pub fn beam_search_sentence(
    params: &SentenceGenParams,
    init_h: Option<&Tensor>,
    pools: &FeaturePools,
    config: &BeamConfig,
) -> Result<Vec<(Vec<usize>, f64)>> {
    let scorer = ModelScorer {
        params,
        pools,
        init_h,
    };
    beam_search(&scorer, config)
}

/// Greedy decoding: always take the argmax word. Stops at EOS or after
/// `max_sentence_len` interior words (in which case EOS is forced so the
/// result is always a well-formed sentence). Returns (words, cost).
pub fn greedy_decode(
    params: &SentenceGenParams,
    init_h: Option<&Tensor>,
    pools: &FeaturePools,
    max_sentence_len: usize,
) -> Result<(Vec<usize>, f64)> {
    let scorer = ModelScorer {
        params,
        pools,
        init_h,
    };
    let mut state = scorer.start()?;
    let mut words = vec![BOS_ID];
    let mut cost = 0.0;
    loop {
        let (lp, next) = scorer.step(&state, *words.last().unwrap())?;
        let interior = words.len() - 1;
        let w = if interior >= max_sentence_len {
            EOS_ID
        } else {
            lp.argmax()
        };
        cost -= lp.data()[w];
        words.push(w);
        state = next;
        if w == EOS_ID {
            return Ok((words, cost));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Beam,
    Greedy,
}

/// The end-of-paragraph sentence: an immediately closed BOS EOS pair.
pub fn is_eop(words: &[usize]) -> bool {
    words == [BOS_ID, EOS_ID]
}

/// Decode a paragraph for one video. With `intervals`, one sentence is
/// decoded per interval; without, generation is open-ended over whole-video
/// features until the model emits the end-of-paragraph sentence (excluded
/// from the output) or `max_sentences` is reached. State chains across
/// sentences exactly as in training for the given mode. Returns the
/// candidate list per emitted sentence, best first.
pub fn generate_paragraph(
    params: &ModelParams,
    record: &VideoRecord,
    mode: TrainMode,
    intervals: Option<&[(usize, usize)]>,
    config: &BeamConfig,
    strategy: DecodeStrategy,
) -> Result<Vec<Vec<(Vec<usize>, f64)>>> {
    config.validate()?;
    if mode == TrainMode::Hier && params.paragraph_gen.is_none() {
        return Err(Error::Config(
            "hier mode requires paragraph generator parameters".into(),
        ));
    }
    let sg = &params.sentence_gen;
    let mut out = Vec::new();
    let mut init_h: Option<Tensor> = None;
    let mut para_state = params
        .paragraph_gen
        .as_ref()
        .map(|p| ParagraphRnnState::start(p.para_hidden_dim()));

    let planned: Vec<Option<(usize, usize)>> = match intervals {
        Some(iv) => iv.iter().map(|&x| Some(x)).collect(),
        None => vec![None; config.max_sentences],
    };
    for interval in planned {
        let pools = record.pools(interval)?;
        let candidates = match strategy {
            DecodeStrategy::Beam => beam_search_sentence(sg, init_h.as_ref(), &pools, config)?,
            DecodeStrategy::Greedy => {
                let (words, cost) =
                    greedy_decode(sg, init_h.as_ref(), &pools, config.max_sentence_len)?;
                vec![(words, cost)]
            }
        };
        let Some((best, _)) = candidates.first() else {
            // exhausted beam: nothing decodable, stop here
            break;
        };
        if intervals.is_none() && is_eop(best) {
            break;
        }
        let best = best.clone();
        out.push(candidates);
        if out.len() == config.max_sentences && intervals.is_none() {
            break;
        }

        init_h = match mode {
            TrainMode::Sent => None,
            TrainMode::Cat => Some(final_hidden(sg, init_h.as_ref(), &best, &pools)?),
            TrainMode::Hier => {
                let pg = params.paragraph_gen.as_ref().expect("checked above");
                let last_h = final_hidden(sg, init_h.as_ref(), &best, &pools)?;
                let (avg, _) = embedding_average(&sg.emb, &best, false)?;
                let (s_emb, _) = crate::paragraph_generator::sentence_embed(pg, &avg, &last_h)?;
                let state = para_state.as_mut().expect("hier state");
                let (next_init, new_state, _) = paragraph_advance(pg, state, &s_emb)?;
                *state = new_state;
                Some(next_init)
            }
        };
    }
    Ok(out)
}

/// Layer-I hidden state after consuming a decoded sentence (EOS is never
/// fed back as an input).
fn final_hidden(
    params: &SentenceGenParams,
    init_h: Option<&Tensor>,
    words: &[usize],
    pools: &FeaturePools,
) -> Result<Tensor> {
    let inputs = match words.last() {
        Some(&EOS_ID) => &words[..words.len() - 1],
        _ => words,
    };
    let mut state = init_state(params.hidden_dim(), init_h)?;
    let mut rng = RngState::new(0);
    for &w in inputs {
        let (_, next, _) = step(params, &state, w, pools, Mode::Eval, 0.0, &mut rng)?;
        state = next;
    }
    Ok(state.h)
}
