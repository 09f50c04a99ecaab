//! Single-step word predictor assembled from the individual layers:
//! embedding -> recurrent layer I -> per-channel attention -> multimodal
//! fusion -> dropout -> tied output. Maintains per-sentence recurrent state.

use crate::corpus::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::{
    attend, attend_backward, attention_scores, attention_scores_backward, dropout,
    dropout_backward, embed_backward, embed_lookup, gru_backward, gru_step, multimodal_backward,
    multimodal_fuse, output_backward, output_logits, AttentionParams, AttnCache, EmbeddingParams,
    GruCache, GruParams, MmCache, Mode, MultimodalParams, OutCache, OutputParams,
};
use crate::numerics::{log_softmax, RngState, Tensor};

/// All learnable tensors of the sentence generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceGenParams {
    pub emb: EmbeddingParams,
    pub rnn1: GruParams,
    /// One attention channel per feature channel, in declared order.
    pub attn: Vec<(String, AttentionParams)>,
    pub mm: MultimodalParams,
    pub out: OutputParams,
}

impl SentenceGenParams {
    pub fn hidden_dim(&self) -> usize {
        self.rnn1.hidden_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.emb.vocab_size()
    }

    /// Same-shaped container of zeros, used to accumulate gradients.
    pub fn zeros_like(&self) -> SentenceGenParams {
        SentenceGenParams {
            emb: EmbeddingParams {
                table: Tensor::zeros(self.emb.table.shape()),
            },
            rnn1: zero_like_gru(&self.rnn1),
            attn: self
                .attn
                .iter()
                .map(|(name, a)| {
                    (
                        name.clone(),
                        AttentionParams {
                            w_q: Tensor::zeros(a.w_q.shape()),
                            u_q: Tensor::zeros(a.u_q.shape()),
                            b_q: Tensor::zeros(a.b_q.shape()),
                            w: Tensor::zeros(a.w.shape()),
                        },
                    )
                })
                .collect(),
            mm: MultimodalParams {
                channels: self
                    .mm
                    .channels
                    .iter()
                    .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                    .collect(),
                u_m: Tensor::zeros(self.mm.u_m.shape()),
                b_m: Tensor::zeros(self.mm.b_m.shape()),
            },
            out: OutputParams {
                w_hid: Tensor::zeros(self.out.w_hid.shape()),
                b_hid: Tensor::zeros(self.out.b_hid.shape()),
                b_soft: Tensor::zeros(self.out.b_soft.shape()),
            },
        }
    }
}

pub(crate) fn zero_like_gru(g: &GruParams) -> GruParams {
    GruParams {
        w_r: Tensor::zeros(g.w_r.shape()),
        u_r: Tensor::zeros(g.u_r.shape()),
        b_r: Tensor::zeros(g.b_r.shape()),
        w_z: Tensor::zeros(g.w_z.shape()),
        u_z: Tensor::zeros(g.u_z.shape()),
        b_z: Tensor::zeros(g.b_z.shape()),
        w_h: Tensor::zeros(g.w_h.shape()),
        u_h: Tensor::zeros(g.u_h.shape()),
        b_h: Tensor::zeros(g.b_h.shape()),
        activation: g.activation,
    }
}

/// Per-channel feature pools for one sentence: pool tensor of shape
/// (K*M x d_v) per channel.
#[derive(Debug, Clone)]
pub struct FeaturePools {
    pub channels: Vec<(String, Tensor)>,
}

impl FeaturePools {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing feature channel {name:?}")))
    }
}

/// Recurrent layer I state plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceGenState {
    pub h: Tensor,
    pub t: usize,
}

/// Fresh state: zeros for the first sentence in a paragraph, or the
/// paragraph state handed down by the paragraph generator.
pub fn init_state(hidden_dim: usize, init_h: Option<&Tensor>) -> Result<SentenceGenState> {
    let h = match init_h {
        Some(h) => {
            if h.shape() != [hidden_dim] {
                return Err(Error::dim("init_state", h.shape(), &[hidden_dim]));
            }
            h.clone()
        }
        None => Tensor::zeros(&[hidden_dim]),
    };
    Ok(SentenceGenState { h, t: 0 })
}

/// Intermediates for one word step, kept for the backward pass. Memory is
/// irrelevant at desk scale; everything is stored.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub word_id: usize,
    pub attn: Vec<ChannelCache>,
    pub gru: GruCache,
    pub us: Vec<Tensor>,
    pub mm: MmCache,
    pub dropout_mask: Tensor,
    pub out: OutCache,
    pub log_probs: Tensor,
}

#[derive(Debug, Clone)]
pub struct ChannelCache {
    pub cache: AttnCache,
    pub weights: Tensor,
}

/// One word step. Attention conditions on `state.h` (the pre-update hidden
/// state); the multimodal layer sees the post-GRU state.
pub fn step(
    params: &SentenceGenParams,
    state: &SentenceGenState,
    word_id: usize,
    pools: &FeaturePools,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut RngState,
) -> Result<(Tensor, SentenceGenState, StepCache)> {
    let x = embed_lookup(&params.emb, word_id)?;

    let mut attn_caches = Vec::with_capacity(params.attn.len());
    let mut us = Vec::with_capacity(params.attn.len());
    for (name, attn) in &params.attn {
        let pool = pools.get(name)?;
        let (scores, cache) = attention_scores(attn, pool, &state.h)?;
        let (u, weights) = attend(&scores, pool)?;
        attn_caches.push(ChannelCache { cache, weights });
        us.push(u);
    }

    let (h_new, gru_cache) = gru_step(&params.rnn1, &x, &state.h)?;
    let (m, mm_cache) = multimodal_fuse(&params.mm, &us, &h_new)?;
    let (m_drop, mask) = dropout(&m, dropout_rate, mode, rng)?;
    let (logits, out_cache) = output_logits(&params.out, &params.emb, &m_drop)?;
    let log_probs = log_softmax(&logits);

    let new_state = SentenceGenState {
        h: h_new,
        t: state.t + 1,
    };
    let cache = StepCache {
        word_id,
        attn: attn_caches,
        gru: gru_cache,
        us,
        mm: mm_cache,
        dropout_mask: mask,
        out: out_cache,
        log_probs,
    };
    Ok((cache.log_probs.clone(), new_state, cache))
}

/// Backward through one step. `dlogits` is the gradient at the logits
/// (softmax-cross-entropy gives p - onehot); `dh_carry` is the gradient
/// flowing into this step's output state from later steps. Returns the
/// gradient on the previous hidden state. `tied` mirrors
/// [`output_backward`].
pub fn step_backward(
    params: &SentenceGenParams,
    cache: &StepCache,
    pools: &FeaturePools,
    dlogits: &Tensor,
    dh_carry: &Tensor,
    grads: &mut SentenceGenParams,
    tied: bool,
) -> Result<Tensor> {
    let dm_drop = output_backward(
        &params.out,
        &params.emb,
        &cache.out,
        dlogits,
        &mut grads.out,
        &mut grads.emb,
        tied,
    );
    let dm = dropout_backward(&cache.dropout_mask, &dm_drop);
    let (dus, dh_from_mm) = multimodal_backward(
        &params.mm,
        &cache.mm,
        &cache.us,
        &cache.gru.h,
        &dm,
        &mut grads.mm,
    );

    let dh_total = dh_carry.add(&dh_from_mm)?;
    let (dx, mut dh_prev) = gru_backward(&params.rnn1, &cache.gru, &dh_total, &mut grads.rnn1);
    embed_backward(&mut grads.emb, cache.word_id, &dx);

    for (((name, attn), channel), du) in params.attn.iter().zip(&cache.attn).zip(&dus) {
        let pool = pools.get(name)?;
        let dscores = attend_backward(&channel.weights, pool, du);
        let (_, grad_attn) = grads
            .attn
            .iter_mut()
            .find(|(n, _)| n == name)
            .expect("grads mirror params");
        let dh_attn = attention_scores_backward(
            attn,
            &channel.cache,
            pool,
            &cache.gru.h_prev,
            &dscores,
            grad_attn,
        );
        dh_prev.add_assign(&dh_attn);
    }
    Ok(dh_prev)
}

/// Teacher-forced forward pass over a full sentence.
#[derive(Debug, Clone)]
pub struct SentenceForward {
    /// -log P per predicted word (every non-BOS position).
    pub word_costs: Vec<f64>,
    pub cost: f64,
    pub caches: Vec<StepCache>,
    pub targets: Vec<usize>,
    pub init_h: Tensor,
    pub last_h: Tensor,
}

/// Teacher-forced sentence pass. `words` must begin with BOS and end with
/// EOS; BOS is consumed as the first input and every following word is a
/// prediction target, EOS included. Conditioning on preceding sentences
/// enters only through `init_h`.
pub fn sentence_forward(
    params: &SentenceGenParams,
    init_h: Option<&Tensor>,
    words: &[usize],
    pools: &FeaturePools,
    mode: Mode,
    dropout_rate: f64,
    rng: &mut RngState,
) -> Result<SentenceForward> {
    check_sentence(words)?;
    let mut state = init_state(params.hidden_dim(), init_h)?;
    let init = state.h.clone();
    let mut caches = Vec::with_capacity(words.len() - 1);
    let mut word_costs = Vec::with_capacity(words.len() - 1);
    let mut targets = Vec::with_capacity(words.len() - 1);
    for t in 0..words.len() - 1 {
        let (log_probs, next, cache) =
            step(params, &state, words[t], pools, mode, dropout_rate, rng)?;
        let target = words[t + 1];
        if target >= params.vocab_size() {
            return Err(Error::Vocabulary {
                id: target,
                size: params.vocab_size(),
            });
        }
        word_costs.push(-log_probs.data()[target]);
        targets.push(target);
        caches.push(cache);
        state = next;
    }
    let mut cost = 0.0;
    for &c in &word_costs {
        cost += c;
    }
    Ok(SentenceForward {
        word_costs,
        cost,
        caches,
        targets,
        init_h: init,
        last_h: state.h,
    })
}

/// Sum of -log P over all non-BOS positions, plus the per-word breakdown.
pub fn sentence_cost(
    params: &SentenceGenParams,
    init_h: Option<&Tensor>,
    words: &[usize],
    pools: &FeaturePools,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = RngState::new(0); // unused in eval mode
    let fwd = sentence_forward(params, init_h, words, pools, Mode::Eval, 0.0, &mut rng)?;
    Ok((fwd.cost, fwd.word_costs))
}

pub fn check_sentence(words: &[usize]) -> Result<()> {
    if words.len() < 2 || words[0] != BOS_ID || *words.last().unwrap() != EOS_ID {
        return Err(Error::Corpus(format!(
            "sentence must begin with BOS and end with EOS, got {words:?}"
        )));
    }
    Ok(())
}

/// Backward through a teacher-forced sentence. `d_last_h` is any extra
/// gradient on the final hidden state (from the paragraph generator or from
/// state concatenation across sentences). Returns the gradient on the
/// initial hidden state.
pub fn sentence_backward(
    params: &SentenceGenParams,
    fwd: &SentenceForward,
    pools: &FeaturePools,
    d_last_h: Option<&Tensor>,
    grads: &mut SentenceGenParams,
    tied: bool,
) -> Result<Tensor> {
    let d_h = params.hidden_dim();
    let mut dh_carry = match d_last_h {
        Some(d) => d.clone(),
        None => Tensor::zeros(&[d_h]),
    };
    for t in (0..fwd.caches.len()).rev() {
        let cache = &fwd.caches[t];
        // d(-log p[target])/d logits = softmax - onehot
        let mut dlogits = cache.log_probs.map(f64::exp);
        dlogits.data_mut()[fwd.targets[t]] -= 1.0;
        dh_carry = step_backward(params, cache, pools, &dlogits, &dh_carry, grads, tied)?;
    }
    Ok(dh_carry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::numerics::{finite_diff_grad, grad_rel_error};

    pub(crate) fn tiny_params(seed: u64) -> (SentenceGenParams, FeaturePools) {
        let mut rng = RngState::new(seed);
        let (d_e, d_h, d_m, d_a, n) = (6, 6, 8, 4, 11);
        let channels = vec![("appearance".to_string(), 3), ("motion".to_string(), 2)];
        let scale = 0.4;
        let params = SentenceGenParams {
            emb: EmbeddingParams::init(d_e, n, &mut rng, scale),
            rnn1: GruParams::init(d_e, d_h, Activation::Relu, &mut rng, scale),
            attn: channels
                .iter()
                .map(|(name, d)| {
                    (
                        name.clone(),
                        AttentionParams::init(d_a, *d, d_h, &mut rng, scale),
                    )
                })
                .collect(),
            mm: MultimodalParams::init(d_m, &channels, d_h, &mut rng, scale),
            out: OutputParams::init(d_e, d_m, n, &mut rng, scale),
        };
        let pools = FeaturePools {
            channels: vec![
                ("appearance".to_string(), rng.uniform_tensor(&[4, 3], -1.0, 1.0)),
                ("motion".to_string(), rng.uniform_tensor(&[2, 2], -1.0, 1.0)),
            ],
        };
        (params, pools)
    }

    #[test]
    fn init_state_zero_and_value_semantics() {
        let s = init_state(4, None).unwrap();
        assert_eq!(s.h, Tensor::zeros(&[4]));
        let p = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let a = init_state(4, Some(&p)).unwrap();
        assert_eq!(a.h, p);
        let mut b = a.clone();
        b.h.data_mut()[0] = 9.0;
        assert_eq!(a.h.data()[0], 1.0);
        assert!(init_state(4, Some(&Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn step_log_probs_normalize() {
        let (params, pools) = tiny_params(5);
        let state = init_state(params.hidden_dim(), None).unwrap();
        let mut rng = RngState::new(0);
        let (lp, next, _) = step(&params, &state, 0, &pools, Mode::Eval, 0.0, &mut rng).unwrap();
        let total: f64 = lp.data().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert_eq!(next.t, 1);
    }

    #[test]
    fn pool_collapse_is_km_independent() {
        // every pool row identical -> attend returns that row whatever K, M
        let (params, _) = tiny_params(6);
        let mut rng = RngState::new(9);
        let row_a = rng.uniform_tensor(&[3], -1.0, 1.0);
        let row_m = rng.uniform_tensor(&[2], -1.0, 1.0);
        let make = |reps: usize| {
            let mut a = Tensor::zeros(&[reps, 3]);
            let mut m = Tensor::zeros(&[reps, 2]);
            for r in 0..reps {
                for j in 0..3 {
                    *a.at2_mut(r, j) = row_a.data()[j];
                }
                for j in 0..2 {
                    *m.at2_mut(r, j) = row_m.data()[j];
                }
            }
            FeaturePools {
                channels: vec![
                    ("appearance".to_string(), a),
                    ("motion".to_string(), m),
                ],
            }
        };
        let state = init_state(params.hidden_dim(), None).unwrap();
        let mut r1 = RngState::new(0);
        let mut r2 = RngState::new(0);
        let (lp1, _, _) = step(&params, &state, 2, &make(1), Mode::Eval, 0.0, &mut r1).unwrap();
        let (lp5, _, _) = step(&params, &state, 2, &make(5), Mode::Eval, 0.0, &mut r2).unwrap();
        for (a, b) in lp1.data().iter().zip(lp5.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_step_is_deterministic() {
        let (params, pools) = tiny_params(7);
        let state = init_state(params.hidden_dim(), None).unwrap();
        let mut r1 = RngState::new(1);
        let mut r2 = RngState::new(99);
        let (a, _, _) = step(&params, &state, 3, &pools, Mode::Eval, 0.5, &mut r1).unwrap();
        let (b, _, _) = step(&params, &state, 3, &pools, Mode::Eval, 0.5, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_weights_sum_to_one_per_channel() {
        let (params, pools) = tiny_params(8);
        let state = init_state(params.hidden_dim(), None).unwrap();
        let mut rng = RngState::new(0);
        let (_, _, cache) = step(&params, &state, 1, &pools, Mode::Eval, 0.0, &mut rng).unwrap();
        for ch in &cache.attn {
            assert!((ch.weights.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sentence_cost_uniform_model_is_ln_n() {
        let mut rng = RngState::new(0);
        let n = 11;
        let channels = vec![("appearance".to_string(), 3)];
        let params = SentenceGenParams {
            emb: EmbeddingParams::zeros(6, n),
            rnn1: GruParams::zeros(6, 6, Activation::Relu),
            attn: vec![(
                "appearance".to_string(),
                AttentionParams::zeros(4, 3, 6),
            )],
            mm: MultimodalParams::zeros(8, &channels, 6),
            out: OutputParams::zeros(6, 8, n),
        };
        let pools = FeaturePools {
            channels: vec![("appearance".to_string(), rng.uniform_tensor(&[2, 3], -1.0, 1.0))],
        };
        let words = [BOS_ID, 4, 7, EOS_ID];
        let (cost, per_word) = sentence_cost(&params, None, &words, &pools).unwrap();
        let ln_n = (n as f64).ln();
        for c in &per_word {
            assert!((c - ln_n).abs() < 1e-12);
        }
        assert!((cost - 3.0 * ln_n).abs() < 1e-12);
    }

    #[test]
    fn sentence_cost_matches_stepwise_recomputation() {
        let (params, pools) = tiny_params(10);
        let words = [BOS_ID, 3, 5, 2, EOS_ID];
        let (cost, per_word) = sentence_cost(&params, None, &words, &pools).unwrap();
        assert!((cost - per_word.iter().sum::<f64>()).abs() < 1e-12);

        // compositional oracle: drive `step` by hand
        let mut state = init_state(params.hidden_dim(), None).unwrap();
        let mut rng = RngState::new(0);
        let mut total = 0.0;
        for t in 0..words.len() - 1 {
            let (lp, next, _) =
                step(&params, &state, words[t], &pools, Mode::Eval, 0.0, &mut rng).unwrap();
            total += -lp.data()[words[t + 1]];
            state = next;
        }
        assert!((cost - total).abs() < 1e-12);
    }

    #[test]
    fn malformed_sentence_is_corpus_error() {
        let (params, pools) = tiny_params(11);
        assert!(sentence_cost(&params, None, &[3, 5, EOS_ID], &pools).is_err());
        assert!(sentence_cost(&params, None, &[BOS_ID, 3, 5], &pools).is_err());
        assert!(sentence_cost(&params, None, &[BOS_ID], &pools).is_err());
    }

    #[test]
    fn full_step_backward_matches_finite_differences() {
        let (params, pools) = tiny_params(12);
        let words = [BOS_ID, 3, 7, EOS_ID];
        let mut rng = RngState::new(0);
        let fwd = sentence_forward(&params, None, &words, &pools, Mode::Eval, 0.0, &mut rng).unwrap();
        let mut grads = params.zeros_like();
        let d_init =
            sentence_backward(&params, &fwd, &pools, None, &mut grads, true).unwrap();

        let loss = |p: &SentenceGenParams, init: Option<&Tensor>| -> f64 {
            sentence_cost(p, init, &words, &pools).unwrap().0
        };

        // init state gradient
        let zero = Tensor::zeros(&[params.hidden_dim()]);
        let fd_init = finite_diff_grad(
            |t| loss(&params, Some(t)),
            &zero,
            1e-5,
        );
        assert!(grad_rel_error(&d_init, &fd_init) < 1e-4);

        // embedding table carries gradient from both the lookup and the
        // tied output projection
        let fd_emb = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                q.emb.table = t.clone();
                loss(&q, None)
            },
            &params.emb.table,
            1e-5,
        );
        assert!(grad_rel_error(&grads.emb.table, &fd_emb) < 1e-4);

        // a sample of the remaining tensors; the exhaustive sweep lives in
        // the training module's full-model check
        let fd_uh = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                q.rnn1.u_h = t.clone();
                loss(&q, None)
            },
            &params.rnn1.u_h,
            1e-5,
        );
        assert!(grad_rel_error(&grads.rnn1.u_h, &fd_uh) < 1e-4);
        let fd_wq = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                q.attn[0].1.w_q = t.clone();
                loss(&q, None)
            },
            &params.attn[0].1.w_q,
            1e-5,
        );
        assert!(grad_rel_error(&grads.attn[0].1.w_q, &fd_wq) < 1e-4);
        let fd_um = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                q.mm.u_m = t.clone();
                loss(&q, None)
            },
            &params.mm.u_m,
            1e-5,
        );
        assert!(grad_rel_error(&grads.mm.u_m, &fd_um) < 1e-4);
    }
}
