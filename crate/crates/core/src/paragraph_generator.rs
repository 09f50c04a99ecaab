//! Paragraph-level recurrence: compresses a finished sentence into a
//! sentential embedding, advances the asynchronous second recurrent layer,
//! and emits the paragraph state that reinitializes the sentence generator.

use crate::corpus::BOS_ID;
use crate::error::Result;
use crate::layers::{
    embed_lookup, gru_backward, gru_step, EmbeddingParams, GruCache, GruParams,
};
use crate::numerics::{stanh, stanh_prime_from_output, Tensor};
use crate::sentence_generator::zero_like_gru;

/// Learnable tensors of the paragraph generator: the sentence embedding
/// layer, recurrent layer II, and the paragraph state layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphGenParams {
    /// Maps [avg word embedding || last h of layer I] -> d_s, stanh.
    pub sent_w: Tensor,
    pub sent_b: Tensor,
    /// Recurrent layer II: input d_s, hidden d_p. Updates once per sentence.
    pub rnn2: GruParams,
    /// Maps [rnn2 hidden || sentence embedding] -> d_h, stanh.
    pub state_w: Tensor,
    pub state_b: Tensor,
}

impl ParagraphGenParams {
    pub fn sent_dim(&self) -> usize {
        self.sent_b.len()
    }

    pub fn para_hidden_dim(&self) -> usize {
        self.rnn2.hidden_dim()
    }

    pub fn zeros_like(&self) -> ParagraphGenParams {
        ParagraphGenParams {
            sent_w: Tensor::zeros(self.sent_w.shape()),
            sent_b: Tensor::zeros(self.sent_b.shape()),
            rnn2: zero_like_gru(&self.rnn2),
            state_w: Tensor::zeros(self.state_w.shape()),
            state_b: Tensor::zeros(self.state_b.shape()),
        }
    }
}

/// Recurrent layer II state; advances exactly once per completed sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphRnnState {
    pub h2: Tensor,
    pub sentence_index: usize,
}

impl ParagraphRnnState {
    /// Zero state at paragraph start, mirroring the layer-I convention.
    pub fn start(para_hidden_dim: usize) -> ParagraphRnnState {
        ParagraphRnnState {
            h2: Tensor::zeros(&[para_hidden_dim]),
            sentence_index: 0,
        }
    }
}

/// Arithmetic mean of the word embeddings of a sentence. BOS carries no
/// content and is excluded (unless `include_bos`); EOS is included. Returns
/// the averaged ids alongside the mean so the backward pass can fan the
/// gradient back out.
pub fn embedding_average(
    emb: &EmbeddingParams,
    words: &[usize],
    include_bos: bool,
) -> Result<(Tensor, Vec<usize>)> {
    let mut included: Vec<usize> = words
        .iter()
        .copied()
        .filter(|&w| include_bos || w != BOS_ID)
        .collect();
    if included.is_empty() {
        // degenerate EOP-like case: fall back to whatever the sentence holds
        included = words.to_vec();
    }
    let mut avg = Tensor::zeros(&[emb.dim()]);
    for &w in &included {
        avg.add_assign(&embed_lookup(emb, w)?);
    }
    let avg = avg.scale(1.0 / included.len() as f64);
    Ok((avg, included))
}

/// Fan the average's gradient back into the embedding table.
pub fn embedding_average_backward(
    grads: &mut EmbeddingParams,
    included: &[usize],
    d_avg: &Tensor,
) {
    let scale = 1.0 / included.len() as f64;
    for &w in included {
        for i in 0..d_avg.len() {
            *grads.table.at2_mut(i, w) += scale * d_avg.data()[i];
        }
    }
}

#[derive(Debug, Clone)]
pub struct SentEmbedCache {
    pub avg: Tensor,
    pub last_h: Tensor,
    pub s: Tensor,
}

/// s = stanh(W [avg || last_h] + b): the final sentence representation.
pub fn sentence_embed(
    params: &ParagraphGenParams,
    avg: &Tensor,
    last_h: &Tensor,
) -> Result<(Tensor, SentEmbedCache)> {
    let cat = Tensor::concat(&[avg, last_h]);
    let s = stanh(&params.sent_w.matvec(&cat)?.add(&params.sent_b)?);
    Ok((
        s.clone(),
        SentEmbedCache {
            avg: avg.clone(),
            last_h: last_h.clone(),
            s,
        },
    ))
}

/// Backward through [`sentence_embed`]; returns (d_avg, d_last_h).
pub fn sentence_embed_backward(
    params: &ParagraphGenParams,
    cache: &SentEmbedCache,
    ds: &Tensor,
    grads: &mut ParagraphGenParams,
) -> (Tensor, Tensor) {
    let d_s = params.sent_dim();
    let mut da = Tensor::zeros(&[d_s]);
    for i in 0..d_s {
        da.data_mut()[i] = ds.data()[i] * stanh_prime_from_output(cache.s.data()[i]);
    }
    let cat = Tensor::concat(&[&cache.avg, &cache.last_h]);
    grads.sent_w.add_outer(&da, &cat);
    grads.sent_b.add_assign(&da);
    let dcat = params.sent_w.matvec_t(&da).expect("shape");
    let d_e = cache.avg.len();
    let d_avg = Tensor::vector(dcat.data()[..d_e].to_vec());
    let d_last_h = Tensor::vector(dcat.data()[d_e..].to_vec());
    (d_avg, d_last_h)
}

#[derive(Debug, Clone)]
pub struct AdvanceCache {
    pub gru: GruCache,
    pub s_emb: Tensor,
    pub h2_new: Tensor,
    pub next_init_h: Tensor,
}

/// Advance recurrent layer II by one sentence and emit the paragraph state
/// used as the initial layer-I hidden state of the next sentence.
pub fn paragraph_advance(
    params: &ParagraphGenParams,
    state: &ParagraphRnnState,
    s_emb: &Tensor,
) -> Result<(Tensor, ParagraphRnnState, AdvanceCache)> {
    let (h2_new, gru_cache) = gru_step(&params.rnn2, s_emb, &state.h2)?;
    let cat = Tensor::concat(&[&h2_new, s_emb]);
    let next_init_h = stanh(&params.state_w.matvec(&cat)?.add(&params.state_b)?);
    let new_state = ParagraphRnnState {
        h2: h2_new.clone(),
        sentence_index: state.sentence_index + 1,
    };
    let cache = AdvanceCache {
        gru: gru_cache,
        s_emb: s_emb.clone(),
        h2_new,
        next_init_h: next_init_h.clone(),
    };
    Ok((next_init_h, new_state, cache))
}

/// Backward through [`paragraph_advance`]. `d_next_init` is the gradient on
/// the emitted paragraph state; `d_h2_future` the gradient flowing into the
/// new rnn2 hidden state from later sentences. Returns
/// (d_h2_prev, d_s_emb).
pub fn paragraph_advance_backward(
    params: &ParagraphGenParams,
    cache: &AdvanceCache,
    d_next_init: &Tensor,
    d_h2_future: &Tensor,
    grads: &mut ParagraphGenParams,
) -> (Tensor, Tensor) {
    let d_h = d_next_init.len();
    let mut da = Tensor::zeros(&[d_h]);
    for i in 0..d_h {
        da.data_mut()[i] =
            d_next_init.data()[i] * stanh_prime_from_output(cache.next_init_h.data()[i]);
    }
    let cat = Tensor::concat(&[&cache.h2_new, &cache.s_emb]);
    grads.state_w.add_outer(&da, &cat);
    grads.state_b.add_assign(&da);
    let dcat = params.state_w.matvec_t(&da).expect("shape");
    let d_p = cache.h2_new.len();
    let mut d_h2_new = Tensor::vector(dcat.data()[..d_p].to_vec());
    let mut d_s_emb = Tensor::vector(dcat.data()[d_p..].to_vec());
    d_h2_new.add_assign(d_h2_future);
    let (dx, d_h2_prev) = gru_backward(&params.rnn2, &cache.gru, &d_h2_new, &mut grads.rnn2);
    d_s_emb.add_assign(&dx);
    (d_h2_prev, d_s_emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS_ID;
    use crate::layers::Activation;
    use crate::numerics::{finite_diff_grad, grad_rel_error, RngState, STANH_SCALE};

    fn tiny(seed: u64) -> ParagraphGenParams {
        let mut rng = RngState::new(seed);
        let (d_e, d_h, d_s, d_p) = (4, 5, 6, 7);
        ParagraphGenParams {
            sent_w: rng.uniform_tensor(&[d_s, d_e + d_h], -0.4, 0.4),
            sent_b: Tensor::zeros(&[d_s]),
            rnn2: GruParams::init(d_s, d_p, Activation::Stanh, &mut rng, 0.4),
            state_w: rng.uniform_tensor(&[d_h, d_p + d_s], -0.4, 0.4),
            state_b: Tensor::zeros(&[d_h]),
        }
    }

    #[test]
    fn embedding_average_basics() {
        let mut rng = RngState::new(3);
        let emb = EmbeddingParams::init(4, 8, &mut rng, 0.5);
        // single word
        let (avg, _) = embedding_average(&emb, &[5], false).unwrap();
        assert_eq!(avg, embed_lookup(&emb, 5).unwrap());
        // two words -> midpoint
        let (avg, _) = embedding_average(&emb, &[5, 6], false).unwrap();
        let p = embed_lookup(&emb, 5).unwrap();
        let q = embed_lookup(&emb, 6).unwrap();
        for i in 0..4 {
            assert!((avg.data()[i] - 0.5 * (p.data()[i] + q.data()[i])).abs() < 1e-15);
        }
        // order-free
        let (a, _) = embedding_average(&emb, &[2, 5, 7, EOS_ID], false).unwrap();
        let (b, _) = embedding_average(&emb, &[7, EOS_ID, 5, 2], false).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        // BOS excluded, EOS included
        let (with_bos, ids) = embedding_average(&emb, &[BOS_ID, 5, EOS_ID], false).unwrap();
        assert_eq!(ids, vec![5, EOS_ID]);
        let (manual, _) = embedding_average(&emb, &[5, EOS_ID], false).unwrap();
        assert_eq!(with_bos, manual);
        // EOP sentence degenerates to the EOS embedding alone
        let (eop, ids) = embedding_average(&emb, &[BOS_ID, EOS_ID], false).unwrap();
        assert_eq!(ids, vec![EOS_ID]);
        assert_eq!(eop, embed_lookup(&emb, EOS_ID).unwrap());
    }

    #[test]
    fn sentence_embed_zero_params_and_bound() {
        let p = tiny(1).zeros_like();
        let mut rng = RngState::new(2);
        let avg = rng.uniform_tensor(&[4], -1.0, 1.0);
        let last_h = rng.uniform_tensor(&[5], -1.0, 1.0);
        let (s, _) = sentence_embed(&p, &avg, &last_h).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));

        let p = tiny(1);
        let (s, _) = sentence_embed(&p, &avg, &last_h).unwrap();
        assert!(s.max_abs() <= STANH_SCALE);
    }

    #[test]
    fn sentence_embed_backward_matches_finite_differences() {
        let p = tiny(4);
        let mut rng = RngState::new(5);
        let avg = rng.uniform_tensor(&[4], -1.0, 1.0);
        let last_h = rng.uniform_tensor(&[5], -1.0, 1.0);
        let probe = rng.uniform_tensor(&[6], -1.0, 1.0);
        let (_, cache) = sentence_embed(&p, &avg, &last_h).unwrap();
        let mut grads = p.zeros_like();
        let (d_avg, d_last) = sentence_embed_backward(&p, &cache, &probe, &mut grads);

        let loss = |p: &ParagraphGenParams, avg: &Tensor, h: &Tensor| -> f64 {
            let (s, _) = sentence_embed(p, avg, h).unwrap();
            s.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let fd = finite_diff_grad(|t| loss(&p, t, &last_h), &avg, 1e-5);
        assert!(grad_rel_error(&d_avg, &fd) < 1e-4);
        let fd = finite_diff_grad(|t| loss(&p, &avg, t), &last_h, 1e-5);
        assert!(grad_rel_error(&d_last, &fd) < 1e-4);
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.sent_w = t.clone();
                loss(&q, &avg, &last_h)
            },
            &p.sent_w,
            1e-5,
        );
        assert!(grad_rel_error(&grads.sent_w, &fd) < 1e-4);
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.sent_b = t.clone();
                loss(&q, &avg, &last_h)
            },
            &p.sent_b,
            1e-5,
        );
        assert!(grad_rel_error(&grads.sent_b, &fd) < 1e-4);
    }

    #[test]
    fn advance_zero_params_gives_zero_state() {
        let p = tiny(1).zeros_like();
        let state = ParagraphRnnState::start(7);
        let mut rng = RngState::new(6);
        let s_emb = rng.uniform_tensor(&[6], -1.0, 1.0);
        let (next, new_state, _) = paragraph_advance(&p, &state, &s_emb).unwrap();
        assert!(next.data().iter().all(|&v| v == 0.0));
        assert_eq!(new_state.sentence_index, 1);
    }

    #[test]
    fn advance_depends_on_history() {
        let p = tiny(7);
        let mut rng = RngState::new(8);
        let s_emb = rng.uniform_tensor(&[6], -1.0, 1.0);
        let a = ParagraphRnnState::start(7);
        let b = ParagraphRnnState {
            h2: rng.uniform_tensor(&[7], -1.0, 1.0),
            sentence_index: 0,
        };
        let (next_a, _, _) = paragraph_advance(&p, &a, &s_emb).unwrap();
        let (next_b, _, _) = paragraph_advance(&p, &b, &s_emb).unwrap();
        assert_ne!(next_a, next_b);
        // purity: same inputs, same output
        let (again, _, _) = paragraph_advance(&p, &a, &s_emb).unwrap();
        assert_eq!(next_a, again);
    }

    #[test]
    fn advance_backward_matches_finite_differences_through_two_steps() {
        // loss reads the SECOND advance's output, so the gradient w.r.t. the
        // parameters must flow back through the first advance as well.
        let p = tiny(9);
        let mut rng = RngState::new(10);
        let s1 = rng.uniform_tensor(&[6], -1.0, 1.0);
        let s2 = rng.uniform_tensor(&[6], -1.0, 1.0);
        let probe = rng.uniform_tensor(&[5], -1.0, 1.0);

        let chain = |p: &ParagraphGenParams| -> f64 {
            let st0 = ParagraphRnnState::start(7);
            let (_, st1, _) = paragraph_advance(p, &st0, &s1).unwrap();
            let (out2, _, _) = paragraph_advance(p, &st1, &s2).unwrap();
            out2.data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        // analytic: backprop through both advances
        let st0 = ParagraphRnnState::start(7);
        let (_, st1, cache1) = paragraph_advance(&p, &st0, &s1).unwrap();
        let (_, _, cache2) = paragraph_advance(&p, &st1, &s2).unwrap();
        let mut grads = p.zeros_like();
        let zero_h = Tensor::zeros(&[5]);
        let zero_h2 = Tensor::zeros(&[7]);
        let (d_h2_prev, _d_s2) =
            paragraph_advance_backward(&p, &cache2, &probe, &zero_h2, &mut grads);
        let (_d_h2_0, _d_s1) =
            paragraph_advance_backward(&p, &cache1, &zero_h, &d_h2_prev, &mut grads);

        macro_rules! check {
            ($field:ident) => {{
                let fd = finite_diff_grad(
                    |t| {
                        let mut q = p.clone();
                        q.$field = t.clone();
                        chain(&q)
                    },
                    &p.$field,
                    1e-5,
                );
                assert!(
                    grad_rel_error(&grads.$field, &fd) < 1e-4,
                    "mismatch on {}",
                    stringify!($field)
                );
            }};
        }
        check!(sent_w); // untouched, both zero
        check!(state_w);
        check!(state_b);
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.rnn2.u_h = t.clone();
                chain(&q)
            },
            &p.rnn2.u_h,
            1e-5,
        );
        assert!(grad_rel_error(&grads.rnn2.u_h, &fd) < 1e-4);
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                q.rnn2.w_z = t.clone();
                chain(&q)
            },
            &p.rnn2.w_z,
            1e-5,
        );
        assert!(grad_rel_error(&grads.rnn2.w_z, &fd) < 1e-4);
    }
}
