//! Individual layers as paired forward/backward operations: word embedding,
//! GRU cell, attention channel, multimodal fusion, dropout, and the
//! tied-weight output stack.
//!
//! Each forward returns a cache of intermediates; the matching backward
//! consumes it and accumulates into a gradient container of the same shape
//! as the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    relu, relu_prime_from_output, sigmoid, softmax, stanh, stanh_prime_from_output, RngState,
    Tensor,
};

/// Forward-pass mode: training applies dropout, evaluation is a passthrough.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Recurrent state activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Stanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => relu(x),
            Activation::Stanh => stanh(x),
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn prime_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Relu => relu_prime_from_output(y),
            Activation::Stanh => stanh_prime_from_output(y),
        }
    }
}

// ---------------------------------------------------------------------------
// Word embedding
// ---------------------------------------------------------------------------

/// Embedding table, one column per vocabulary word (d_e x N). The same
/// storage doubles as the transposed softmax projection in [`output_logits`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingParams {
    pub table: Tensor,
}

impl EmbeddingParams {
    pub fn init(dim: usize, vocab: usize, rng: &mut RngState, scale: f64) -> EmbeddingParams {
        EmbeddingParams {
            table: rng.uniform_tensor(&[dim, vocab], -scale, scale),
        }
    }

    pub fn zeros(dim: usize, vocab: usize) -> EmbeddingParams {
        EmbeddingParams {
            table: Tensor::zeros(&[dim, vocab]),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[1]
    }
}

/// Column `word_id` of the embedding table.
pub fn embed_lookup(params: &EmbeddingParams, word_id: usize) -> Result<Tensor> {
    let (d, n) = params.table.dims2()?;
    if word_id >= n {
        return Err(Error::Vocabulary {
            id: word_id,
            size: n,
        });
    }
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        *o = params.table.at2(i, word_id);
    }
    Ok(Tensor::vector(out))
}

/// Accumulate the lookup gradient: it lands only in column `word_id`.
pub fn embed_backward(grads: &mut EmbeddingParams, word_id: usize, d_emb: &Tensor) {
    for i in 0..d_emb.len() {
        *grads.table.at2_mut(i, word_id) += d_emb.data()[i];
    }
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
    pub activation: Activation,
}

impl GruParams {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        activation: Activation,
        rng: &mut RngState,
        scale: f64,
    ) -> GruParams {
        let w = |rng: &mut RngState| rng.uniform_tensor(&[hidden_dim, input_dim], -scale, scale);
        let u = |rng: &mut RngState| rng.uniform_tensor(&[hidden_dim, hidden_dim], -scale, scale);
        GruParams {
            w_r: w(rng),
            u_r: u(rng),
            b_r: Tensor::zeros(&[hidden_dim]),
            w_z: w(rng),
            u_z: u(rng),
            b_z: Tensor::zeros(&[hidden_dim]),
            w_h: w(rng),
            u_h: u(rng),
            b_h: Tensor::zeros(&[hidden_dim]),
            activation,
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, activation: Activation) -> GruParams {
        GruParams {
            w_r: Tensor::zeros(&[hidden_dim, input_dim]),
            u_r: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_r: Tensor::zeros(&[hidden_dim]),
            w_z: Tensor::zeros(&[hidden_dim, input_dim]),
            u_z: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_z: Tensor::zeros(&[hidden_dim]),
            w_h: Tensor::zeros(&[hidden_dim, input_dim]),
            u_h: Tensor::zeros(&[hidden_dim, hidden_dim]),
            b_h: Tensor::zeros(&[hidden_dim]),
            activation,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_r.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.shape()[1]
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub r: Tensor,
    pub z: Tensor,
    pub h_tilde: Tensor,
    pub h: Tensor,
}

/// One GRU step:
/// r = sigma(W_r x + U_r h_prev + b_r), z = sigma(W_z x + U_z h_prev + b_z),
/// h~ = phi(W_h x + U_h (r . h_prev) + b_h), h = z . h_prev + (1 - z) . h~.
pub fn gru_step(params: &GruParams, x: &Tensor, h_prev: &Tensor) -> Result<(Tensor, GruCache)> {
    gru_step_inner(params, x, h_prev, None, None)
}

fn gru_step_inner(
    params: &GruParams,
    x: &Tensor,
    h_prev: &Tensor,
    force_r: Option<&Tensor>,
    force_z: Option<&Tensor>,
) -> Result<(Tensor, GruCache)> {
    let r = match force_r {
        Some(r) => r.clone(),
        None => sigmoid(
            &params
                .w_r
                .matvec(x)?
                .add(&params.u_r.matvec(h_prev)?)?
                .add(&params.b_r)?,
        ),
    };
    let z = match force_z {
        Some(z) => z.clone(),
        None => sigmoid(
            &params
                .w_z
                .matvec(x)?
                .add(&params.u_z.matvec(h_prev)?)?
                .add(&params.b_z)?,
        ),
    };
    let rh = r.mul(h_prev)?;
    let h_tilde = params.activation.apply(
        &params
            .w_h
            .matvec(x)?
            .add(&params.u_h.matvec(&rh)?)?
            .add(&params.b_h)?,
    );
    let h = z.mul(h_prev)?.add(&z.map(|v| 1.0 - v).mul(&h_tilde)?)?;
    let cache = GruCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        r,
        z,
        h_tilde,
        h: h.clone(),
    };
    Ok((h, cache))
}

/// Backward through one GRU step. Accumulates parameter gradients into
/// `grads` and returns (d_x, d_h_prev).
pub fn gru_backward(
    params: &GruParams,
    cache: &GruCache,
    dh: &Tensor,
    grads: &mut GruParams,
) -> (Tensor, Tensor) {
    let n = params.hidden_dim();
    let mut dx = Tensor::zeros(&[params.input_dim()]);
    let mut dh_prev = Tensor::zeros(&[n]);

    // h = z . h_prev + (1 - z) . h~
    let mut dz = Tensor::zeros(&[n]);
    let mut dht = Tensor::zeros(&[n]);
    for i in 0..n {
        let d = dh.data()[i];
        dz.data_mut()[i] = d * (cache.h_prev.data()[i] - cache.h_tilde.data()[i]);
        dht.data_mut()[i] = d * (1.0 - cache.z.data()[i]);
        dh_prev.data_mut()[i] += d * cache.z.data()[i];
    }

    // candidate state path
    let mut da_h = Tensor::zeros(&[n]);
    for i in 0..n {
        da_h.data_mut()[i] =
            dht.data()[i] * params.activation.prime_from_output(cache.h_tilde.data()[i]);
    }
    let rh = cache.r.mul(&cache.h_prev).expect("cached shapes agree");
    grads.w_h.add_outer(&da_h, &cache.x);
    grads.u_h.add_outer(&da_h, &rh);
    grads.b_h.add_assign(&da_h);
    dx.add_assign(&params.w_h.matvec_t(&da_h).expect("shape"));
    let drh = params.u_h.matvec_t(&da_h).expect("shape");
    let mut dr = Tensor::zeros(&[n]);
    for i in 0..n {
        dr.data_mut()[i] = drh.data()[i] * cache.h_prev.data()[i];
        dh_prev.data_mut()[i] += drh.data()[i] * cache.r.data()[i];
    }

    // gates
    let mut da_r = Tensor::zeros(&[n]);
    let mut da_z = Tensor::zeros(&[n]);
    for i in 0..n {
        let r = cache.r.data()[i];
        let z = cache.z.data()[i];
        da_r.data_mut()[i] = dr.data()[i] * r * (1.0 - r);
        da_z.data_mut()[i] = dz.data()[i] * z * (1.0 - z);
    }
    grads.w_r.add_outer(&da_r, &cache.x);
    grads.u_r.add_outer(&da_r, &cache.h_prev);
    grads.b_r.add_assign(&da_r);
    grads.w_z.add_outer(&da_z, &cache.x);
    grads.u_z.add_outer(&da_z, &cache.h_prev);
    grads.b_z.add_assign(&da_z);
    dx.add_assign(&params.w_r.matvec_t(&da_r).expect("shape"));
    dx.add_assign(&params.w_z.matvec_t(&da_z).expect("shape"));
    dh_prev.add_assign(&params.u_r.matvec_t(&da_r).expect("shape"));
    dh_prev.add_assign(&params.u_z.matvec_t(&da_z).expect("shape"));

    (dx, dh_prev)
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// One attention channel: score q_m = w^T stanh(W_q v_m + U_q h_prev + b_q),
/// shared by all features at all time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub u_q: Tensor,
    pub b_q: Tensor,
    pub w: Tensor,
}

impl AttentionParams {
    pub fn init(
        proj_dim: usize,
        feature_dim: usize,
        hidden_dim: usize,
        rng: &mut RngState,
        scale: f64,
    ) -> AttentionParams {
        AttentionParams {
            w_q: rng.uniform_tensor(&[proj_dim, feature_dim], -scale, scale),
            u_q: rng.uniform_tensor(&[proj_dim, hidden_dim], -scale, scale),
            b_q: Tensor::zeros(&[proj_dim]),
            w: rng.uniform_tensor(&[proj_dim], -scale, scale),
        }
    }

    pub fn zeros(proj_dim: usize, feature_dim: usize, hidden_dim: usize) -> AttentionParams {
        AttentionParams {
            w_q: Tensor::zeros(&[proj_dim, feature_dim]),
            u_q: Tensor::zeros(&[proj_dim, hidden_dim]),
            b_q: Tensor::zeros(&[proj_dim]),
            w: Tensor::zeros(&[proj_dim]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    /// stanh activations, one row per pooled feature (KM x d_a).
    pub acts: Tensor,
}

/// One scalar score per pooled feature, conditioned on the previous hidden
/// state.
pub fn attention_scores(
    params: &AttentionParams,
    pool: &Tensor,
    h_prev: &Tensor,
) -> Result<(Tensor, AttnCache)> {
    let (km, d_v) = pool.dims2()?;
    if km == 0 {
        return Err(Error::Config("attention pool must be nonempty".into()));
    }
    let d_a = params.b_q.len();
    let uh = params.u_q.matvec(h_prev)?.add(&params.b_q)?;
    let mut scores = vec![0.0; km];
    let mut acts = Tensor::zeros(&[km, d_a]);
    for m in 0..km {
        let v = Tensor::vector(pool.row(m).to_vec());
        let a = stanh(&params.w_q.matvec(&v)?.add(&uh)?);
        let mut s = 0.0;
        for j in 0..d_a {
            s += params.w.data()[j] * a.data()[j];
            *acts.at2_mut(m, j) = a.data()[j];
        }
        scores[m] = s;
        let _ = d_v;
    }
    Ok((Tensor::vector(scores), AttnCache { acts }))
}

/// Backward through [`attention_scores`]. Returns d_h_prev; the pooled
/// features are data, not parameters, so no gradient is produced for them.
pub fn attention_scores_backward(
    params: &AttentionParams,
    cache: &AttnCache,
    pool: &Tensor,
    h_prev: &Tensor,
    dscores: &Tensor,
    grads: &mut AttentionParams,
) -> Tensor {
    let (km, d_a) = cache.acts.dims2().expect("cache is 2-D");
    let mut dh_prev = Tensor::zeros(&[h_prev.len()]);
    for m in 0..km {
        let ds = dscores.data()[m];
        if ds == 0.0 {
            continue;
        }
        let mut da = Tensor::zeros(&[d_a]);
        for j in 0..d_a {
            let g = cache.acts.at2(m, j);
            grads.w.data_mut()[j] += ds * g;
            da.data_mut()[j] = ds * params.w.data()[j] * stanh_prime_from_output(g);
        }
        let v = Tensor::vector(pool.row(m).to_vec());
        grads.w_q.add_outer(&da, &v);
        grads.u_q.add_outer(&da, h_prev);
        grads.b_q.add_assign(&da);
        dh_prev.add_assign(&params.u_q.matvec_t(&da).expect("shape"));
    }
    dh_prev
}

/// Softmax the scores and take the convex combination of the pool rows:
/// u = sum_m beta_m v_m.
pub fn attend(scores: &Tensor, pool: &Tensor) -> Result<(Tensor, Tensor)> {
    let (km, d_v) = pool.dims2()?;
    if scores.len() != km {
        return Err(Error::dim("attend", scores.shape(), pool.shape()));
    }
    let weights = softmax(scores);
    let mut u = vec![0.0; d_v];
    for m in 0..km {
        let b = weights.data()[m];
        let row = pool.row(m);
        for (uj, vj) in u.iter_mut().zip(row) {
            *uj += b * vj;
        }
    }
    Ok((Tensor::vector(u), weights))
}

/// Backward through [`attend`]: d_u -> d_scores.
pub fn attend_backward(weights: &Tensor, pool: &Tensor, du: &Tensor) -> Tensor {
    let (km, _) = pool.dims2().expect("pool is 2-D");
    let mut dweights = vec![0.0; km];
    for m in 0..km {
        let mut acc = 0.0;
        for (vj, dj) in pool.row(m).iter().zip(du.data()) {
            acc += vj * dj;
        }
        dweights[m] = acc;
    }
    let mut dot = 0.0;
    for m in 0..km {
        dot += weights.data()[m] * dweights[m];
    }
    let mut dscores = vec![0.0; km];
    for m in 0..km {
        dscores[m] = weights.data()[m] * (dweights[m] - dot);
    }
    Tensor::vector(dscores)
}

// ---------------------------------------------------------------------------
// Multimodal fusion
// ---------------------------------------------------------------------------

/// m = stanh(sum_c W_c u_c + U_m h + b_m). One projection per feature
/// channel, in a fixed declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalParams {
    /// (channel name, projection W_c of shape d_m x d_vc), in channel order.
    pub channels: Vec<(String, Tensor)>,
    pub u_m: Tensor,
    pub b_m: Tensor,
}

impl MultimodalParams {
    pub fn init(
        fused_dim: usize,
        channel_dims: &[(String, usize)],
        hidden_dim: usize,
        rng: &mut RngState,
        scale: f64,
    ) -> MultimodalParams {
        MultimodalParams {
            channels: channel_dims
                .iter()
                .map(|(name, d)| {
                    (
                        name.clone(),
                        rng.uniform_tensor(&[fused_dim, *d], -scale, scale),
                    )
                })
                .collect(),
            u_m: rng.uniform_tensor(&[fused_dim, hidden_dim], -scale, scale),
            b_m: Tensor::zeros(&[fused_dim]),
        }
    }

    pub fn zeros(
        fused_dim: usize,
        channel_dims: &[(String, usize)],
        hidden_dim: usize,
    ) -> MultimodalParams {
        MultimodalParams {
            channels: channel_dims
                .iter()
                .map(|(name, d)| (name.clone(), Tensor::zeros(&[fused_dim, *d])))
                .collect(),
            u_m: Tensor::zeros(&[fused_dim, hidden_dim]),
            b_m: Tensor::zeros(&[fused_dim]),
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.b_m.len()
    }
}

#[derive(Debug, Clone)]
pub struct MmCache {
    pub m: Tensor,
}

/// Fuse the attended features (one per channel, in channel order) with the
/// recurrent hidden state.
pub fn multimodal_fuse(
    params: &MultimodalParams,
    us: &[Tensor],
    h: &Tensor,
) -> Result<(Tensor, MmCache)> {
    if us.len() != params.channels.len() {
        return Err(Error::Config(format!(
            "multimodal_fuse expects {} channel inputs, got {}",
            params.channels.len(),
            us.len()
        )));
    }
    let mut pre = params.u_m.matvec(h)?.add(&params.b_m)?;
    for ((_, w), u) in params.channels.iter().zip(us) {
        pre.add_assign(&w.matvec(u)?);
    }
    let m = stanh(&pre);
    Ok((m.clone(), MmCache { m }))
}

/// Backward through [`multimodal_fuse`]. Returns per-channel d_u (in channel
/// order) and d_h.
pub fn multimodal_backward(
    params: &MultimodalParams,
    cache: &MmCache,
    us: &[Tensor],
    h: &Tensor,
    dm: &Tensor,
    grads: &mut MultimodalParams,
) -> (Vec<Tensor>, Tensor) {
    let d_m = params.fused_dim();
    let mut da = Tensor::zeros(&[d_m]);
    for i in 0..d_m {
        da.data_mut()[i] = dm.data()[i] * stanh_prime_from_output(cache.m.data()[i]);
    }
    let mut dus = Vec::with_capacity(us.len());
    for (((_, w), u), (_, gw)) in params
        .channels
        .iter()
        .zip(us)
        .zip(grads.channels.iter_mut())
    {
        gw.add_outer(&da, u);
        dus.push(w.matvec_t(&da).expect("shape"));
    }
    grads.u_m.add_outer(&da, h);
    grads.b_m.add_assign(&da);
    let dh = params.u_m.matvec_t(&da).expect("shape");
    (dus, dh)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); evaluation is the
/// identity. Returns the output and the mask needed by the backward pass.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut RngState) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    match mode {
        Mode::Eval => Ok((x.clone(), x.map(|_| 1.0))),
        Mode::Train => {
            if rate == 0.0 {
                return Ok((x.clone(), x.map(|_| 1.0)));
            }
            let keep = 1.0 / (1.0 - rate);
            let mut mask = Tensor::zeros(x.shape());
            for m in mask.data_mut() {
                *m = if rng.next_f64() < rate { 0.0 } else { keep };
            }
            Ok((x.mul(&mask)?, mask))
        }
    }
}

pub fn dropout_backward(mask: &Tensor, dy: &Tensor) -> Tensor {
    dy.mul(mask).expect("mask shape matches")
}

// ---------------------------------------------------------------------------
// Tied output stack
// ---------------------------------------------------------------------------

/// Hidden layer plus tied softmax projection. The projection matrix is the
/// transpose of the embedding table and is not stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputParams {
    pub w_hid: Tensor,
    pub b_hid: Tensor,
    pub b_soft: Tensor,
}

impl OutputParams {
    pub fn init(
        embed_dim: usize,
        fused_dim: usize,
        vocab: usize,
        rng: &mut RngState,
        scale: f64,
    ) -> OutputParams {
        OutputParams {
            w_hid: rng.uniform_tensor(&[embed_dim, fused_dim], -scale, scale),
            b_hid: Tensor::zeros(&[embed_dim]),
            b_soft: Tensor::zeros(&[vocab]),
        }
    }

    pub fn zeros(embed_dim: usize, fused_dim: usize, vocab: usize) -> OutputParams {
        OutputParams {
            w_hid: Tensor::zeros(&[embed_dim, fused_dim]),
            b_hid: Tensor::zeros(&[embed_dim]),
            b_soft: Tensor::zeros(&[vocab]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutCache {
    pub m: Tensor,
    pub hid: Tensor,
}

/// logits = E^T stanh(W_hid m + b_hid) + b_soft. `emb` is the same storage
/// used by [`embed_lookup`]; the weight sharing is real.
pub fn output_logits(
    out: &OutputParams,
    emb: &EmbeddingParams,
    m: &Tensor,
) -> Result<(Tensor, OutCache)> {
    let hid = stanh(&out.w_hid.matvec(m)?.add(&out.b_hid)?);
    let logits = emb.table.matvec_t(&hid)?.add(&out.b_soft)?;
    Ok((
        logits,
        OutCache {
            m: m.clone(),
            hid,
        },
    ))
}

/// Backward through [`output_logits`]. Accumulates into both the output
/// parameters and the shared embedding table (unless `tied` is false, a
/// self-check knob used by gradcheck mutation testing). Returns d_m.
pub fn output_backward(
    out: &OutputParams,
    emb: &EmbeddingParams,
    cache: &OutCache,
    dlogits: &Tensor,
    out_grads: &mut OutputParams,
    emb_grads: &mut EmbeddingParams,
    tied: bool,
) -> Tensor {
    out_grads.b_soft.add_assign(dlogits);
    if tied {
        emb_grads.table.add_outer(&cache.hid, dlogits);
    }
    let dhid = emb.table.matvec(dlogits).expect("shape");
    let d_e = cache.hid.len();
    let mut da = Tensor::zeros(&[d_e]);
    for i in 0..d_e {
        da.data_mut()[i] = dhid.data()[i] * stanh_prime_from_output(cache.hid.data()[i]);
    }
    out_grads.w_hid.add_outer(&da, &cache.m);
    out_grads.b_hid.add_assign(&da);
    out.w_hid.matvec_t(&da).expect("shape")
}
