//! Static Fusion stack: post-norm transformer layers whose self-attention
//! queries and layer norms are modulated by the static-profile embedding.
//!
//! With a zero profile embedding and zero modulation biases the stack
//! reduces exactly to an unconditioned post-norm encoder; the conditioning
//! enters as a per-head query gain `1 + Linear_σ(e^z)` / shift
//! `Linear_μ(e^z)` and a per-layer-norm gain `1 + Linear_γ(e^z)` / bias
//! `Linear_β(e^z)`.

use crate::numerics::{ops, NumericsError, SplitMix64, Tape, Tensor};
use crate::tokenizer::{EmbeddingTables, TokenSequence};

use super::params::{init_normal, init_ones, init_zeros, ParamStore};

pub const MASKED_SCORE: f64 = -1e30;

pub struct HeadParams {
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub v_w: Tensor,
    pub v_b: Tensor,
    // profile modulation maps; biases zero-initialized so the head reduces
    // to plain attention when e^z = 0
    pub sigma_w: Tensor,
    pub sigma_b: Tensor,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
}

pub struct PgLnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub gain_w: Tensor,
    pub gain_b: Tensor,
    pub bias_w: Tensor,
    pub bias_b: Tensor,
}

pub struct SfLayerParams {
    pub heads: Vec<HeadParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln1: PgLnParams,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2: PgLnParams,
}

pub struct SfStack {
    pub layers: Vec<SfLayerParams>,
    pub d: usize,
    pub k_heads: usize,
    pub ln_eps: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("hidden size {d} not divisible by {k} heads")]
    HeadSplit { d: usize, k: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn pgln_init(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut SplitMix64,
) -> PgLnParams {
    PgLnParams {
        gamma: store.register(&format!("{prefix}.gamma"), init_ones(vec![d])),
        beta: store.register(&format!("{prefix}.beta"), init_zeros(vec![d])),
        gain_w: store.register(&format!("{prefix}.gain.w"), init_normal(vec![d, d], rng)),
        gain_b: store.register(&format!("{prefix}.gain.b"), init_zeros(vec![d])),
        bias_w: store.register(&format!("{prefix}.bias.w"), init_normal(vec![d, d], rng)),
        bias_b: store.register(&format!("{prefix}.bias.b"), init_zeros(vec![d])),
    }
}

impl SfStack {
    /// Parameter names follow `encoder.layer.{i}.{component}.{param}`.
    pub fn init(
        store: &mut ParamStore,
        n_layers: usize,
        d: usize,
        k_heads: usize,
        ln_eps: f64,
        rng: &mut SplitMix64,
    ) -> Result<SfStack, ModelError> {
        if d % k_heads != 0 {
            return Err(ModelError::HeadSplit { d, k: k_heads });
        }
        let dk = d / k_heads;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let lp = format!("encoder.layer.{i}");
            let mut heads = Vec::with_capacity(k_heads);
            for j in 0..k_heads {
                let hp = format!("{lp}.attn.head.{j}");
                heads.push(HeadParams {
                    q_w: store.register(&format!("{hp}.q.w"), init_normal(vec![d, dk], rng)),
                    q_b: store.register(&format!("{hp}.q.b"), init_zeros(vec![dk])),
                    k_w: store.register(&format!("{hp}.k.w"), init_normal(vec![d, dk], rng)),
                    k_b: store.register(&format!("{hp}.k.b"), init_zeros(vec![dk])),
                    v_w: store.register(&format!("{hp}.v.w"), init_normal(vec![d, dk], rng)),
                    v_b: store.register(&format!("{hp}.v.b"), init_zeros(vec![dk])),
                    sigma_w: store
                        .register(&format!("{hp}.sigma.w"), init_normal(vec![d, dk], rng)),
                    sigma_b: store.register(&format!("{hp}.sigma.b"), init_zeros(vec![dk])),
                    mu_w: store.register(&format!("{hp}.mu.w"), init_normal(vec![d, dk], rng)),
                    mu_b: store.register(&format!("{hp}.mu.b"), init_zeros(vec![dk])),
                });
            }
            let out_w = store.register(&format!("{lp}.attn.out.w"), init_normal(vec![d, d], rng));
            let out_b = store.register(&format!("{lp}.attn.out.b"), init_zeros(vec![d]));
            let ln1 = pgln_init(store, &format!("{lp}.ln1"), d, rng);
            let ffn_w1 =
                store.register(&format!("{lp}.ffn.w1"), init_normal(vec![d, 4 * d], rng));
            let ffn_b1 = store.register(&format!("{lp}.ffn.b1"), init_zeros(vec![4 * d]));
            let ffn_w2 =
                store.register(&format!("{lp}.ffn.w2"), init_normal(vec![4 * d, d], rng));
            let ffn_b2 = store.register(&format!("{lp}.ffn.b2"), init_zeros(vec![d]));
            let ln2 = pgln_init(store, &format!("{lp}.ln2"), d, rng);
            layers.push(SfLayerParams {
                heads,
                out_w,
                out_b,
                ln1,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2,
            });
        }
        Ok(SfStack {
            layers,
            d,
            k_heads,
            ln_eps,
        })
    }
}

/// Additive score mask: 0 on valid key positions, a large negative on the
/// rest. Constant — gradients never flow through it.
pub fn attention_mask_bias(rows: usize, key_mask: &[u8]) -> Tensor {
    let cols = key_mask.len();
    let mut vals = vec![0.0; rows * cols];
    for j in 0..cols {
        if key_mask[j] == 0 {
            for i in 0..rows {
                vals[i * cols + j] = MASKED_SCORE;
            }
        }
    }
    Tensor::from_vec(vec![rows, cols], vals)
}

/// Profile-guided multi-head self-attention over `h` [L×d].
pub fn pg_sa(
    tape: &Tape,
    h: &Tensor,
    e_z: &Tensor,
    mask: &[u8],
    layer: &SfLayerParams,
    k_heads: usize,
) -> Result<Tensor, ModelError> {
    let d = h.shape()[1];
    if d % k_heads != 0 {
        return Err(ModelError::HeadSplit { d, k: k_heads });
    }
    let dk = d / k_heads;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mask_bias = attention_mask_bias(h.shape()[0], mask);
    let mut ctx: Option<Tensor> = None;
    for head in &layer.heads {
        let q0 = ops::add_row(tape, &ops::matmul(tape, h, &head.q_w)?, &head.q_b);
        let sigma = ops::add_const(
            tape,
            &ops::linear_vec(tape, e_z, &head.sigma_w, &head.sigma_b)?,
            1.0,
        );
        let mu = ops::linear_vec(tape, e_z, &head.mu_w, &head.mu_b)?;
        let qp = ops::add_row(tape, &ops::mul_row(tape, &q0, &sigma), &mu);
        let k = ops::add_row(tape, &ops::matmul(tape, h, &head.k_w)?, &head.k_b);
        let v = ops::add_row(tape, &ops::matmul(tape, h, &head.v_w)?, &head.v_b);
        let scores = ops::scale(tape, &ops::matmul_nt(tape, &qp, &k)?, inv_sqrt);
        let scores = ops::add(tape, &scores, &mask_bias);
        let attn = ops::softmax_lastdim(tape, &scores);
        let head_out = ops::matmul(tape, &attn, &v)?;
        ctx = Some(match ctx {
            None => head_out,
            Some(prev) => ops::concat_lastdim(tape, &prev, &head_out),
        });
    }
    let ctx = ctx.expect("at least one head");
    Ok(ops::add_row(
        tape,
        &ops::matmul(tape, &ctx, &layer.out_w)?,
        &layer.out_b,
    ))
}

/// Profile-guided layer norm: core layer norm, then per-user gain and bias.
pub fn pg_ln(
    tape: &Tape,
    h: &Tensor,
    e_z: &Tensor,
    p: &PgLnParams,
    eps: f64,
) -> Result<Tensor, ModelError> {
    let core = ops::layer_norm_core(tape, h, &p.gamma, &p.beta, eps);
    let gain = ops::add_const(
        tape,
        &ops::linear_vec(tape, e_z, &p.gain_w, &p.gain_b)?,
        1.0,
    );
    let bias = ops::linear_vec(tape, e_z, &p.bias_w, &p.bias_b)?;
    Ok(ops::add_row(tape, &ops::mul_row(tape, &core, &gain), &bias))
}

/// One post-norm encoder layer: attention and FFN sublayers, each wrapped
/// in residual + PG-LN.
pub fn sf_layer(
    tape: &Tape,
    h: &Tensor,
    e_z: &Tensor,
    mask: &[u8],
    layer: &SfLayerParams,
    k_heads: usize,
    ln_eps: f64,
) -> Result<Tensor, ModelError> {
    let attn = pg_sa(tape, h, e_z, mask, layer, k_heads)?;
    let h1 = pg_ln(tape, &ops::add(tape, h, &attn), e_z, &layer.ln1, ln_eps)?;
    let ffn = {
        let a = ops::add_row(tape, &ops::matmul(tape, &h1, &layer.ffn_w1)?, &layer.ffn_b1);
        let a = ops::gelu(tape, &a);
        ops::add_row(tape, &ops::matmul(tape, &a, &layer.ffn_w2)?, &layer.ffn_b2)
    };
    pg_ln(tape, &ops::add(tape, &h1, &ffn), e_z, &layer.ln2, ln_eps)
}

/// Full-stack encoding of a token sequence → [L×d].
pub fn sf_encode(
    tape: &Tape,
    seq: &TokenSequence,
    tables: &EmbeddingTables,
    e_z: &Tensor,
    stack: &SfStack,
) -> Result<Tensor, ModelError> {
    let mut h = tables.embed(tape, seq)?;
    for layer in &stack.layers {
        h = sf_layer(tape, &h, e_z, &seq.mask, layer, stack.k_heads, stack.ln_eps)?;
    }
    Ok(h)
}

/// Representation at the leading [CLS] position.
pub fn cls_pool(tape: &Tape, h: &Tensor) -> Tensor {
    ops::row(tape, h, 0)
}

/// Encode up to `n_slots` historical posts; absent slots yield zero rows
/// and a cleared mask bit.
pub fn encode_dynamic_profile(
    tape: &Tape,
    posts: &[TokenSequence],
    n_slots: usize,
    tables: &EmbeddingTables,
    e_z: &Tensor,
    stack: &SfStack,
) -> Result<(Tensor, Vec<u8>), ModelError> {
    assert!(posts.len() <= n_slots, "more posts than slots");
    let mut rows = Vec::with_capacity(n_slots);
    let mut present = Vec::with_capacity(n_slots);
    for seq in posts {
        rows.push(cls_pool(tape, &sf_encode(tape, seq, tables, e_z, stack)?));
        present.push(1u8);
    }
    while rows.len() < n_slots {
        rows.push(Tensor::zeros(vec![stack.d]));
        present.push(0);
    }
    Ok((ops::stack_rows(tape, &rows), present))
}

/// Encode the enhanced perspective sequences; all rows present.
pub fn encode_perspectives(
    tape: &Tape,
    seqs: &[TokenSequence],
    tables: &EmbeddingTables,
    e_z: &Tensor,
    stack: &SfStack,
) -> Result<Tensor, ModelError> {
    let mut rows = Vec::with_capacity(seqs.len());
    for seq in seqs {
        rows.push(cls_pool(tape, &sf_encode(tape, seq, tables, e_z, stack)?));
    }
    Ok(ops::stack_rows(tape, &rows))
}
