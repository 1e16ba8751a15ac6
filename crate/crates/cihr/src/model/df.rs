//! Dynamic Fusion: cross-attention of perspective features over encoded
//! post history, a scalar sigmoid gate blending the two pooled views, and
//! the classifier head with its cross-entropy objective.

use crate::numerics::{ops, SplitMix64, Tape, Tensor};

use super::params::{init_normal, init_zeros, ParamStore};
use super::sf::{attention_mask_bias, ModelError};

pub struct DfHeadParams {
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub v_w: Tensor,
    pub v_b: Tensor,
}

pub struct DfParams {
    pub heads: Vec<DfHeadParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub gate_w: Tensor, // [2d×1]
    pub gate_b: Tensor, // [1]
}

pub struct ClassifierParams {
    pub w: Tensor, // [d×2]
    pub b: Tensor, // [2]
}

impl DfParams {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        k_heads: usize,
        rng: &mut SplitMix64,
    ) -> Result<DfParams, ModelError> {
        if d % k_heads != 0 {
            return Err(ModelError::HeadSplit { d, k: k_heads });
        }
        let dk = d / k_heads;
        let mut heads = Vec::with_capacity(k_heads);
        for j in 0..k_heads {
            let hp = format!("df.attn.head.{j}");
            heads.push(DfHeadParams {
                q_w: store.register(&format!("{hp}.q.w"), init_normal(vec![d, dk], rng)),
                q_b: store.register(&format!("{hp}.q.b"), init_zeros(vec![dk])),
                k_w: store.register(&format!("{hp}.k.w"), init_normal(vec![d, dk], rng)),
                k_b: store.register(&format!("{hp}.k.b"), init_zeros(vec![dk])),
                v_w: store.register(&format!("{hp}.v.w"), init_normal(vec![d, dk], rng)),
                v_b: store.register(&format!("{hp}.v.b"), init_zeros(vec![dk])),
            });
        }
        Ok(DfParams {
            heads,
            out_w: store.register("df.attn.out.w", init_normal(vec![d, d], rng)),
            out_b: store.register("df.attn.out.b", init_zeros(vec![d])),
            gate_w: store.register("df.gate.w", init_normal(vec![2 * d, 1], rng)),
            gate_b: store.register("df.gate.b", init_zeros(vec![1])),
        })
    }
}

impl ClassifierParams {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut SplitMix64) -> ClassifierParams {
        ClassifierParams {
            w: store.register("classifier.w", init_normal(vec![d, 2], rng)),
            b: store.register("classifier.b", init_zeros(vec![2])),
        }
    }
}

/// Multi-head cross-attention: queries from `h_a` [N_a×d], keys/values from
/// `h_d` [N_d×d]; `d_mask` marks present post rows. With no present rows
/// the output is defined as the zero matrix.
pub fn mha_cross(
    tape: &Tape,
    h_a: &Tensor,
    h_d: &Tensor,
    d_mask: &[u8],
    params: &DfParams,
) -> Result<Tensor, ModelError> {
    let n_a = h_a.shape()[0];
    let d = h_a.shape()[1];
    if d_mask.iter().all(|&m| m == 0) {
        return Ok(Tensor::zeros(vec![n_a, d]));
    }
    let k_heads = params.heads.len();
    let dk = d / k_heads;
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mask_bias = attention_mask_bias(n_a, d_mask);
    let mut ctx: Option<Tensor> = None;
    for head in &params.heads {
        let q = ops::add_row(tape, &ops::matmul(tape, h_a, &head.q_w)?, &head.q_b);
        let k = ops::add_row(tape, &ops::matmul(tape, h_d, &head.k_w)?, &head.k_b);
        let v = ops::add_row(tape, &ops::matmul(tape, h_d, &head.v_w)?, &head.v_b);
        let scores = ops::scale(tape, &ops::matmul_nt(tape, &q, &k)?, inv_sqrt);
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
        &ops::matmul(tape, &ctx, &params.out_w)?,
        &params.out_b,
    ))
}

/// Average-pool both views and blend with a scalar sigmoid gate:
/// h_o = α·h_x + (1−α)·h̃_x with α = σ([h_x‖h̃_x]·W + b).
/// Returns (h_o, α).
pub fn gated_fuse(
    tape: &Tape,
    h_a: &Tensor,
    h_p: &Tensor,
    params: &DfParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let h_x = ops::mean_axis(tape, h_a, 0);
    let h_tx = ops::mean_axis(tape, h_p, 0);
    let cat = ops::concat_lastdim(tape, &h_x, &h_tx);
    let logit = ops::linear_vec(tape, &cat, &params.gate_w, &params.gate_b)?;
    // squash into [1e-12, 1-1e-12]: a saturated sigmoid rounds to exactly
    // 0 or 1 in f64, and the gate must stay a strict convex weight
    let alpha = ops::add_const(
        tape,
        &ops::scale(tape, &ops::sigmoid(tape, &logit), 1.0 - 2e-12),
        1e-12,
    );
    let one_minus = ops::add_const(tape, &ops::scale(tape, &alpha, -1.0), 1.0);
    let h_o = ops::add(
        tape,
        &ops::scale_by(tape, &h_x, &alpha),
        &ops::scale_by(tape, &h_tx, &one_minus),
    );
    Ok((h_o, alpha))
}

/// Two-class probabilities from the fused representation.
pub fn predict(
    tape: &Tape,
    h_o: &Tensor,
    params: &ClassifierParams,
) -> Result<Tensor, ModelError> {
    let logits = ops::linear_vec(tape, h_o, &params.w, &params.b)?;
    Ok(ops::softmax_lastdim(tape, &logits))
}

/// Predicted label from a probability pair; ties go to class 0 (humorless).
pub fn argmax_label(probs: &[f64]) -> u8 {
    if probs[1] > probs[0] {
        1
    } else {
        0
    }
}

/// Per-sample negated cross-entropy; `probs` is the two-class output,
/// `label` ∈ {0,1}. Probabilities are clamped at 1e-12 before the log.
pub fn cross_entropy_sample(tape: &Tape, probs: &Tensor, label: u8) -> Tensor {
    let idx = label as usize;
    let p_true = ops::slice_lastdim(tape, probs, idx, idx + 1);
    let clamped = ops::clamp_min(tape, &p_true, 1e-12);
    ops::scale(tape, &ops::log(tape, &clamped), -1.0)
}

/// Batch mean of per-sample losses (plain f64 combination for reporting).
pub fn cross_entropy_loss(tape: &Tape, losses: &[Tensor]) -> Tensor {
    assert!(!losses.is_empty());
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = ops::add(tape, &acc, l);
    }
    ops::scale(tape, &acc, 1.0 / losses.len() as f64)
}
