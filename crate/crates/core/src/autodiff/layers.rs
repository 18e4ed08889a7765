//! Differentiable versions of the clock and of both attention forwards.
//!
//! Each function records the same kernels, in the same order, as its plain
//! counterpart, so forward values agree bit for bit.

use alloc::vec::Vec;

use super::{Tape, Var};
use crate::attention::{
    check_inputs, log_variance_term, score_denominator, sigma2_matrix, AttentionParams,
};
use crate::clocks::{clock_from_gates, edge_mask, prefix_len, ClockMode, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::tensor::{AllowMask, MaskedSeq, Matrix};

/// A sequence on the tape together with its validity mask.
#[derive(Clone, Copy, Debug)]
pub struct GraphSeq<'a> {
    pub values: Var,
    pub mask: &'a [bool],
}

impl<'a> GraphSeq<'a> {
    pub fn new(values: Var, mask: &'a [bool]) -> Self {
        Self { values, mask }
    }
}

/// Trainable projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// `1 × 1` learnable logit scale; the fixed `logit_scale` of the config
    /// is used when absent. Ignored by the dot-product score.
    pub logit_scale: Option<Var>,
}

/// Non-trainable attention settings; same meaning as in [`AttentionParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub logit_scale: f64,
    pub eps: f64,
    pub mode: ClockMode,
    pub causal: bool,
    pub num_heads: usize,
    pub include_log_variance: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            logit_scale: 1.0,
            eps: DEFAULT_EPS,
            mode: ClockMode::Normalized,
            causal: false,
            num_heads: 1,
            include_log_variance: false,
        }
    }
}

impl AttentionConfig {
    pub fn of(params: &AttentionParams) -> Self {
        Self {
            logit_scale: params.logit_scale,
            eps: params.eps,
            mode: params.mode,
            causal: params.causal,
            num_heads: params.num_heads,
            include_log_variance: params.include_log_variance,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GraphAttention {
    /// Concatenated head contexts.
    pub context: Var,
    /// One `[L_q × T_k]` weight node per head.
    pub head_weights: Vec<Var>,
}

/// Clock of a time-normalized sequence `eta`.
pub fn clock(tape: &mut Tape, eta: GraphSeq<'_>, mode: ClockMode, eps: f64) -> Result<Var> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter("eps must be positive"));
    }
    let valid_len = prefix_len(eta.mask)?;
    let edges = edge_mask(eta.mask);
    let mid = tape.mid_edge(eta.values);
    let gated = tape.phi(mid);
    let gated = tape.add_scalar(gated, eps);
    let gates = tape.mask_rows(gated, &edges);
    let mut lambda = tape.cumsum_leftpad(gates);
    if mode == ClockMode::Normalized {
        lambda = tape.div_col_sum(lambda, gates);
    }
    if valid_len < eta.mask.len() {
        lambda = tape.mask_rows(lambda, eta.mask);
    }
    Ok(lambda)
}

/// Validates shapes exactly as the plain forward does and returns the mask.
fn checked_allow(
    tape: &Tape,
    q: GraphSeq<'_>,
    k: GraphSeq<'_>,
    v: GraphSeq<'_>,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    causal_allow: Option<&AllowMask>,
) -> Result<AllowMask> {
    let seq = |s: GraphSeq<'_>| MaskedSeq::new(tape.value(s.values).clone(), s.mask.to_vec());
    let mut params = AttentionParams::new(
        tape.value(w.wq).clone(),
        tape.value(w.wk).clone(),
        tape.value(w.wv).clone(),
    );
    params.eps = cfg.eps;
    params.mode = cfg.mode;
    params.causal = cfg.causal;
    params.num_heads = cfg.num_heads;
    check_inputs(&seq(q)?, &seq(k)?, &seq(v)?, &params, causal_allow)
}

fn head_slice(tape: &mut Tape, x: Var, h: usize, dh: usize, heads: usize) -> Var {
    if heads == 1 {
        x
    } else {
        tape.slice_cols(x, h * dh, dh)
    }
}

fn finish(
    tape: &mut Tape,
    head_logits: Vec<Var>,
    allow: &AllowMask,
    values: Var,
    heads: usize,
) -> GraphAttention {
    let dv = tape.value(values).cols() / heads;
    let mut contexts = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for (h, logits) in head_logits.into_iter().enumerate() {
        let weights = tape.masked_softmax(logits, allow);
        let vh = head_slice(tape, values, h, dv, heads);
        contexts.push(tape.matmul(weights, vh));
        head_weights.push(weights);
    }
    GraphAttention {
        context: tape.concat_cols(&contexts),
        head_weights,
    }
}

/// Differentiable [`crate::sca_forward`].
pub fn sca_attention(
    tape: &mut Tape,
    q: GraphSeq<'_>,
    k: GraphSeq<'_>,
    v: GraphSeq<'_>,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    causal_allow: Option<&AllowMask>,
) -> Result<GraphAttention> {
    let allow = checked_allow(tape, q, k, v, w, cfg, causal_allow)?;
    if w.logit_scale.is_none() && !(cfg.logit_scale > 0.0 && cfg.logit_scale.is_finite()) {
        return Err(Error::InvalidParameter("logit_scale must be positive"));
    }
    if (cfg.causal || causal_allow.is_some()) && cfg.mode == ClockMode::Normalized {
        return Err(Error::CausalNormalized);
    }
    prefix_len(q.mask)?;
    prefix_len(k.mask)?;

    let q_proj = tape.matmul(q.values, w.wq);
    let k_proj = tape.matmul(k.values, w.wk);
    let eta_q = tape.time_norm(q_proj, q.mask, cfg.eps, cfg.causal)?;
    let eta_k = tape.time_norm(k_proj, k.mask, cfg.eps, false)?;
    let values = tape.matmul(v.values, w.wv);

    let lambda_q = clock(tape, GraphSeq::new(eta_q, q.mask), cfg.mode, cfg.eps)?;
    let lambda_k = clock(tape, GraphSeq::new(eta_k, k.mask), cfg.mode, cfg.eps)?;
    let sigma2 = sigma2_of_masks(q.mask, k.mask, cfg.mode, cfg.causal)?;
    let log_term = cfg.include_log_variance.then(|| log_variance_term(&sigma2));

    let heads = cfg.num_heads;
    let dh = tape.value(w.wq).cols() / heads;
    let denom = score_denominator(&sigma2, dh, cfg.eps);
    let mut head_logits = Vec::with_capacity(heads);
    for h in 0..heads {
        let lq = head_slice(tape, lambda_q, h, dh, heads);
        let lk = head_slice(tape, lambda_k, h, dh, heads);
        let d2 = tape.pairwise_sqdist(lq, lk);
        let neg = tape.scale(d2, -1.0);
        let mut s = tape.div_const(neg, denom.clone());
        if let Some(term) = &log_term {
            let t = tape.leaf(term.clone());
            s = tape.add(s, t);
        }
        let logits = match w.logit_scale {
            Some(scale) => tape.scale_by(s, scale),
            None => tape.scale(s, cfg.logit_scale),
        };
        head_logits.push(logits);
    }
    Ok(finish(tape, head_logits, &allow, values, heads))
}

/// Differentiable [`crate::sdpa_forward`].
pub fn sdpa_attention(
    tape: &mut Tape,
    q: GraphSeq<'_>,
    k: GraphSeq<'_>,
    v: GraphSeq<'_>,
    w: &AttentionVars,
    cfg: &AttentionConfig,
    causal_allow: Option<&AllowMask>,
) -> Result<GraphAttention> {
    let allow = checked_allow(tape, q, k, v, w, cfg, causal_allow)?;
    let qp = tape.matmul(q.values, w.wq);
    let kp = tape.matmul(k.values, w.wk);
    let values = tape.matmul(v.values, w.wv);
    let heads = cfg.num_heads;
    let dh = tape.value(w.wq).cols() / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut head_logits = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(tape, qp, h, dh, heads);
        let kh = head_slice(tape, kp, h, dh, heads);
        let dot = tape.matmul_bt(qh, kh);
        head_logits.push(tape.scale(dot, scale));
    }
    Ok(finish(tape, head_logits, &allow, values, heads))
}

/// `Σ²` depends on the masks only.
pub(crate) fn sigma2_of_masks(
    q_mask: &[bool],
    k_mask: &[bool],
    mode: ClockMode,
    causal: bool,
) -> Result<Matrix> {
    let profile = |mask: &[bool]| {
        clock_from_gates(&Matrix::zeros(mask.len() - 1, 1), mask, mode)
    };
    Ok(sigma2_matrix(&profile(q_mask)?, &profile(k_mask)?, causal))
}
