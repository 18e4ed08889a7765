//! Stochastic clock attention and the scaled dot-product baseline.
//!
//! The clock score between query position `i` and key position `j` is
//!
//! ```text
//! S(i, j) = -‖λ_q(i) - λ_k(j)‖² / (2 √d Σ²(i, j) + eps)
//! Σ²(i, j) = var_q(i) / len_q + var_k(j) / len_k
//! ```
//!
//! where `λ` are the clocks of the time-normalized projections and `var` their
//! variance surrogates. Logits are `S · logit_scale`, masked and row-softmaxed.
//!
//! Multi-head attention splits the projected channels into `num_heads` equal
//! slices; every head scores with its own slice of clock channels and its own
//! `√d_head`, and head contexts are concatenated.
//!
//! With `causal` set (unnormalized clocks only), query position `i` is treated
//! exactly as if the query sequence ended at `i`: its time normalization uses
//! the statistics of positions `0..=i` and its variance term divides by the
//! prefix length `i + 1`. Row `i` of a causal pass therefore equals the last
//! row of a pass over the query prefix `0..=i`.

use alloc::vec;
use alloc::vec::Vec;

use crate::clocks::{
    build_clock, causal_time_norm, masked_time_norm, prefix_len, ClockMode, ClockTrajectory,
    DEFAULT_EPS,
};
use crate::error::{Error, Result};
use crate::tensor::{masked_softmax, pairwise_sqdist, AllowMask, MaskedSeq, Matrix, ScoreMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// Query projection `[D_q × d]`.
    pub wq: Matrix,
    /// Key projection `[D_k × d]`.
    pub wk: Matrix,
    /// Value projection `[D_v × d_v]`.
    pub wv: Matrix,
    pub logit_scale: f64,
    pub eps: f64,
    pub mode: ClockMode,
    pub causal: bool,
    pub num_heads: usize,
    /// Adds the `-½ log Σ²` term of the meeting kernel to the clock logits.
    /// Diagnostic only.
    pub include_log_variance: bool,
}

impl AttentionParams {
    /// Single-head, normalized, non-causal parameters with unit logit scale.
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix) -> Self {
        Self {
            wq,
            wk,
            wv,
            logit_scale: 1.0,
            eps: DEFAULT_EPS,
            mode: ClockMode::Normalized,
            causal: false,
            num_heads: 1,
            include_log_variance: false,
        }
    }

    pub fn with_mode(mut self, mode: ClockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_heads(mut self, num_heads: usize) -> Self {
        self.num_heads = num_heads;
        self
    }

    pub fn with_logit_scale(mut self, logit_scale: f64) -> Self {
        self.logit_scale = logit_scale;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Width of the projected query/key channels.
    pub fn qk_dim(&self) -> usize {
        self.wq.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.qk_dim() / self.num_heads
    }

    fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidParameter("logit_scale must be positive"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidParameter("eps must be positive"));
        }
        if self.wq.cols() != self.wk.cols() {
            return Err(Error::DimensionMismatch {
                op: "query/key projection width",
                left: self.wq.cols(),
                right: self.wk.cols(),
            });
        }
        if self.num_heads == 0
            || self.wq.cols() % self.num_heads != 0
            || self.wv.cols() % self.num_heads != 0
            || self.wq.cols() == 0
        {
            return Err(Error::InvalidParameter(
                "projection widths must be non-zero multiples of num_heads",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    /// Concatenated head contexts `[L_q × d_v]`.
    pub context: Matrix,
    /// Weights averaged over heads `[L_q × T_k]`; equal to the only head's
    /// weights when `num_heads == 1`.
    pub weights: Matrix,
    pub head_weights: Vec<Matrix>,
    /// Query rows with no allowed key; their weights and context are zero.
    pub empty_row_flags: Vec<bool>,
}

/// Clock-difference score of two projected, time-normalized sequences.
///
/// Single head over all `d` channels; `allow` is the outer product of the
/// masks.
pub fn clock_diff_score(
    eta_q: &MaskedSeq,
    eta_k: &MaskedSeq,
    mode: ClockMode,
    eps: f64,
) -> Result<ScoreMatrix> {
    if eta_q.width() != eta_k.width() {
        return Err(Error::DimensionMismatch {
            op: "clock_diff_score",
            left: eta_q.width(),
            right: eta_k.width(),
        });
    }
    let clocks = ClockPair::build(eta_q, eta_k, mode, eps, false)?;
    let logits = clock_head_score(
        &clocks.q.lambda,
        &clocks.k.lambda,
        &clocks.sigma2,
        eta_q.width(),
        eps,
    )?;
    ScoreMatrix::new(logits, AllowMask::outer(eta_q.mask(), eta_k.mask()))
}

/// Clocks of both sides plus the pairwise variance `Σ²`.
pub(crate) struct ClockPair {
    pub q: ClockTrajectory,
    pub k: ClockTrajectory,
    pub sigma2: Matrix,
}

impl ClockPair {
    pub(crate) fn build(
        eta_q: &MaskedSeq,
        eta_k: &MaskedSeq,
        mode: ClockMode,
        eps: f64,
        causal: bool,
    ) -> Result<Self> {
        let q = build_clock(eta_q, mode, eps)?;
        let k = build_clock(eta_k, mode, eps)?;
        let sigma2 = sigma2_matrix(&q, &k, causal);
        Ok(Self { q, k, sigma2 })
    }
}

/// `Σ²(i, j) = var_q(i) / len_q + var_k(j) / len_k`, with `len_q` replaced by
/// the prefix length `i + 1` in causal mode.
pub(crate) fn sigma2_matrix(q: &ClockTrajectory, k: &ClockTrajectory, causal: bool) -> Matrix {
    let len_k = k.valid_len as f64;
    let len_q = q.valid_len as f64;
    Matrix::from_fn(q.var_surrogate.len(), k.var_surrogate.len(), |i, j| {
        let lq = if causal {
            (i.min(q.valid_len - 1) + 1) as f64
        } else {
            len_q
        };
        q.var_surrogate[i] / lq + k.var_surrogate[j] / len_k
    })
}

/// `-‖λ_q(i) - λ_k(j)‖² / (2 √d Σ²(i, j) + eps)` for one head's clock channels.
pub(crate) fn clock_head_score(
    lambda_q: &Matrix,
    lambda_k: &Matrix,
    sigma2: &Matrix,
    head_dim: usize,
    eps: f64,
) -> Result<Matrix> {
    let mut s = pairwise_sqdist(lambda_q, lambda_k)?;
    let denom = score_denominator(sigma2, head_dim, eps);
    for (d2, &v) in s.data_mut().iter_mut().zip(denom.data()) {
        *d2 = -*d2 / v;
    }
    Ok(s)
}

/// `2 √d Σ² + eps`; depends on the masks only.
pub(crate) fn score_denominator(sigma2: &Matrix, head_dim: usize, eps: f64) -> Matrix {
    let scale = 2.0 * libm::sqrt(head_dim as f64);
    sigma2.map(|v| scale * v + eps)
}

/// `-½ log Σ²`, the meeting-kernel normalization that the score omits.
pub(crate) fn log_variance_term(sigma2: &Matrix) -> Matrix {
    sigma2.map(|v| -0.5 * libm::log(v.max(f64::MIN_POSITIVE)))
}

/// Per query row, the spread (max − min over valid keys) of the omitted
/// `-½ log Σ²` term. Zero spread means the omission is exactly absorbed by
/// the row softmax.
pub fn log_variance_row_spread(
    q_mask: &[bool],
    k_mask: &[bool],
    mode: ClockMode,
) -> Result<Vec<f64>> {
    // Σ² depends only on the masks, so any features give the same clocks'
    // variance surrogates.
    let q = MaskedSeq::new(Matrix::zeros(q_mask.len(), 1), q_mask.to_vec())?;
    let k = MaskedSeq::new(Matrix::zeros(k_mask.len(), 1), k_mask.to_vec())?;
    let pair = ClockPair::build(&q, &k, mode, DEFAULT_EPS, false)?;
    let term = log_variance_term(&pair.sigma2);
    Ok((0..q_mask.len())
        .map(|i| {
            if !q_mask[i] {
                return 0.0;
            }
            let (lo, hi) = (0..k_mask.len())
                .filter(|&j| k_mask[j])
                .map(|j| term[(i, j)])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                    (lo.min(x), hi.max(x))
                });
            hi - lo
        })
        .collect())
}

pub(crate) fn check_inputs(
    q: &MaskedSeq,
    k: &MaskedSeq,
    v: &MaskedSeq,
    params: &AttentionParams,
    causal_allow: Option<&AllowMask>,
) -> Result<AllowMask> {
    params.validate()?;
    for (op, seq, w) in [
        ("query width", q, &params.wq),
        ("key width", k, &params.wk),
        ("value width", v, &params.wv),
    ] {
        if seq.width() != w.rows() {
            return Err(Error::DimensionMismatch {
                op,
                left: seq.width(),
                right: w.rows(),
            });
        }
    }
    if k.len() != v.len() {
        return Err(Error::DimensionMismatch {
            op: "key/value length",
            left: k.len(),
            right: v.len(),
        });
    }
    if k.mask() != v.mask() {
        return Err(Error::Shape("keys and values must share a mask"));
    }
    if q.valid_len() == 0 || k.valid_len() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut allow = AllowMask::outer(q.mask(), k.mask());
    if let Some(extra) = causal_allow {
        allow = allow.and(extra)?;
    }
    Ok(allow)
}

/// Row-softmax each head's logits and gather the contexts.
fn finish(
    head_logits: Vec<Matrix>,
    allow: &AllowMask,
    values: &Matrix,
    num_heads: usize,
) -> Result<AttentionResult> {
    let dv = values.cols() / num_heads;
    let mut contexts = Vec::with_capacity(num_heads);
    let mut head_weights = Vec::with_capacity(num_heads);
    let mut empty_row_flags = vec![false; allow.rows()];
    for (h, logits) in head_logits.into_iter().enumerate() {
        let out = masked_softmax(&ScoreMatrix::new(logits, allow.clone())?);
        contexts.push(out.weights.matmul(&values.slice_cols(h * dv, dv))?);
        empty_row_flags = out.empty_rows;
        head_weights.push(out.weights);
    }
    let weights = if num_heads == 1 {
        head_weights[0].clone()
    } else {
        let mut mean = Matrix::zeros(allow.rows(), allow.cols());
        for w in &head_weights {
            mean.add_assign(w);
        }
        mean.scale(1.0 / num_heads as f64)
    };
    Ok(AttentionResult {
        context: Matrix::concat_cols(&contexts)?,
        weights,
        head_weights,
        empty_row_flags,
    })
}

/// Full stochastic clock attention forward pass.
///
/// `causal_allow` further restricts which keys each query may attend to;
/// supplying it (or setting `params.causal`) requires unnormalized clocks.
pub fn sca_forward(
    q: &MaskedSeq,
    k: &MaskedSeq,
    v: &MaskedSeq,
    params: &AttentionParams,
    causal_allow: Option<&AllowMask>,
) -> Result<AttentionResult> {
    let allow = check_inputs(q, k, v, params, causal_allow)?;
    let causal = params.causal || causal_allow.is_some();
    if causal && params.mode == ClockMode::Normalized {
        return Err(Error::CausalNormalized);
    }
    prefix_len(q.mask())?;
    prefix_len(k.mask())?;

    let q_proj = MaskedSeq::new(q.values().matmul(&params.wq)?, q.mask().to_vec())?;
    let k_proj = MaskedSeq::new(k.values().matmul(&params.wk)?, k.mask().to_vec())?;
    let eta_q = if params.causal {
        causal_time_norm(&q_proj, params.eps)?
    } else {
        masked_time_norm(&q_proj, params.eps)?
    };
    let eta_k = masked_time_norm(&k_proj, params.eps)?;
    let values = v.values().matmul(&params.wv)?;

    let pair = ClockPair::build(&eta_q, &eta_k, params.mode, params.eps, params.causal)?;
    let log_term = params
        .include_log_variance
        .then(|| log_variance_term(&pair.sigma2));
    let dh = params.head_dim();
    let mut head_logits = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let mut s = clock_head_score(
            &pair.q.lambda.slice_cols(h * dh, dh),
            &pair.k.lambda.slice_cols(h * dh, dh),
            &pair.sigma2,
            dh,
            params.eps,
        )?;
        if let Some(term) = &log_term {
            s.add_assign(term);
        }
        head_logits.push(s.scale(params.logit_scale));
    }
    finish(head_logits, &allow, &values, params.num_heads)
}

/// Scaled dot-product attention `softmax((q W_q)(k W_k)ᵀ / √d_head) (v W_v)`
/// with the same masking and multi-head layout as [`sca_forward`].
///
/// `logit_scale`, `eps`, `mode` and `causal` are ignored: the dot-product
/// score has no sequence-level statistics, so causality is fully expressed
/// by `causal_allow`.
pub fn sdpa_forward(
    q: &MaskedSeq,
    k: &MaskedSeq,
    v: &MaskedSeq,
    params: &AttentionParams,
    causal_allow: Option<&AllowMask>,
) -> Result<AttentionResult> {
    let allow = check_inputs(q, k, v, params, causal_allow)?;
    let qp = q.values().matmul(&params.wq)?;
    let kp = k.values().matmul(&params.wk)?;
    let values = v.values().matmul(&params.wv)?;
    let dh = params.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut head_logits = Vec::with_capacity(params.num_heads);
    for h in 0..params.num_heads {
        let logits = qp
            .slice_cols(h * dh, dh)
            .matmul_bt(&kp.slice_cols(h * dh, dh))?
            .scale(scale);
        head_logits.push(logits);
    }
    finish(head_logits, &allow, &values, params.num_heads)
}

/// Outcome of comparing the squared-L2 score with the dot-product score.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionReport {
    /// Max |softmax(-‖q - k‖² / (2√d)) - softmax(qᵀk / √d)| over all entries.
    pub max_abs_dev: f64,
    /// Max − min of the valid key norms², relative to their mean.
    pub key_norm_spread: f64,
    /// Whether all valid keys have the same norm (within `1e-9` relative).
    pub precondition_met: bool,
    /// Precondition met and deviation `≤ 1e-9`.
    pub passed: bool,
}

/// Tolerance of [`reduction_equivalence_check`].
pub const REDUCTION_TOL: f64 = 1e-9;

/// Checks that, with equal-norm keys, the squared-distance score and the
/// scaled dot product give the same softmax (the norm terms are constant
/// per row and cancel).
pub fn reduction_equivalence_check(
    eta_q: &MaskedSeq,
    eta_k: &MaskedSeq,
) -> Result<ReductionReport> {
    if eta_q.width() != eta_k.width() {
        return Err(Error::DimensionMismatch {
            op: "reduction_equivalence_check",
            left: eta_q.width(),
            right: eta_k.width(),
        });
    }
    if eta_q.valid_len() == 0 || eta_k.valid_len() == 0 {
        return Err(Error::EmptySequence);
    }
    let allow = AllowMask::outer(eta_q.mask(), eta_k.mask());
    let sqrt_d = libm::sqrt(eta_q.width() as f64);
    let l2 = pairwise_sqdist(eta_q.values(), eta_k.values())?.scale(-0.5 / sqrt_d);
    let dot = eta_q.values().matmul_bt(eta_k.values())?.scale(1.0 / sqrt_d);
    let a = masked_softmax(&ScoreMatrix::new(l2, allow.clone())?).weights;
    let b = masked_softmax(&ScoreMatrix::new(dot, allow)?).weights;

    let norms: Vec<f64> = (0..eta_k.len())
        .filter(|&j| eta_k.mask()[j])
        .map(|j| crate::tensor::dot(eta_k.values().row(j), eta_k.values().row(j)))
        .collect();
    let (lo, hi) = norms
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &n| {
            (lo.min(n), hi.max(n))
        });
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let key_norm_spread = if mean > 0.0 { (hi - lo) / mean } else { 0.0 };
    let precondition_met = key_norm_spread <= 1e-9;
    let max_abs_dev = a.max_abs_diff(&b);
    Ok(ReductionReport {
        max_abs_dev,
        key_norm_spread,
        precondition_met,
        passed: precondition_met && max_abs_dev <= REDUCTION_TOL,
    })
}

/// `allow(i, j) = j ≤ limits[i]`, with non-decreasing limits.
pub fn causal_allow_mask(l_q: usize, t_k: usize, limits: &[usize]) -> Result<AllowMask> {
    if limits.len() != l_q {
        return Err(Error::DimensionMismatch {
            op: "causal_allow_mask",
            left: l_q,
            right: limits.len(),
        });
    }
    if let Some(row) = limits.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::DecreasingLimits { row: row + 1 });
    }
    Ok(AllowMask::from_fn(l_q, t_k, |i, j| j <= limits[i]))
}
