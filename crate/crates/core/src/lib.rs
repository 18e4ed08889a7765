//! Stochastic clock attention.
//!
//! Attention between two ordered, continuous sequences is scored by how likely
//! two learned monotone *clocks*, one per sequence, are to meet at a pair of
//! positions. The resulting logit is a Gaussian potential in the clock
//! difference whose variance follows a Brownian-bridge profile (normalized
//! clocks, parallel decoding) or grows linearly (unnormalized clocks,
//! autoregressive decoding).
//!
//! The crate is `no_std` and only needs `alloc`:
//!
//! - [`tensor`]: masked sequences, masked statistics, stable masked softmax,
//!   cumulative sums and pairwise squared distances.
//! - [`clocks`]: the gate nonlinearity, masked time normalization and clock
//!   trajectories with their variance surrogates.
//! - [`attention`]: the clock-difference score, the full attention forward
//!   pass, the scaled dot-product baseline and causal masks.
//! - [`autodiff`]: a tape-based reverse-mode engine over exactly the op set
//!   the attention and the toy models need, plus finite-difference checks.
#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autodiff;
pub mod clocks;
mod error;
pub mod tensor;

pub use attention::{
    causal_allow_mask, clock_diff_score, reduction_equivalence_check, sca_forward, sdpa_forward,
    AttentionParams, AttentionResult, ReductionReport,
};
pub use clocks::{
    build_clock, masked_time_norm, phi, phi_prime, variance_profile, ClockMode, ClockTrajectory,
    DEFAULT_EPS,
};
pub use error::{Error, Result};
pub use tensor::{AllowMask, MaskedSeq, Matrix, ScoreMatrix, SoftmaxOutput};
