//! Clock trajectories.
//!
//! A clock accumulates a strictly positive gate over the mid-edges of a
//! sequence. Normalized clocks are divided by their total so they run from
//! 0 to 1 and need the whole sequence; unnormalized clocks are the raw
//! accumulation and can be computed prefix by prefix.
//!
//! Each clock also carries a dimensionless variance surrogate per position:
//! `pos (1 - pos)` (Brownian bridge) in normalized mode and `pos` (diffusive
//! growth) in unnormalized mode. Scale constants of the underlying rate field
//! are left to the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{cumsum_leftpad, masked_mean_var, MaskedSeq, Matrix};

/// Default strictly-positive gate offset.
pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClockMode {
    /// Divided by the total accumulation; spans `[0, 1]`.
    Normalized,
    /// Raw accumulation; prefix-consistent.
    Unnormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClockTrajectory {
    /// Clock value per position (rows) and channel (columns); zero at padded
    /// positions.
    pub lambda: Matrix,
    /// Normalized position used by the variance surrogate.
    pub pos: Vec<f64>,
    /// Variance surrogate per position; zero at padded positions.
    pub var_surrogate: Vec<f64>,
    pub mode: ClockMode,
    pub valid_len: usize,
}

/// Rational softplus-like gate: `½ (1 + x (1 + x + |x|) / (1 + |x|))`.
///
/// Positive everywhere, increasing, `φ(x) → x` as `x → ∞`, `φ(x) → 0` as
/// `x → −∞`, and twice continuously differentiable at 0.
///
/// Evaluated per sign: for `x < 0` the formula is `½ / (1 − x)`, which keeps
/// full relative precision where `1 + x + |x|` would cancel to 0.
#[inline]
pub fn phi(x: f64) -> f64 {
    if x >= 0.0 {
        0.5 * (1.0 + x * (1.0 + 2.0 * x) / (1.0 + x))
    } else {
        0.5 / (1.0 - x)
    }
}

/// Closed-form derivative of [`phi`].
///
/// For `x ≥ 0` this is `1 − ½ (1 + x)^-2`, for `x < 0` it is `½ (1 − x)^-2`.
#[inline]
pub fn phi_prime(x: f64) -> f64 {
    if x >= 0.0 {
        let r = 1.0 / (1.0 + x);
        1.0 - 0.5 * r * r
    } else {
        let r = 1.0 / (1.0 - x);
        0.5 * r * r
    }
}

/// Number of valid positions of a right-padded mask.
///
/// Errors if the mask is empty or has a valid position after a padded one.
pub fn prefix_len(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(Error::NonContiguousMask);
    }
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(n)
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("eps must be positive and finite"))
    }
}

/// Per-channel standardization over valid positions, zeroed at padding.
pub fn masked_time_norm(x: &MaskedSeq, eps: f64) -> Result<MaskedSeq> {
    check_eps(eps)?;
    let (mean, var) = masked_mean_var(x)?;
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let values = x.values();
    let mut out = Matrix::zeros(x.len(), x.width());
    for (i, _) in x.mask().iter().enumerate().filter(|(_, &m)| m) {
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (values[(i, k)] - mean[k]) * inv[k];
        }
    }
    MaskedSeq::new(out, x.mask().to_vec())
}

/// Running statistics of the valid positions `0..=i`, per position.
///
/// Returns `(mean, var)` matrices shaped like `x`; rows at padded positions
/// are zero.
pub(crate) fn running_mean_var(x: &MaskedSeq) -> (Matrix, Matrix) {
    let (l, d) = (x.len(), x.width());
    let values = x.values();
    let mask = x.mask();
    let mut mean = Matrix::zeros(l, d);
    let mut var = Matrix::zeros(l, d);
    let mut seen = Vec::with_capacity(l);
    for i in 0..l {
        if !mask[i] {
            continue;
        }
        seen.push(i);
        let n = seen.len() as f64;
        for k in 0..d {
            let m = seen.iter().map(|&j| values[(j, k)]).sum::<f64>() / n;
            let v = seen
                .iter()
                .map(|&j| {
                    let c = values[(j, k)] - m;
                    c * c
                })
                .sum::<f64>()
                / n;
            mean[(i, k)] = m;
            var[(i, k)] = v;
        }
    }
    (mean, var)
}

/// Streaming variant of [`masked_time_norm`]: position `i` is standardized
/// with the statistics of the valid positions `0..=i` only, so the output at
/// `i` never depends on later positions.
pub fn causal_time_norm(x: &MaskedSeq, eps: f64) -> Result<MaskedSeq> {
    check_eps(eps)?;
    if x.valid_len() == 0 {
        return Err(Error::EmptySequence);
    }
    let (mean, var) = running_mean_var(x);
    let values = x.values();
    let mut out = Matrix::zeros(x.len(), x.width());
    for (i, _) in x.mask().iter().enumerate().filter(|(_, &m)| m) {
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (values[(i, k)] - mean[(i, k)]) / libm::sqrt(var[(i, k)] + eps);
        }
    }
    MaskedSeq::new(out, x.mask().to_vec())
}

/// Mask of mid-edges whose two endpoints are both valid.
pub(crate) fn edge_mask(mask: &[bool]) -> Vec<bool> {
    mask.windows(2).map(|w| w[0] && w[1]).collect()
}

/// Gates `(φ(½ (x_i + x_{i+1})) + eps)` on valid edges, zero elsewhere.
pub fn edge_gates(x: &MaskedSeq, eps: f64) -> Matrix {
    let values = x.values();
    let pm = edge_mask(x.mask());
    let mut g = Matrix::zeros(x.len() - 1, x.width());
    for (i, _) in pm.iter().enumerate().filter(|(_, &m)| m) {
        for (k, o) in g.row_mut(i).iter_mut().enumerate() {
            *o = phi(0.5 * (values[(i, k)] + values[(i + 1, k)])) + eps;
        }
    }
    g
}

/// Position and variance surrogate of every position of a right-padded mask.
pub(crate) fn position_profile(
    mask: &[bool],
    valid_len: usize,
    mode: ClockMode,
) -> (Vec<f64>, Vec<f64>) {
    let n = valid_len as f64;
    let mut count = 0.0;
    let mut pos = vec![0.0; mask.len()];
    let mut var = vec![0.0; mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            count += 1.0;
        }
        let p = match mode {
            ClockMode::Normalized => (count - 0.5) / n,
            ClockMode::Unnormalized => count - 0.5,
        };
        pos[i] = p;
        if m {
            var[i] = match mode {
                ClockMode::Normalized => p * (1.0 - p),
                ClockMode::Unnormalized => p,
            };
        }
    }
    (pos, var)
}

/// Builds the clock of a projected feature sequence.
///
/// The mask must be a contiguous valid prefix. A single valid position gives
/// the all-zero clock (there is no edge to accumulate over).
pub fn build_clock(x: &MaskedSeq, mode: ClockMode, eps: f64) -> Result<ClockTrajectory> {
    check_eps(eps)?;
    prefix_len(x.mask())?;
    clock_from_gates(&edge_gates(x, eps), x.mask(), mode)
}

/// Accumulates precomputed edge gates (`L - 1` rows) into a clock.
///
/// Gates on edges touching a padded position must already be zero.
pub fn clock_from_gates(
    gates: &Matrix,
    mask: &[bool],
    mode: ClockMode,
) -> Result<ClockTrajectory> {
    let valid_len = prefix_len(mask)?;
    if gates.rows() + 1 != mask.len() {
        return Err(Error::DimensionMismatch {
            op: "clock_from_gates",
            left: gates.rows() + 1,
            right: mask.len(),
        });
    }
    let mut lambda = cumsum_leftpad(gates);
    if mode == ClockMode::Normalized {
        for k in 0..gates.cols() {
            // Same summation order as the cumsum, so the last valid value
            // divides to exactly 1.
            let mut total = 0.0;
            for i in 0..gates.rows() {
                total += gates[(i, k)];
            }
            if total > 0.0 {
                for i in 0..lambda.rows() {
                    lambda[(i, k)] /= total;
                }
            }
        }
    }
    for i in valid_len..lambda.rows() {
        lambda.row_mut(i).fill(0.0);
    }
    let (pos, var_surrogate) = position_profile(mask, valid_len, mode);
    Ok(ClockTrajectory {
        lambda,
        pos,
        var_surrogate,
        mode,
        valid_len,
    })
}

/// Variance profile shape at a position fraction.
pub fn variance_profile(pos_frac: f64, mode: ClockMode) -> Result<f64> {
    match mode {
        ClockMode::Normalized if (0.0..=1.0).contains(&pos_frac) => {
            Ok(pos_frac * (1.0 - pos_frac))
        }
        ClockMode::Unnormalized if pos_frac >= 0.0 && pos_frac.is_finite() => Ok(pos_frac),
        _ => Err(Error::OutOfRange("pos_frac")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0), 0.5);
        assert_eq!(phi(1.0), 1.25);
        assert_eq!(phi(-1.0), 0.25);
        assert!((phi(1e6) - 1e6).abs() < 1.0);
        assert!(phi(-1e6) < 1e-6);
    }

    #[test]
    fn phi_keeps_relative_precision_far_left() {
        for x in [-1e17, -1e100, -1e300] {
            let y = phi(x);
            assert!(y > 0.0 && ((y * -x) - 0.5).abs() < 1e-15, "phi({x}) = {y}");
        }
    }

    #[test]
    fn phi_prime_matches_finite_differences() {
        let h = 1e-5;
        for i in -400..=400 {
            let x = f64::from(i) * 0.025;
            let fd = (phi(x + h) - phi(x - h)) / (2.0 * h);
            assert!((fd - phi_prime(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn phi_positive_monotone_and_lipschitz_on_grid() {
        let h = 1e-4;
        let mut prev = phi(-1000.0);
        assert!(prev > 0.0);
        let mut x = -1000.0;
        while x < 1000.0 {
            x += 0.01;
            let y = phi(x);
            assert!(y > 0.0 && y > prev, "x={x}");
            let fd = (phi(x + h) - phi(x - h)) / (2.0 * h);
            assert!(fd <= 1.0 + 1e-6, "x={x} fd={fd}");
            prev = y;
        }
    }

    #[test]
    fn time_norm_examples() {
        let x = MaskedSeq::full(col(&[1.0, 2.0, 3.0])).unwrap();
        let z = masked_time_norm(&x, 1e-12).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in z.values().data().iter().zip(want) {
            assert!((got - want).abs() < 1e-4);
        }

        let c = MaskedSeq::full(col(&[4.5; 5])).unwrap();
        let z = masked_time_norm(&c, 0.3).unwrap();
        assert!(z.values().data().iter().all(|&v| v == 0.0));

        let x4 = MaskedSeq::new(col(&[1.0, 2.0, 3.0, 99.0]), vec![true, true, true, false]).unwrap();
        let z4 = masked_time_norm(&x4, 1e-12).unwrap();
        for (got, want) in z4.values().data()[..3].iter().zip(want) {
            assert!((got - want).abs() < 1e-4);
        }
        assert_eq!(z4.values()[(3, 0)], 0.0);

        let empty = MaskedSeq::new(col(&[1.0]), vec![false]).unwrap();
        assert_eq!(masked_time_norm(&empty, 1e-3), Err(Error::EmptySequence));
    }

    #[test]
    fn time_norm_moments() {
        let x = MaskedSeq::new(
            Matrix::from_rows(&[[0.3, -2.0], [1.7, 4.0], [-0.4, 0.5], [9.0, 9.0]]),
            vec![true, true, true, false],
        )
        .unwrap();
        let eps = 0.05;
        let (_, v) = masked_mean_var(&x).unwrap();
        let z = masked_time_norm(&x, eps).unwrap();
        let (zm, zv) = masked_mean_var(&z).unwrap();
        for k in 0..2 {
            assert!(zm[k].abs() < 1e-10);
            assert!((zv[k] - v[k] / (v[k] + eps)).abs() < 1e-10);
        }
    }

    #[test]
    fn causal_time_norm_uses_only_the_past() {
        let x = MaskedSeq::full(col(&[1.0, 3.0, 2.0, 8.0])).unwrap();
        let z = causal_time_norm(&x, 1e-3).unwrap();
        assert_eq!(z.values()[(0, 0)], 0.0);
        // Position 1 sees {1, 3}: mean 2, var 1.
        assert!((z.values()[(1, 0)] - 1.0 / (1.0f64 + 1e-3).sqrt()).abs() < 1e-12);
        // Position 2 sees {1, 3, 2}: mean 2.
        assert_eq!(z.values()[(2, 0)], 0.0);
        let full = masked_time_norm(&x, 1e-3).unwrap();
        assert!((z.values()[(3, 0)] - full.values()[(3, 0)]).abs() < 1e-12);
    }

    #[test]
    fn clock_constant_input_normalized() {
        let x = MaskedSeq::full(Matrix::zeros(4, 1)).unwrap();
        let c = build_clock(&x, ClockMode::Normalized, 1e-3).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in c.lambda.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(c.pos, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(c.var_surrogate, vec![0.109375, 0.234375, 0.234375, 0.109375]);
        assert_eq!(c.valid_len, 4);
    }

    #[test]
    fn clock_constant_input_unnormalized() {
        let x = MaskedSeq::full(Matrix::zeros(4, 1)).unwrap();
        let c = build_clock(&x, ClockMode::Unnormalized, 1e-3).unwrap();
        let g = 0.501;
        for (i, got) in c.lambda.data().iter().enumerate() {
            assert!((got - g * i as f64).abs() < 1e-12);
        }
        assert_eq!(c.pos, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(c.var_surrogate, c.pos);
    }

    #[test]
    fn single_frame_clock() {
        let x = MaskedSeq::full(Matrix::filled(1, 3, 0.7)).unwrap();
        let c = build_clock(&x, ClockMode::Normalized, 1e-3).unwrap();
        assert_eq!(c.lambda, Matrix::zeros(1, 3));
        assert_eq!(c.pos, vec![0.5]);
        assert_eq!(c.var_surrogate, vec![0.25]);
    }

    #[test]
    fn clock_rejects_bad_masks_and_eps() {
        let v = Matrix::zeros(3, 1);
        let holes = MaskedSeq::new(v.clone(), vec![true, false, true]).unwrap();
        assert_eq!(
            build_clock(&holes, ClockMode::Normalized, 1e-3),
            Err(Error::NonContiguousMask)
        );
        let empty = MaskedSeq::new(v.clone(), vec![false; 3]).unwrap();
        assert_eq!(
            build_clock(&empty, ClockMode::Unnormalized, 1e-3),
            Err(Error::EmptySequence)
        );
        let ok = MaskedSeq::full(v).unwrap();
        assert!(build_clock(&ok, ClockMode::Normalized, 0.0).is_err());
    }

    #[test]
    fn padding_is_zeroed() {
        let x = MaskedSeq::new(col(&[0.2, -0.1, 0.4, 5.0, 5.0]), vec![true, true, true, false, false])
            .unwrap();
        for mode in [ClockMode::Normalized, ClockMode::Unnormalized] {
            let c = build_clock(&x, mode, 1e-3).unwrap();
            assert_eq!(c.lambda[(3, 0)], 0.0);
            assert_eq!(c.lambda[(4, 0)], 0.0);
            assert_eq!(c.var_surrogate[3], 0.0);
        }
        let c = build_clock(&x, ClockMode::Normalized, 1e-3).unwrap();
        assert_eq!(c.lambda[(2, 0)], 1.0);
    }

    #[test]
    fn variance_profile_values() {
        assert_eq!(variance_profile(0.5, ClockMode::Normalized), Ok(0.25));
        assert_eq!(variance_profile(0.0, ClockMode::Normalized), Ok(0.0));
        assert_eq!(variance_profile(1.0, ClockMode::Normalized), Ok(0.0));
        assert_eq!(variance_profile(2.5, ClockMode::Unnormalized), Ok(2.5));
        assert!(variance_profile(1.5, ClockMode::Normalized).is_err());
        assert!(variance_profile(-0.1, ClockMode::Unnormalized).is_err());
    }

    fn seq_strategy() -> impl Strategy<Value = MaskedSeq> {
        (1usize..=24, 1usize..=4).prop_flat_map(|(l, d)| {
            (
                proptest::collection::vec(-4.0f64..4.0, l * d),
                1..=l,
            )
                .prop_map(move |(v, valid)| {
                    MaskedSeq::with_prefix(Matrix::from_vec(l, d, v).unwrap(), valid).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn clocks_are_strictly_increasing(x in seq_strategy(), eps in 1e-4f64..1e-1) {
            for mode in [ClockMode::Normalized, ClockMode::Unnormalized] {
                let c = build_clock(&x, mode, eps).unwrap();
                for k in 0..x.width() {
                    prop_assert_eq!(c.lambda[(0, k)], 0.0);
                    for i in 1..c.valid_len {
                        prop_assert!(c.lambda[(i, k)] > c.lambda[(i - 1, k)]);
                    }
                    if mode == ClockMode::Normalized && c.valid_len > 1 {
                        prop_assert!((c.lambda[(c.valid_len - 1, k)] - 1.0).abs() <= 1e-9);
                    }
                }
                prop_assert!(c.var_surrogate.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn unnormalized_prefix_consistency(x in seq_strategy()) {
            let full = build_clock(&x, ClockMode::Unnormalized, 1e-3).unwrap();
            for n in 1..=full.valid_len {
                let p = build_clock(&x.prefix(n).unwrap(), ClockMode::Unnormalized, 1e-3).unwrap();
                prop_assert_eq!(p.lambda.data(), &full.lambda.data()[..n * x.width()]);
                prop_assert_eq!(&p.var_surrogate[..], &full.var_surrogate[..n]);
            }
        }

        #[test]
        fn normalized_constant_is_uniform_ramp(c in -50.0f64..50.0, l in 2usize..40) {
            let x = MaskedSeq::full(Matrix::filled(l, 1, c)).unwrap();
            let clock = build_clock(&x, ClockMode::Normalized, 1e-3).unwrap();
            for i in 0..l {
                prop_assert!((clock.lambda[(i, 0)] - i as f64 / (l - 1) as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_clock_ignores_gate_scale(x in seq_strategy(), c in 1e-3f64..1e3) {
            let g = edge_gates(&x, 1e-3);
            let a = clock_from_gates(&g, x.mask(), ClockMode::Normalized).unwrap();
            let b = clock_from_gates(&g.scale(c), x.mask(), ClockMode::Normalized).unwrap();
            for (p, q) in a.lambda.data().iter().zip(b.lambda.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1e-300));
            }
        }

        #[test]
        fn bridge_variance_is_symmetric(l in 1usize..64) {
            let x = MaskedSeq::full(Matrix::zeros(l, 1)).unwrap();
            let c = build_clock(&x, ClockMode::Normalized, 1e-3).unwrap();
            for i in 0..l {
                prop_assert!((c.var_surrogate[i] - c.var_surrogate[l - 1 - i]).abs() < 1e-15);
            }
        }
    }
}
