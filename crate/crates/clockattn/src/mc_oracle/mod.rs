//! Monte-Carlo oracle for the meeting kernel of two stochastic clocks.
//!
//! Rate fields are sampled on a uniform grid, clocks are accumulated with
//! the trapezoid rule, and the empirical quantities are compared with the
//! closed-form Gaussian kernel whose variance follows the bridge profile
//! (normalized clocks) or the linear profile (unnormalized clocks, rescaled
//! by `μ̂ S`).
//!
//! Every sample `i` draws from its own stream `(seed, i)` and partial sums
//! are combined in a fixed chunk order, so results are bit-identical for any
//! thread count.

mod field;

use std::ops::Range;

use clockattn_core::{ClockMode, Matrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use field::{fill_normals, sample_field, sample_rng, FieldSampler, FieldSpec, Kernel};

use crate::error::{Error, Result};

/// Below this many samples estimates carry an insufficiency flag.
pub const MIN_SAMPLES: usize = 1000;
/// Silverman bandwidths are floored here.
pub const MIN_BANDWIDTH: f64 = 1e-4;
/// Autocovariance lags are summed until they fall below this fraction of
/// the lag-0 value.
pub const AUTOCOV_CUTOFF: f64 = 0.01;

const CHUNK: u64 = 512;
/// `exp(-z²/2)` is exactly zero in f64 beyond this `z²`.
const KDE_CUTOFF_Z2: f64 = 1490.0;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Sub-streams per sample, so independent passes never share draws.
const STREAM_X: u64 = 0;
const STREAM_Y: u64 = 1;
const STREAMS: u64 = 2;

/// Gate function applied to the rate field.
pub type Gate = fn(f64) -> f64;

fn chunks(n: usize) -> Vec<Range<u64>> {
    let n = n as u64;
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Trapezoid accumulation `λ̃_i = Σ_{r<i} Δu (g_r + g_{r+1}) / 2`.
fn accumulate(eta: &[f64], phi: Gate, step: f64, out: &mut [f64]) {
    out[0] = 0.0;
    let mut prev = phi(eta[0]);
    for i in 1..eta.len() {
        let g = phi(eta[i]);
        out[i] = out[i - 1] + step * 0.5 * (prev + g);
        prev = g;
    }
}

/// Clock of one field draw in the oracle's scale: `λ̃ / λ̃_S` (normalized)
/// or `λ̃ / (μ̂ S)` (unnormalized).
fn scaled_clock(eta: &[f64], phi: Gate, step: f64, mode: ClockMode, mu_span: f64, out: &mut [f64]) {
    accumulate(eta, phi, step, out);
    let total = match mode {
        ClockMode::Normalized => out[out.len() - 1],
        ClockMode::Unnormalized => mu_span,
    };
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// `(μ̂, K̂)` of a stationary field and the autocovariance they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateStats {
    pub mu_hat: f64,
    pub k_hat: f64,
    /// Empirical autocovariance of `φ(η)` per lag.
    pub autocov: Vec<f64>,
    /// Number of positive lags included in `k_hat`.
    pub lags_used: usize,
    pub n_samples: usize,
}

impl RateStats {
    /// Prefactor `(1/S)(K̂/μ̂²)` of both variance profiles.
    pub fn profile_scale(&self, span: f64) -> f64 {
        self.k_hat / (self.mu_hat * self.mu_hat) / span
    }
}

/// Monte-Carlo mean and integrated autocovariance of `φ(η)`.
pub fn estimate_mu_k(spec: &FieldSpec, phi: Gate, n_samples: usize, seed: u64) -> Result<RateStats> {
    if !spec.is_stationary() {
        return Err(Error::NonStationary);
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let sampler = FieldSampler::new(spec)?;
    let l = spec.grid_len();
    // Deviations from the deterministic gate keep the sums well conditioned
    // and exactly zero for a noiseless field.
    let reference = phi(spec.mean_path[0]);
    let parts: Vec<(f64, Vec<f64>)> = chunks(n_samples)
        .into_par_iter()
        .map(|range| {
            let (mut z, mut eta, mut d) = (vec![0.0; l], vec![0.0; l], vec![0.0; l]);
            let mut sum = 0.0;
            let mut cross = vec![0.0; l];
            for i in range {
                fill_normals(&mut sample_rng(seed, i * STREAMS + STREAM_X), &mut z);
                sampler.transform(&z, &mut eta);
                for (di, &e) in d.iter_mut().zip(&eta) {
                    *di = phi(e) - reference;
                }
                sum += d.iter().sum::<f64>();
                for (k, c) in cross.iter_mut().enumerate() {
                    *c += d[..l - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            (sum, cross)
        })
        .collect();
    let mut sum = 0.0;
    let mut cross = vec![0.0; l];
    for (s, c) in parts {
        sum += s;
        for (a, b) in cross.iter_mut().zip(c) {
            *a += b;
        }
    }
    let n = n_samples as f64;
    let mean_dev = sum / (n * l as f64);
    let autocov: Vec<f64> = cross
        .iter()
        .enumerate()
        .map(|(k, &c)| c / (n * (l - k) as f64) - mean_dev * mean_dev)
        .collect();
    let c0 = autocov[0];
    let lags_used = autocov[1..]
        .iter()
        .take_while(|&&c| c >= AUTOCOV_CUTOFF * c0 && c0 > 0.0)
        .count();
    let k_hat = spec.grid_step * (c0 + 2.0 * autocov[1..=lags_used].iter().sum::<f64>());
    Ok(RateStats {
        mu_hat: reference + mean_dev,
        k_hat,
        autocov,
        lags_used,
        n_samples,
    })
}

/// Variance profile `(s/S)(1 - s/S)` or `s/S`.
pub fn profile(p: f64, mode: ClockMode) -> f64 {
    match mode {
        ClockMode::Normalized => p * (1.0 - p),
        ClockMode::Unnormalized => p,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `1.06 · std · n^(-1/5)` per grid pair, floored at [`MIN_BANDWIDTH`].
    Silverman,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeetingConfig {
    pub mode: ClockMode,
    pub n_samples: usize,
    pub bandwidth: Bandwidth,
    pub seed: u64,
    /// Correlation injected between the two fields' normals (equal grids
    /// only). The closed form ignores it.
    pub cross_correlation: f64,
}

impl MeetingConfig {
    pub fn new(mode: ClockMode, n_samples: usize, seed: u64) -> Self {
        Self {
            mode,
            n_samples,
            bandwidth: Bandwidth::Silverman,
            seed,
            cross_correlation: 0.0,
        }
    }
}

/// Empirical meeting density and its closed form on the full `(s, t)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MeetingEstimate {
    pub mode: ClockMode,
    /// `s / S` per source grid index.
    pub s_frac: Vec<f64>,
    pub t_frac: Vec<f64>,
    /// Kernel density of `λ^X_s - λ^Y_t` at 0.
    pub density: Matrix,
    /// `N(Δ; 0, Σ²)`, or the smoothing kernel `κ_h(Δ)` where `Σ² = 0`.
    pub closed_form: Matrix,
    /// Deterministic offset `Δ_{s,t}` of the mean-path clocks.
    pub delta: Matrix,
    pub sigma2: Matrix,
    pub bandwidth: Matrix,
    pub stats_x: RateStats,
    pub stats_y: RateStats,
    /// Empirical `Var(λ^X_s)` and `Var(λ^Y_t)`.
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub n_samples: usize,
    /// Both fields are noiseless; the closed form is the smoothing kernel.
    pub deterministic: bool,
    pub insufficient_samples: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pairs: usize,
}

/// Pairs compared: interior on both axes and closed form at least
/// `row_frac` of its row maximum.
pub const INTERIOR: (f64, f64) = (0.1, 0.9);
pub const ROW_FRACTION: f64 = 0.1;

impl MeetingEstimate {
    pub fn compare(&self) -> Comparison {
        self.compare_with(INTERIOR, ROW_FRACTION)
    }

    pub fn compare_with(&self, interior: (f64, f64), row_frac: f64) -> Comparison {
        let inside = |p: f64| p >= interior.0 - 1e-12 && p <= interior.1 + 1e-12;
        let (mut max, mut total, mut pairs) = (0.0f64, 0.0, 0);
        for (s, _) in self.s_frac.iter().enumerate().filter(|(_, &p)| inside(p)) {
            let row = self.closed_form.row(s);
            let row_max = row.iter().cloned().fold(0.0, f64::max);
            for (t, _) in self.t_frac.iter().enumerate().filter(|(_, &p)| inside(p)) {
                let c = row[t];
                if c < row_frac * row_max || c <= 0.0 {
                    continue;
                }
                let err = (self.density[(s, t)] - c).abs() / c;
                max = max.max(err);
                total += err;
                pairs += 1;
            }
        }
        Comparison {
            max_rel_err: max,
            mean_rel_err: if pairs > 0 { total / pairs as f64 } else { 0.0 },
            pairs,
        }
    }
}

fn fracs(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

fn derived_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Shared sampling state of a comparison between two fields.
struct PairSampler {
    x: FieldSampler,
    y: FieldSampler,
    phi: Gate,
    mode: ClockMode,
    rho: f64,
    seed: u64,
    mu_span_x: f64,
    mu_span_y: f64,
}

struct Scratch {
    zx: Vec<f64>,
    zy: Vec<f64>,
    eta_x: Vec<f64>,
    eta_y: Vec<f64>,
    lx: Vec<f64>,
    ly: Vec<f64>,
}

impl PairSampler {
    fn scratch(&self) -> Scratch {
        let (nx, ny) = (self.x.spec().grid_len(), self.y.spec().grid_len());
        Scratch {
            zx: vec![0.0; nx],
            zy: vec![0.0; ny],
            eta_x: vec![0.0; nx],
            eta_y: vec![0.0; ny],
            lx: vec![0.0; nx],
            ly: vec![0.0; ny],
        }
    }

    /// Clocks of sample `i` into `w.lx`, `w.ly`.
    fn draw(&self, i: u64, w: &mut Scratch) {
        fill_normals(&mut sample_rng(self.seed, i * STREAMS + STREAM_X), &mut w.zx);
        fill_normals(&mut sample_rng(self.seed, i * STREAMS + STREAM_Y), &mut w.zy);
        if self.rho != 0.0 {
            let keep = (1.0 - self.rho * self.rho).sqrt();
            for (y, x) in w.zy.iter_mut().zip(&w.zx) {
                *y = self.rho * x + keep * *y;
            }
        }
        self.x.transform(&w.zx, &mut w.eta_x);
        self.y.transform(&w.zy, &mut w.eta_y);
        let (sx, sy) = (self.x.spec().grid_step, self.y.spec().grid_step);
        scaled_clock(&w.eta_x, self.phi, sx, self.mode, self.mu_span_x, &mut w.lx);
        scaled_clock(&w.eta_y, self.phi, sy, self.mode, self.mu_span_y, &mut w.ly);
    }

    fn mean_clocks(&self) -> (Vec<f64>, Vec<f64>) {
        let clock = |s: &FieldSampler, mu_span: f64| {
            let spec = s.spec();
            let mut out = vec![0.0; spec.grid_len()];
            scaled_clock(&spec.mean_path, self.phi, spec.grid_step, self.mode, mu_span, &mut out);
            out
        };
        (clock(&self.x, self.mu_span_x), clock(&self.y, self.mu_span_y))
    }
}

fn add_into(acc: &mut [f64], part: &[f64]) {
    for (a, b) in acc.iter_mut().zip(part) {
        *a += b;
    }
}

/// Empirical meeting density of two independent stationary fields against
/// the closed-form Gaussian kernel.
pub fn mc_meeting_density(
    spec_x: &FieldSpec,
    spec_y: &FieldSpec,
    phi: Gate,
    cfg: &MeetingConfig,
) -> Result<MeetingEstimate> {
    if cfg.n_samples < 2 {
        return Err(Error::Config("n_samples must be at least 2".into()));
    }
    if let Bandwidth::Fixed(h) = cfg.bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
    }
    let rho = cfg.cross_correlation;
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Config("cross_correlation must lie in [-1, 1]".into()));
    }
    if rho != 0.0 && spec_x.grid_len() != spec_y.grid_len() {
        return Err(Error::Config("cross-correlated fields need equal grids".into()));
    }
    let stats_x = estimate_mu_k(spec_x, phi, cfg.n_samples, derived_seed(cfg.seed, 1))?;
    let stats_y = estimate_mu_k(spec_y, phi, cfg.n_samples, derived_seed(cfg.seed, 2))?;
    let sampler = PairSampler {
        x: FieldSampler::new(spec_x)?,
        y: FieldSampler::new(spec_y)?,
        phi,
        mode: cfg.mode,
        rho,
        seed: cfg.seed,
        mu_span_x: stats_x.mu_hat * spec_x.span(),
        mu_span_y: stats_y.mu_hat * spec_y.span(),
    };
    let (nx, ny) = (spec_x.grid_len(), spec_y.grid_len());
    let (mean_x, mean_y) = sampler.mean_clocks();

    // Pass 1: first and second moments of the clock deviations.
    let parts: Vec<[Vec<f64>; 5]> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut w = sampler.scratch();
            let mut acc = [
                vec![0.0; nx],
                vec![0.0; nx],
                vec![0.0; ny],
                vec![0.0; ny],
                vec![0.0; nx * ny],
            ];
            let (mut dx, mut dy) = (vec![0.0; nx], vec![0.0; ny]);
            for i in range {
                sampler.draw(i, &mut w);
                for s in 0..nx {
                    dx[s] = w.lx[s] - mean_x[s];
                    acc[0][s] += dx[s];
                    acc[1][s] += dx[s] * dx[s];
                }
                for t in 0..ny {
                    dy[t] = w.ly[t] - mean_y[t];
                    acc[2][t] += dy[t];
                    acc[3][t] += dy[t] * dy[t];
                }
                for s in 0..nx {
                    let row = &mut acc[4][s * ny..(s + 1) * ny];
                    for (c, &y) in row.iter_mut().zip(&dy) {
                        *c += dx[s] * y;
                    }
                }
            }
            acc
        })
        .collect();
    let mut m = [
        vec![0.0; nx],
        vec![0.0; nx],
        vec![0.0; ny],
        vec![0.0; ny],
        vec![0.0; nx * ny],
    ];
    for part in &parts {
        for (a, b) in m.iter_mut().zip(part) {
            add_into(a, b);
        }
    }
    drop(parts);
    let n = cfg.n_samples as f64;
    let moments = |sum: &[f64], sq: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| (q / n - mu * mu).max(0.0))
            .collect();
        (mean, var)
    };
    let (mx, var_x) = moments(&m[0], &m[1]);
    let (my, var_y) = moments(&m[2], &m[3]);
    let silverman = n.powf(-0.2) * 1.06;
    let bandwidth = Matrix::from_fn(nx, ny, |s, t| match cfg.bandwidth {
        Bandwidth::Fixed(h) => h,
        Bandwidth::Silverman => {
            let cov = m[4][s * ny + t] / n - mx[s] * my[t];
            let var = (var_x[s] + var_y[t] - 2.0 * cov).max(0.0);
            (silverman * var.sqrt()).max(MIN_BANDWIDTH)
        }
    });

    // Pass 2: Gaussian kernel density at zero difference.
    let inv_h: Vec<f64> = bandwidth.data().iter().map(|h| 1.0 / h).collect();
    let parts: Vec<Vec<f64>> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut w = sampler.scratch();
            let mut acc = vec![0.0; nx * ny];
            for i in range {
                sampler.draw(i, &mut w);
                for s in 0..nx {
                    let row = &mut acc[s * ny..(s + 1) * ny];
                    let ih = &inv_h[s * ny..(s + 1) * ny];
                    for t in 0..ny {
                        let z = (w.lx[s] - w.ly[t]) * ih[t];
                        let z2 = z * z;
                        if z2 < KDE_CUTOFF_Z2 {
                            row[t] += (-0.5 * z2).exp();
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut kde = vec![0.0; nx * ny];
    for part in &parts {
        add_into(&mut kde, part);
    }
    let density = Matrix::from_fn(nx, ny, |s, t| {
        kde[s * ny + t] * inv_h[s * ny + t] * INV_SQRT_2PI / n
    });

    let (s_frac, t_frac) = (fracs(nx), fracs(ny));
    let (ax, ay) = (stats_x.profile_scale(spec_x.span()), stats_y.profile_scale(spec_y.span()));
    let sigma2 = Matrix::from_fn(nx, ny, |s, t| {
        ax * profile(s_frac[s], cfg.mode) + ay * profile(t_frac[t], cfg.mode)
    });
    let delta = Matrix::from_fn(nx, ny, |s, t| mean_x[s] - mean_y[t]);
    let closed_form = Matrix::from_fn(nx, ny, |s, t| {
        let (d, v) = (delta[(s, t)], sigma2[(s, t)]);
        let v = if v > 0.0 { v } else { bandwidth[(s, t)].powi(2) };
        (-0.5 * d * d / v).exp() * INV_SQRT_2PI / v.sqrt()
    });
    Ok(MeetingEstimate {
        mode: cfg.mode,
        s_frac,
        t_frac,
        density,
        closed_form,
        delta,
        sigma2,
        bandwidth,
        deterministic: stats_x.k_hat == 0.0 && stats_y.k_hat == 0.0,
        stats_x,
        stats_y,
        var_x,
        var_y,
        n_samples: cfg.n_samples,
        insufficient_samples: cfg.n_samples < MIN_SAMPLES,
    })
}

/// Mass of the kernel density of `λ^X_s - λ^Y_t` over the `Δ` axis, per
/// `t`, by the trapezoid rule on a grid of step `h/4`. Uses the first
/// `n_samples` draws of the configured streams.
pub fn kde_slice_mass(
    spec_x: &FieldSpec,
    spec_y: &FieldSpec,
    phi: Gate,
    cfg: &MeetingConfig,
    s: usize,
) -> Result<Vec<f64>> {
    if s >= spec_x.grid_len() {
        return Err(Error::Config("slice index out of range".into()));
    }
    let stats_x = estimate_mu_k(spec_x, phi, cfg.n_samples, derived_seed(cfg.seed, 1))?;
    let stats_y = estimate_mu_k(spec_y, phi, cfg.n_samples, derived_seed(cfg.seed, 2))?;
    let sampler = PairSampler {
        x: FieldSampler::new(spec_x)?,
        y: FieldSampler::new(spec_y)?,
        phi,
        mode: cfg.mode,
        rho: cfg.cross_correlation,
        seed: cfg.seed,
        mu_span_x: stats_x.mu_hat * spec_x.span(),
        mu_span_y: stats_y.mu_hat * spec_y.span(),
    };
    let ny = spec_y.grid_len();
    let mut diffs = vec![Vec::with_capacity(cfg.n_samples); ny];
    let mut w = sampler.scratch();
    for i in 0..cfg.n_samples as u64 {
        sampler.draw(i, &mut w);
        for (t, d) in diffs.iter_mut().enumerate() {
            d.push(w.lx[s] - w.ly[t]);
        }
    }
    let n = cfg.n_samples as f64;
    Ok(diffs
        .par_iter()
        .map(|d| {
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let h = match cfg.bandwidth {
                Bandwidth::Fixed(h) => h,
                Bandwidth::Silverman => (1.06 * var.sqrt() * n.powf(-0.2)).max(MIN_BANDWIDTH),
            };
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min) - 8.0 * h;
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 8.0 * h;
            let points = (((hi - lo) / (0.25 * h)).ceil() as usize).clamp(16, 200_000);
            let step = (hi - lo) / points as f64;
            let density = |x: f64| {
                d.iter()
                    .map(|&di| (-0.5 * ((x - di) / h).powi(2)).exp())
                    .sum::<f64>()
                    * INV_SQRT_2PI
                    / (n * h)
            };
            let mut mass = 0.5 * (density(lo) + density(hi));
            for k in 1..points {
                mass += density(lo + k as f64 * step);
            }
            mass * step
        })
        .collect())
}

/// Least-squares fit of the empirical clock variance to the profile shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeFit {
    pub s_frac: Vec<f64>,
    /// Empirical `Var(λ_s)` per grid index, endpoints included.
    pub empirical_var: Vec<f64>,
    pub fitted_c: f64,
    /// `(1/S)(K̂/μ̂²)`.
    pub predicted_c: f64,
    pub ratio: f64,
    pub r2: f64,
    pub stats: RateStats,
}

/// Fits `Var(λ_s) ≈ c · profile(s/S)` over the interior `0 < s < S`.
pub fn bridge_variance_fit(
    spec: &FieldSpec,
    phi: Gate,
    mode: ClockMode,
    n_samples: usize,
    seed: u64,
) -> Result<BridgeFit> {
    if n_samples < 2 {
        return Err(Error::Config("n_samples must be at least 2".into()));
    }
    let stats = estimate_mu_k(spec, phi, n_samples, derived_seed(seed, 1))?;
    let sampler = FieldSampler::new(spec)?;
    let l = spec.grid_len();
    let mu_span = stats.mu_hat * spec.span();
    let mut mean_clock = vec![0.0; l];
    scaled_clock(&spec.mean_path, phi, spec.grid_step, mode, mu_span, &mut mean_clock);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = chunks(n_samples)
        .into_par_iter()
        .map(|range| {
            let (mut z, mut eta, mut lam) = (vec![0.0; l], vec![0.0; l], vec![0.0; l]);
            let (mut sum, mut sq) = (vec![0.0; l], vec![0.0; l]);
            for i in range {
                fill_normals(&mut sample_rng(seed, i * STREAMS + STREAM_X), &mut z);
                sampler.transform(&z, &mut eta);
                scaled_clock(&eta, phi, spec.grid_step, mode, mu_span, &mut lam);
                for s in 0..l {
                    let d = lam[s] - mean_clock[s];
                    sum[s] += d;
                    sq[s] += d * d;
                }
            }
            (sum, sq)
        })
        .collect();
    let (mut sum, mut sq) = (vec![0.0; l], vec![0.0; l]);
    for (a, b) in &parts {
        add_into(&mut sum, a);
        add_into(&mut sq, b);
    }
    let n = n_samples as f64;
    let empirical_var: Vec<f64> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| (q / n - (s / n) * (s / n)).max(0.0))
        .collect();
    let s_frac = fracs(l);
    let interior = 1..l - 1;
    let f: Vec<f64> = interior.clone().map(|s| profile(s_frac[s], mode)).collect();
    let v: Vec<f64> = interior.map(|s| empirical_var[s]).collect();
    let ff: f64 = f.iter().map(|x| x * x).sum();
    let fitted_c = if ff > 0.0 {
        f.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / ff
    } else {
        0.0
    };
    let v_mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    let ss_res: f64 = f.iter().zip(&v).map(|(a, b)| (b - fitted_c * a).powi(2)).sum();
    let ss_tot: f64 = v.iter().map(|b| (b - v_mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    let predicted_c = stats.profile_scale(spec.span());
    Ok(BridgeFit {
        s_frac,
        empirical_var,
        fitted_c,
        predicted_c,
        ratio: fitted_c / predicted_c,
        r2,
        stats,
    })
}

#[cfg(test)]
mod tests;
