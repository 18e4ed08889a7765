use clockattn_core::phi;

use super::*;

fn white(len: usize, sigma: f64) -> FieldSpec {
    FieldSpec::constant(len, 0.0, Kernel::White { sigma }, 1.0)
}

#[test]
fn white_sample_mean_is_within_clt_bound() {
    let spec = white(8, 0.3);
    let n = 100_000;
    let mut sums = [0.0; 8];
    for seed in 0..n {
        for (s, x) in sums.iter_mut().zip(sample_field(&spec, seed).unwrap()) {
            *s += x;
        }
    }
    let bound = 4.0 * 0.3 / (n as f64).sqrt();
    for s in sums {
        assert!((s / n as f64).abs() < bound);
    }
}

#[test]
fn ou_autocovariance_matches_kernel() {
    // Pooled over positions, the lag-k estimate from 1e5 draws of a 64-point
    // field with ℓ = 2 has a standard error near 0.0008 σ², under a third of
    // the 5% band at the smallest checked value σ² e^{-3}.
    let (sigma, ell, len) = (0.5, 2.0, 64);
    let spec = FieldSpec::constant(len, 0.0, Kernel::OrnsteinUhlenbeck { sigma, ell }, 1.0);
    let sampler = FieldSampler::new(&spec).unwrap();
    let n = 100_000u64;
    let max_lag = (3.0 * ell) as usize;
    let mut cross = vec![0.0; max_lag + 1];
    let (mut z, mut x) = (vec![0.0; len], vec![0.0; len]);
    for i in 0..n {
        fill_normals(&mut sample_rng(99, i), &mut z);
        sampler.transform(&z, &mut x);
        for (k, c) in cross.iter_mut().enumerate() {
            *c += (0..len - k).map(|r| x[r] * x[r + k]).sum::<f64>() / (len - k) as f64;
        }
    }
    for (k, c) in cross.iter().enumerate() {
        let est = c / n as f64;
        let want = sigma * sigma * (-(k as f64) / ell).exp();
        assert!((est - want).abs() <= 0.05 * want, "lag {k}: {est} vs {want}");
    }
}

#[test]
fn noiseless_field_gives_exact_mu_and_zero_k() {
    let spec = FieldSpec::constant(16, 0.7, Kernel::White { sigma: 0.0 }, 0.5);
    let stats = estimate_mu_k(&spec, phi, 1000, 3).unwrap();
    assert_eq!(stats.mu_hat, phi(0.7));
    assert_eq!(stats.k_hat, 0.0);
}

#[test]
fn non_stationary_is_rejected() {
    let mut spec = white(8, 0.1);
    spec.mean_path[3] = 0.2;
    assert!(matches!(estimate_mu_k(&spec, phi, 10, 0), Err(Error::NonStationary)));
}

#[test]
fn white_k_hat_is_lag_zero_variance() {
    let spec = white(32, 0.1);
    let n = 100_000;
    let stats = estimate_mu_k(&spec, phi, n, 17).unwrap();
    assert_eq!(stats.lags_used, 0);
    // Independent estimate of Var(φ(η₀)) from fresh draws.
    let (mut s1, mut s2) = (0.0, 0.0);
    for seed in 0..n as u64 {
        let g = phi(sample_field(&spec, seed + 1_000_000).unwrap()[0]);
        s1 += g;
        s2 += g * g;
    }
    let m = s1 / n as f64;
    let var = s2 / n as f64 - m * m;
    assert!((stats.k_hat - var).abs() <= 0.1 * var, "{} vs {var}", stats.k_hat);
}

#[test]
fn ou_k_hat_matches_double_loop_estimator() {
    let (len, ell) = (48, 3.0);
    let spec = FieldSpec::constant(len, 0.2, Kernel::OrnsteinUhlenbeck { sigma: 0.4, ell }, 0.5);
    let n = 20_000;
    let stats = estimate_mu_k(&spec, phi, n, 5).unwrap();
    // Δu · Σ_k ĉ(k) from per-position-pair covariances of fresh draws, with
    // the same truncation lag.
    let sampler = FieldSampler::new(&spec).unwrap();
    let (mut z, mut x) = (vec![0.0; len], vec![0.0; len]);
    let mut mean = vec![0.0; len];
    let mut cov = vec![vec![0.0; len]; len];
    for i in 0..n as u64 {
        fill_normals(&mut sample_rng(12345, i), &mut z);
        sampler.transform(&z, &mut x);
        let g: Vec<f64> = x.iter().map(|&v| phi(v)).collect();
        for u in 0..len {
            mean[u] += g[u];
            for v in 0..len {
                cov[u][v] += g[u] * g[v];
            }
        }
    }
    let nf = n as f64;
    let mut c_hat = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for u in 0..len {
        for v in 0..len {
            let c = cov[u][v] / nf - (mean[u] / nf) * (mean[v] / nf);
            c_hat[u.abs_diff(v)] += c;
            counts[u.abs_diff(v)] += 1;
        }
    }
    let c: Vec<f64> = c_hat.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let k = stats.lags_used;
    let direct = spec.grid_step * (c[0] + 2.0 * c[1..=k].iter().sum::<f64>());
    assert!(k >= 3);
    assert!((stats.k_hat - direct).abs() <= 0.1 * direct, "{} vs {direct}", stats.k_hat);
}

#[test]
fn deterministic_clocks_give_the_smoothing_bump() {
    let spec = white(16, 0.0);
    let est = mc_meeting_density(&spec, &spec, phi, &MeetingConfig::new(ClockMode::Normalized, 1000, 1))
        .unwrap();
    assert!(est.deterministic);
    for s in 0..16 {
        assert_eq!(est.delta[(s, s)], 0.0);
        assert_eq!(est.bandwidth[(s, s)], MIN_BANDWIDTH);
        let bump = 1.0 / (MIN_BANDWIDTH * (2.0 * std::f64::consts::PI).sqrt());
        assert!((est.density[(s, s)] - bump).abs() <= 1e-9 * bump);
    }
    let cmp = est.compare();
    assert!(cmp.pairs > 0);
    assert!(cmp.max_rel_err < 1e-9);
}

#[test]
fn estimates_are_reproducible_and_thread_independent() {
    let spec = FieldSpec::constant(12, 0.1, Kernel::OrnsteinUhlenbeck { sigma: 0.2, ell: 2.0 }, 1.0);
    let cfg = MeetingConfig::new(ClockMode::Normalized, 1500, 8);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mc_meeting_density(&spec, &spec, phi, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    let other = mc_meeting_density(&spec, &spec, phi, &MeetingConfig { seed: 9, ..cfg }).unwrap();
    assert_ne!(a.density, other.density);
}

#[test]
fn few_samples_are_flagged() {
    let spec = white(8, 0.05);
    let est = mc_meeting_density(&spec, &spec, phi, &MeetingConfig::new(ClockMode::Normalized, 10, 0))
        .unwrap();
    assert!(est.insufficient_samples);
    assert!(mc_meeting_density(&spec, &spec, phi, &MeetingConfig::new(ClockMode::Normalized, 1, 0)).is_err());
}

#[test]
fn density_is_non_negative() {
    let spec = white(10, 0.1);
    let est = mc_meeting_density(&spec, &white(14, 0.1), phi, &MeetingConfig::new(ClockMode::Unnormalized, 2000, 4))
        .unwrap();
    assert!(est.density.data().iter().all(|&d| d >= 0.0));
    assert!(est.stats_x.mu_hat > 0.0);
}

#[test]
fn kde_slices_integrate_to_one() {
    let spec = white(24, 0.05);
    let cfg = MeetingConfig::new(ClockMode::Normalized, 2000, 21);
    for s in [3, 12, 20] {
        for mass in kde_slice_mass(&spec, &spec, phi, &cfg, s).unwrap() {
            assert!((mass - 1.0).abs() <= 0.02, "s={s}: {mass}");
        }
    }
}

#[test]
fn normalized_variance_vanishes_at_endpoints() {
    let fit = bridge_variance_fit(&white(32, 0.1), phi, ClockMode::Normalized, 2000, 2).unwrap();
    let v = &fit.empirical_var;
    assert!(v[0] <= 1e-12 && v[v.len() - 1] <= 1e-12);
}

#[test]
fn unnormalized_variance_is_maximal_at_the_end() {
    let fit = bridge_variance_fit(&white(32, 0.1), phi, ClockMode::Unnormalized, 5000, 2).unwrap();
    let last = *fit.empirical_var.last().unwrap();
    assert!(fit.empirical_var.iter().all(|&v| v <= last));
}

#[test]
fn halving_sigma_halves_clock_std() {
    let n = 20_000;
    let a = bridge_variance_fit(&white(32, 0.05), phi, ClockMode::Normalized, n, 6).unwrap();
    let b = bridge_variance_fit(&white(32, 0.025), phi, ClockMode::Normalized, n, 6).unwrap();
    for s in 4..28 {
        let ratio = (b.empirical_var[s] / a.empirical_var[s]).sqrt();
        assert!((ratio - 0.5).abs() <= 0.05, "s={s}: {ratio}");
    }
}

#[test]
fn cross_correlation_requires_equal_grids() {
    let mut cfg = MeetingConfig::new(ClockMode::Normalized, 1000, 0);
    cfg.cross_correlation = 0.5;
    assert!(mc_meeting_density(&white(8, 0.1), &white(9, 0.1), phi, &cfg).is_err());
    cfg.cross_correlation = 1.5;
    assert!(mc_meeting_density(&white(8, 0.1), &white(8, 0.1), phi, &cfg).is_err());
}
