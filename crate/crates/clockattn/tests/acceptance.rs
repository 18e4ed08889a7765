//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clockattn::cli::{mc_validate, sweep_model, train_seed, ExperimentConfig, McConfig, McReport, TrainSummary};
use clockattn::toytask::{generate_dataset, Dataset, DatasetConfig, SweepPoint, ToyModel, Variant};
use clockattn::{certify, selftest};
use clockattn_core::autodiff::GradcheckConfig;
use clockattn_core::{
    build_clock, clock_diff_score, reduction_equivalence_check, ClockMode, MaskedSeq, Matrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

struct Run {
    variant: Variant,
    seed: u64,
    model: ToyModel,
    dataset: Dataset,
    summary: TrainSummary,
    dir: PathBuf,
}

/// Expensive shared state, built on first use.
struct Ctx {
    work: tempfile::TempDir,
    mc: OnceCell<Result<McReport, String>>,
    runs: OnceCell<Result<Vec<Run>, String>>,
}

const SEEDS: [u64; 3] = [0, 1, 2];

impl Ctx {
    fn mc(&self) -> Result<&McReport, String> {
        self.mc
            .get_or_init(|| mc_validate(&McConfig::default()).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Three seeds of both parallel variants, one of each autoregressive one,
    /// all at the default configuration.
    fn runs(&self) -> Result<&[Run], String> {
        self.runs
            .get_or_init(|| {
                let mut plan: Vec<(Variant, u64)> = Vec::new();
                for v in [Variant::ScaNorm, Variant::Sdpa] {
                    plan.extend(SEEDS.iter().map(|&s| (v, s)));
                }
                plan.push((Variant::ScaUnnorm, 0));
                plan.push((Variant::SdpaAr, 0));
                plan.into_iter()
                    .map(|(v, s)| train_run(self.work.path(), "main", v, s))
                    .collect()
            })
            .as_deref()
            .map_err(Clone::clone)
    }
}

fn train_run(root: &Path, tag: &str, variant: Variant, seed: u64) -> Result<Run, String> {
    let cfg = ExperimentConfig {
        variant,
        ..ExperimentConfig::default()
    };
    let dir = root.join(tag).join(format!("{}_{seed}", variant.name()));
    let (model, dataset, summary) = train_seed(&cfg, seed, &dir).map_err(|e| e.to_string())?;
    Ok(Run {
        variant,
        seed,
        model,
        dataset,
        summary,
        dir,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn suites(names: &[&str], opts: &selftest::SelftestOptions) -> Outcome {
    let mut details = Vec::new();
    for name in names {
        let r = selftest::run(Some(name), opts);
        ensure!(r.len() == 1, "suite {name} not found");
        ensure!(r[0].passed, "{name}: {}", r[0].detail);
        details.push(format!("{name}: {}", r[0].detail));
    }
    Ok(details.join("; "))
}

fn c1_fidelity(_: &Ctx) -> Outcome {
    let tol = 1e-9;
    let x = MaskedSeq::full(Matrix::zeros(4, 1)).unwrap();
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);

    let n = build_clock(&x, ClockMode::Normalized, 1e-3).map_err(|e| e.to_string())?;
    ensure!(close(n.lambda.data(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]), "normalized lambda {:?}", n.lambda.data());
    ensure!(close(&n.pos, &[0.125, 0.375, 0.625, 0.875]), "normalized pos {:?}", n.pos);
    ensure!(close(&n.var_surrogate, &[0.109375, 0.234375, 0.234375, 0.109375]), "bridge var {:?}", n.var_surrogate);

    let u = build_clock(&x, ClockMode::Unnormalized, 1e-3).map_err(|e| e.to_string())?;
    let g = 0.501;
    ensure!(close(u.lambda.data(), &[0.0, g, 2.0 * g, 3.0 * g]), "unnormalized lambda {:?}", u.lambda.data());
    ensure!(close(&u.pos, &[0.5, 1.5, 2.5, 3.5]) && close(&u.var_surrogate, &u.pos), "unnormalized profile");

    // Score of the same pair, recomputed from the traced clocks.
    let s = clock_diff_score(&x, &x, ClockMode::Normalized, 1e-3).map_err(|e| e.to_string())?;
    let lam = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let var = [0.109375, 0.234375, 0.234375, 0.109375];
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            let sigma2 = var[i] / 4.0 + var[j] / 4.0;
            let want = -(lam[i] - lam[j]) * (lam[i] - lam[j]) / (2.0 * sigma2 + 1e-3);
            worst = worst.max((s.logits[(i, j)] - want).abs());
        }
    }
    ensure!(worst <= tol, "score deviates by {worst:e}");
    ensure!(s.logits[(0, 0)] == 0.0, "S(0,0) = {}", s.logits[(0, 0)]);
    ensure!((s.logits[(0, 3)] + 9.05).abs() <= 0.02, "S(0,3) = {}", s.logits[(0, 3)]);

    let lib = suites(&["clocks.hand_traces", "attention.hand_trace"], &selftest::SelftestOptions::default())?;
    Ok(format!("clock and score traces within {tol:e} (score max dev {worst:.1e}, S(0,3) = {:.4}); {lib}", s.logits[(0, 3)]))
}

fn c2_clock_laws(_: &Ctx) -> Outcome {
    let opts = selftest::SelftestOptions {
        clock_instances: 1000,
        ..selftest::SelftestOptions::default()
    };
    suites(
        &["clocks.monotonicity", "clocks.normalization", "clocks.gate_rescaling", "clocks.prefix_consistency"],
        &opts,
    )
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn c3_reduction(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for n in 0..100 {
        let (l, t, d) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=6));
        let radius: f64 = rng.random_range(0.2..2.5);
        let q = Matrix::from_fn(l, d, |_, _| rng.random_range(-2.0..2.0));
        let mut k = Matrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        for j in 0..t {
            let norm = k.row(j).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            k.row_mut(j).iter_mut().for_each(|x| *x *= radius / norm);
        }
        let sd = (d as f64).sqrt();
        for i in 0..l {
            let l2: Vec<f64> = (0..t)
                .map(|j| -(0..d).map(|c| (q[(i, c)] - k[(j, c)]).powi(2)).sum::<f64>() / (2.0 * sd))
                .collect();
            let dot: Vec<f64> = (0..t).map(|j| (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / sd).collect();
            for (a, b) in softmax(&l2).iter().zip(softmax(&dot)) {
                worst = worst.max((a - b).abs());
            }
        }
        let r = reduction_equivalence_check(&MaskedSeq::full(q).unwrap(), &MaskedSeq::full(k).unwrap())
            .map_err(|e| e.to_string())?;
        ensure!(r.passed, "instance {n}: library check deviates by {:e}", r.max_abs_dev);
        worst = worst.max(r.max_abs_dev);
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("100 equal-norm instances, max |softmax difference| {worst:.1e} <= 1e-9"))
}

fn c4_meeting_kernel(ctx: &Ctx) -> Outcome {
    let r = ctx.mc()?;
    let s = &r.summary;
    let tol = s.tolerances.max_rel_err;
    ensure!(s.n_samples == 200_000 && r.normalized.s_frac.len() == 64, "not the reference configuration");
    ensure!(s.pairs > 0 && s.pairs_unnormalized > 0, "no pairs compared");
    ensure!(
        s.max_rel_err <= tol && s.max_rel_err_unnormalized <= tol,
        "max relative error {:.4} / {:.4} > {tol}",
        s.max_rel_err,
        s.max_rel_err_unnormalized
    );
    Ok(format!(
        "white sigma=0.05, L=64, n=2e5: max rel err {:.4} over {} pairs (normalized), {:.4} over {} (unnormalized), tol {tol}",
        s.max_rel_err, s.pairs, s.max_rel_err_unnormalized, s.pairs_unnormalized
    ))
}

fn c5_variance_profiles(ctx: &Ctx) -> Outcome {
    let s = &ctx.mc()?.summary;
    let (r2b, c, r2l) = (
        s.r2_bridge.unwrap_or(f64::NAN),
        s.c_ratio.unwrap_or(f64::NAN),
        s.r2_linear.unwrap_or(f64::NAN),
    );
    ensure!(r2b >= 0.95, "bridge R2 {r2b}");
    ensure!((0.8..=1.25).contains(&c), "bridge amplitude ratio {c}");
    ensure!(r2l >= 0.95, "linear R2 {r2l}");
    Ok(format!(
        "bridge R2 {r2b:.4}, c fitted/predicted {c:.4} ({:.3e} vs {:.3e}); linear R2 {r2l:.4}",
        s.c_fitted, s.c_predicted
    ))
}

fn c6_gradients(_: &Ctx) -> Outcome {
    let cfg = GradcheckConfig::default();
    ensure!(cfg.h == 1e-5 && cfg.tol == 1e-4, "non-reference gradcheck settings");
    let reports = certify::run(None, cfg).map_err(|e| e.to_string())?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed || r.instances < 10)
        .map(|r| format!("{} ({:e})", r.name, r.max_rel_err))
        .collect();
    ensure!(failed.is_empty(), "failing cases: {}", failed.join(", "));
    ensure!(reports.iter().any(|r| r.name == "sca_normalized"), "full forward pass not covered");
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!("{} cases x >= 10 instances, worst relative error {worst:.1e} <= 1e-4", reports.len()))
}

fn c7_alignment(ctx: &Ctx) -> Outcome {
    let runs = ctx.runs()?;
    let diag: Vec<f64> = runs
        .iter()
        .filter(|r| r.variant == Variant::ScaNorm)
        .map(|r| r.summary.final_metrics.diagonality)
        .collect();
    let med = median(diag.clone());
    let mut worst = Vec::new();
    for v in Variant::ALL {
        let ratio = runs
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.summary.l1_ratio)
            .fold(f64::NAN, f64::max);
        worst.push(format!("{v} {ratio:.3}"));
        ensure!(ratio < 0.5, "{v}: final/initial L1 {ratio:.3} (worst seed) is not below 0.5");
    }
    ensure!(med >= 0.9, "median diagonality {med:.4} < 0.9 ({diag:?})");
    Ok(format!(
        "sca-norm median diagonality {med:.4} (seeds {:?}); worst final/initial L1: {}",
        diag.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>(),
        worst.join(", ")
    ))
}

fn sweep_points(run: &Run) -> Result<Vec<SweepPoint>, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.ratios = vec![0.5, 1.0, 2.0];
    sweep_model(&run.model, &run.dataset, &cfg).map_err(|e| e.to_string())
}

fn c8_length(ctx: &Ctx) -> Outcome {
    let runs = ctx.runs()?;
    let coverage = |v: Variant| -> Result<Vec<Vec<f64>>, String> {
        runs.iter()
            .filter(|r| r.variant == v)
            .map(|r| Ok(sweep_points(r)?.iter().map(|p| p.metrics.coverage).collect()))
            .collect()
    };
    let (sca, sdpa) = (coverage(Variant::ScaNorm)?, coverage(Variant::Sdpa)?);
    let med = |c: &[Vec<f64>], k: usize| median(c.iter().map(|r| r[k]).collect());
    let mut parts = Vec::new();
    for (k, label) in [(0, "0.5x"), (2, "2x")] {
        let (a, b) = (med(&sca, k), med(&sdpa, k));
        parts.push(format!("{label}: sca {a:.3} vs sdpa {b:.3}"));
        ensure!(a >= 0.9, "sca coverage {a:.3} at {label} < 0.9");
        ensure!(a >= b, "sca coverage {a:.3} below sdpa {b:.3} at {label}");
    }
    Ok(format!("median coverage over 3 seeds, 100 held-out instances: {}", parts.join("; ")))
}

fn c9_autoregressive(ctx: &Ctx) -> Outcome {
    let lib = suites(&["attention.ar_consistency"], &selftest::SelftestOptions::default())?;
    let runs = ctx.runs()?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for run in runs.iter().filter(|r| r.variant.is_autoregressive()) {
        let held = run.dataset.sample_more(5, 4242);
        for inst in &held {
            let (full_out, full_w) = run.model.teacher_forced(&inst.source_tokens, &inst.target).map_err(|e| e.to_string())?;
            for t in 0..inst.target_len() {
                let (y, w) = run.model.decode_step(&inst.source_tokens, &inst.target, t).map_err(|e| e.to_string())?;
                for (a, b) in y.iter().zip(full_out.row(t)).chain(w.iter().zip(full_w.row(t))) {
                    worst = worst.max((a - b).abs());
                }
                checked += 1;
            }
        }
    }
    ensure!(checked > 0, "no autoregressive runs");
    ensure!(worst <= 1e-12, "step decoding deviates by {worst:e}");
    Ok(format!("{checked} decode steps of trained sca-unnorm and sdpa-ar, max deviation {worst:.1e}; {lib}"))
}

fn c10_determinism(ctx: &Ctx) -> Outcome {
    let runs = ctx.runs()?;
    let first = runs
        .iter()
        .find(|r| r.variant == Variant::ScaNorm && r.seed == 0)
        .ok_or("missing reference run")?;
    let again = train_run(ctx.work.path(), "repeat", first.variant, first.seed)?;
    let read = |dir: &Path| std::fs::read(dir.join("metrics.csv")).map_err(|e| e.to_string());
    ensure!(read(&first.dir)? == read(&again.dir)?, "metrics CSVs of identical sca-norm runs differ");
    ensure!(again.model == first.model, "trained parameters differ");
    ensure!(sweep_points(first)? == sweep_points(&again)?, "sweep results differ");
    // Shorter paired runs cover the remaining variants.
    let short = ExperimentConfig {
        dataset: DatasetConfig {
            n_instances: 200,
            ..DatasetConfig::default()
        },
        ..ExperimentConfig::default()
    };
    for v in Variant::ALL {
        let mut cfg = short.clone();
        cfg.variant = v;
        cfg.train.steps = 100;
        cfg.train.log_every = 20;
        let csv: Vec<Vec<u8>> = ["x", "y"]
            .iter()
            .map(|tag| {
                let dir = ctx.work.path().join("short").join(tag).join(v.name());
                train_seed(&cfg, 7, &dir).map_err(|e| e.to_string())?;
                read(&dir)
            })
            .collect::<Result<_, _>>()?;
        ensure!(csv[0] == csv[1], "{v}: metrics CSVs differ");
    }
    ensure!(generate_dataset(&DatasetConfig::default()).ok() == generate_dataset(&DatasetConfig::default()).ok(), "datasets differ");
    Ok("repeated full sca-norm run and paired 100-step runs of all four variants give byte-identical metrics CSVs".into())
}

type Check = fn(&Ctx) -> Outcome;

const CRITERIA: [(u32, &str, Check, u64); 10] = [
    (1, "algorithm fidelity", c1_fidelity, 1),
    (2, "clock laws", c2_clock_laws, 10),
    (3, "sdpa reduction", c3_reduction, 5),
    (4, "meeting kernel", c4_meeting_kernel, 120),
    (5, "variance profiles", c5_variance_profiles, 120),
    (6, "gradient certification", c6_gradients, 60),
    (7, "toy-task alignment", c7_alignment, 2400),
    (8, "length robustness", c8_length, 300),
    (9, "autoregressive consistency", c9_autoregressive, 10),
    (10, "determinism", c10_determinism, 600),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx {
        work: tempfile::tempdir().expect("temporary directory"),
        mc: OnceCell::new(),
        runs: OnceCell::new(),
    };
    let mut failed = 0;
    for (id, name, check, budget) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let result = check(&ctx);
        let took = t0.elapsed();
        // Shared training and Monte-Carlo work is charged to the first
        // criterion that needs it.
        let timing = format!("{:.1} s, budget {} s", took.as_secs_f64(), budget);
        let over = if took > Duration::from_secs(budget) { " [over budget]" } else { "" };
        match result {
            Ok(detail) => println!("criterion {id:2} PASS {name}: {detail} ({timing}){over}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:2} FAIL {name}: {detail} ({timing}){over}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
