//! The `clockattn` command line: configuration documents, the six
//! subcommands and their output layout.
//!
//! Exit status is 0 on success, 1 when an assertion of the command fails and
//! 2 for usage, configuration or I/O problems.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clockattn_core::autodiff::GradcheckConfig;
use clockattn_core::{phi, ClockMode, DEFAULT_EPS};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mc_oracle::{self, bridge_variance_fit, mc_meeting_density, BridgeFit, FieldSpec, Kernel, MeetingConfig};
use crate::toytask::{
    compute_metrics, generate_dataset, length_sweep, rescale_path, train, Dataset, DatasetConfig, Metrics,
    ModelConfig, SweepPoint, TaskShape, ToyModel, TrainConfig, Variant,
};
use crate::{certify, selftest};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps the rayon pool used by the Monte-Carlo oracle.
pub const THREADS_ENV: &str = "CLOCKATTN_THREADS";

/// Name of the resolved-configuration sidecar in every output directory.
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Multiples of the training set's mean frames-per-token ratio.
    pub ratios: Vec<f64>,
    pub eval_instances: usize,
    /// Seed of the held-out instances drawn from the training vocabulary.
    pub eval_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 1.0, 2.0],
            eval_instances: 100,
            eval_seed: 999,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McTolerances {
    pub max_rel_err: f64,
    pub r2: f64,
    pub c_ratio: [f64; 2],
}

impl Default for McTolerances {
    fn default() -> Self {
        Self {
            max_rel_err: 0.15,
            r2: 0.95,
            c_ratio: [0.8, 1.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub grid_len: usize,
    /// Constant mean of the rate field.
    pub mean: f64,
    pub kernel: Kernel,
    pub grid_step: f64,
    /// Draws for the meeting-density estimate.
    pub n_samples: usize,
    /// Draws for each variance-profile fit.
    pub bridge_samples: usize,
    pub seed: u64,
    pub tolerances: McTolerances,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            grid_len: 64,
            mean: 0.0,
            kernel: Kernel::White { sigma: 0.05 },
            grid_step: 1.0,
            n_samples: 200_000,
            bridge_samples: 200_000,
            seed: 0,
            tolerances: McTolerances::default(),
        }
    }
}

impl McConfig {
    pub fn field(&self) -> FieldSpec {
        FieldSpec::constant(self.grid_len, self.mean, self.kernel, self.grid_step)
    }
}

/// Everything a run reads. Each entry of `seeds` is added to the dataset,
/// initialisation and batching seeds to form one independent run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub mc: McConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            variant: Variant::ScaNorm,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            mc: McConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.sweep.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("sweep ratios must be positive".into()));
        }
        if self.sweep.eval_instances == 0 {
            return Err(Error::Config("sweep.eval_instances must be positive".into()));
        }
        let mc = &self.mc;
        if mc.n_samples < 2 || mc.bridge_samples < 2 {
            return Err(Error::Config("mc sample counts must be at least 2".into()));
        }
        if mc.grid_len < 3 {
            return Err(Error::Config("mc.grid_len must be at least 3".into()));
        }
        mc.field().validate()?;
        Ok(())
    }

    pub fn shape(&self) -> TaskShape {
        TaskShape {
            vocab: self.dataset.vocab,
            features: self.dataset.features,
        }
    }

    /// Dataset, model and trainer settings of the run for `seed`.
    pub fn run(&self, seed: u64) -> (DatasetConfig, ModelConfig, TrainConfig) {
        let mut d = self.dataset.clone();
        let mut m = self.model.clone();
        let mut t = self.train.clone();
        d.seed = d.seed.wrapping_add(seed);
        m.init_seed = m.init_seed.wrapping_add(seed);
        t.seed = t.seed.wrapping_add(seed);
        (d, m, t)
    }
}

#[derive(Debug, Parser)]
#[command(name = "clockattn", version, about = "Stochastic clock attention: checks, oracle and toy experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the tensor, clock and attention property suites.
    Selftest {
        #[arg(long, value_name = "NAME")]
        filter: Option<String>,
        /// Gate floor for the clock suites (0 injects the monotonicity fault).
        #[arg(long, default_value_t = DEFAULT_EPS)]
        clock_eps: f64,
        /// Random instances per clock-law suite.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare every backward rule with central finite differences.
    Gradcheck {
        #[arg(long, value_name = "NAME")]
        filter: Option<String>,
    },
    /// Validate the closed-form meeting kernel and variance profiles by Monte Carlo.
    McValidate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy alignment model once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Decode held-out data at several length ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        /// Comma-separated multiples of the training mean frames-per-token ratio.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        ratios: Option<Vec<f64>>,
        /// Sweep this model instead of training one per seed.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Export one attention map as CSV and PGM.
    Align {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Index into the held-out instances.
        #[arg(long, default_value_t = 0, conflicts_with = "tokens")]
        instance: usize,
        /// Explicit comma-separated source tokens.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        tokens: Option<Vec<usize>>,
        /// Output length; defaults to the instance length or the training mean ratio.
        #[arg(long)]
        frames: Option<usize>,
        /// Autoregressive models: feed back generated frames instead of teacher forcing.
        #[arg(long)]
        generate: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => EXIT_FAIL,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Selftest {
            filter,
            clock_eps,
            instances,
            seed,
        } => cmd_selftest(
            filter.as_deref(),
            &selftest::SelftestOptions {
                clock_eps,
                clock_instances: instances,
                seed,
            },
        ),
        Command::Gradcheck { filter } => cmd_gradcheck(filter.as_deref()),
        Command::McValidate { common } => {
            let (cfg, out) = resolve(&common, None, "mc")?;
            cmd_mc_validate(&cfg, &out)
        }
        Command::Train { common, variant } => {
            let (cfg, out) = resolve(&common, variant, "train")?;
            cmd_train(&cfg, &out)
        }
        Command::Sweep {
            common,
            variant,
            ratios,
            checkpoint,
        } => {
            let (mut cfg, out) = resolve(&common, variant, "sweep")?;
            if let Some(r) = ratios {
                cfg.sweep.ratios = r;
                cfg.validate()?;
            }
            cmd_sweep(&cfg, &out, checkpoint.as_deref(), variant.is_some())
        }
        Command::Align {
            common,
            variant,
            checkpoint,
            instance,
            tokens,
            frames,
            generate,
        } => {
            let (cfg, out) = resolve(&common, variant, "align")?;
            let request = AlignRequest {
                checkpoint,
                check_variant: variant.is_some(),
                source: match tokens {
                    Some(t) => AlignSource::Tokens(t),
                    None => AlignSource::Instance(instance),
                },
                frames,
                generate,
            };
            cmd_align(&cfg, &out, &request)
        }
    }
}

fn resolve(common: &Common, variant: Option<Variant>, default_out: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
        cfg.mc.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| Path::new("runs").join(default_out));
    Ok((cfg, out))
}

fn write_sidecar(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    io::write_json(&out.join(RESOLVED_CONFIG), cfg)
}

pub fn cmd_selftest(filter: Option<&str>, opts: &selftest::SelftestOptions) -> Result<i32> {
    let results = selftest::run(filter, opts);
    if results.is_empty() {
        return Err(Error::Config(format!("no suite matches {:?}", filter.unwrap_or(""))));
    }
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  {}", r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    println!("{} suites, {} failed", results.len(), failed.len());
    if failed.is_empty() {
        Ok(EXIT_PASS)
    } else {
        eprintln!("failed suites: {}", failed.join(", "));
        Ok(EXIT_FAIL)
    }
}

pub fn cmd_gradcheck(filter: Option<&str>) -> Result<i32> {
    let cfg = GradcheckConfig::default();
    let reports = certify::run(filter, cfg)?;
    if reports.is_empty() {
        return Err(Error::Config(format!("no case matches {:?}", filter.unwrap_or(""))));
    }
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:width$}  max_rel_err {:.3e} over {} instances", r.name, r.max_rel_err, r.instances);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} cases, {} failed (h={}, tol={})", reports.len(), failed, cfg.h, cfg.tol);
    Ok(if failed == 0 { EXIT_PASS } else { EXIT_FAIL })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McChecks {
    pub kernel: bool,
    pub bridge_r2: Option<bool>,
    pub c_ratio: Option<bool>,
    pub linear_r2: Option<bool>,
}

/// Contents of `summary.json` written by `mc-validate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_samples: usize,
    pub bridge_samples: usize,
    pub sigma: f64,
    /// Noiseless field: the closed form is the smoothing kernel itself.
    pub deterministic: bool,
    /// Worst relative error of the normalized-clock meeting density.
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pairs: usize,
    pub max_rel_err_unnormalized: f64,
    pub pairs_unnormalized: usize,
    #[serde(rename = "R2_bridge")]
    pub r2_bridge: Option<f64>,
    pub c_fitted: f64,
    pub c_predicted: f64,
    /// Fitted over predicted bridge amplitude.
    pub c_ratio: Option<f64>,
    #[serde(rename = "R2_linear")]
    pub r2_linear: Option<f64>,
    pub c_ratio_linear: Option<f64>,
    pub mu_hat: f64,
    pub k_hat: f64,
    pub tolerances: McTolerances,
    pub checks: McChecks,
    pub warnings: Vec<String>,
    /// Absent when the sample count is too small to assert anything.
    pub pass: Option<bool>,
}

/// Full output of one validation run.
#[derive(Clone, Debug)]
pub struct McReport {
    pub summary: McSummary,
    pub normalized: mc_oracle::MeetingEstimate,
    pub unnormalized: mc_oracle::MeetingEstimate,
    pub bridge: BridgeFit,
    pub linear: BridgeFit,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Runs both meeting-density comparisons and both variance-profile fits.
pub fn mc_validate(cfg: &McConfig) -> Result<McReport> {
    let spec = cfg.field();
    let meeting = |mode| mc_meeting_density(&spec, &spec, phi, &MeetingConfig::new(mode, cfg.n_samples, cfg.seed));
    let normalized = meeting(ClockMode::Normalized)?;
    let unnormalized = meeting(ClockMode::Unnormalized)?;
    let bridge = bridge_variance_fit(&spec, phi, ClockMode::Normalized, cfg.bridge_samples, cfg.seed)?;
    let linear = bridge_variance_fit(&spec, phi, ClockMode::Unnormalized, cfg.bridge_samples, cfg.seed)?;
    let (cn, cu) = (normalized.compare(), unnormalized.compare());
    let tol = cfg.tolerances;
    let deterministic = normalized.deterministic;
    let r2_bridge = finite(bridge.r2);
    let c_ratio = finite(bridge.ratio);
    let r2_linear = finite(linear.r2);
    // Without fluctuations the profiles are identically zero and only the
    // kernel comparison carries information.
    let checks = McChecks {
        kernel: cn.max_rel_err <= tol.max_rel_err && cu.max_rel_err <= tol.max_rel_err && cn.pairs > 0,
        bridge_r2: (!deterministic).then(|| r2_bridge.is_some_and(|r| r >= tol.r2)),
        c_ratio: (!deterministic).then(|| c_ratio.is_some_and(|c| c >= tol.c_ratio[0] && c <= tol.c_ratio[1])),
        linear_r2: (!deterministic).then(|| r2_linear.is_some_and(|r| r >= tol.r2)),
    };
    let mut warnings = Vec::new();
    let smallest = cfg.n_samples.min(cfg.bridge_samples);
    let insufficient = smallest < mc_oracle::MIN_SAMPLES;
    if insufficient {
        warnings.push(format!(
            "insufficient samples: {smallest} < {}; no pass asserted",
            mc_oracle::MIN_SAMPLES
        ));
    }
    if deterministic {
        warnings.push("deterministic field: profile fits skipped".into());
    }
    let all = checks.kernel
        && [checks.bridge_r2, checks.c_ratio, checks.linear_r2]
            .iter()
            .all(|c| c.unwrap_or(true));
    let summary = McSummary {
        n_samples: cfg.n_samples,
        bridge_samples: cfg.bridge_samples,
        sigma: cfg.kernel.sigma(),
        deterministic,
        max_rel_err: cn.max_rel_err,
        mean_rel_err: cn.mean_rel_err,
        pairs: cn.pairs,
        max_rel_err_unnormalized: cu.max_rel_err,
        pairs_unnormalized: cu.pairs,
        r2_bridge,
        c_fitted: bridge.fitted_c,
        c_predicted: bridge.predicted_c,
        c_ratio,
        r2_linear,
        c_ratio_linear: finite(linear.ratio),
        mu_hat: bridge.stats.mu_hat,
        k_hat: bridge.stats.k_hat,
        tolerances: tol,
        checks,
        warnings,
        pass: (!insufficient).then_some(all),
    };
    Ok(McReport {
        summary,
        normalized,
        unnormalized,
        bridge,
        linear,
    })
}

fn write_fit(path: &Path, fit: &BridgeFit, mode: ClockMode) -> Result<()> {
    let rows: Vec<Vec<f64>> = fit
        .s_frac
        .iter()
        .zip(&fit.empirical_var)
        .map(|(&s, &v)| {
            let p = mc_oracle::profile(s, mode);
            vec![s, v, fit.fitted_c * p, fit.predicted_c * p]
        })
        .collect();
    io::write_table_csv(path, &["s_frac", "empirical_var", "fitted", "predicted"], &rows)
}

pub fn cmd_mc_validate(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    write_sidecar(cfg, out)?;
    let report = mc_validate(&cfg.mc)?;
    io::write_matrix_csv(&out.join("density_normalized.csv"), &report.normalized.density)?;
    io::write_matrix_csv(&out.join("closed_form_normalized.csv"), &report.normalized.closed_form)?;
    io::write_matrix_csv(&out.join("density_unnormalized.csv"), &report.unnormalized.density)?;
    io::write_matrix_csv(&out.join("closed_form_unnormalized.csv"), &report.unnormalized.closed_form)?;
    write_fit(&out.join("bridge_normalized.csv"), &report.bridge, ClockMode::Normalized)?;
    write_fit(&out.join("bridge_unnormalized.csv"), &report.linear, ClockMode::Unnormalized)?;
    let s = &report.summary;
    io::write_json(&out.join("summary.json"), s)?;
    let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "meeting kernel: max_rel_err {:.4} over {} pairs (unnormalized {:.4} over {})",
        s.max_rel_err, s.pairs, s.max_rel_err_unnormalized, s.pairs_unnormalized
    );
    println!(
        "bridge profile: R2 {} c_ratio {}; linear profile: R2 {}",
        show(s.r2_bridge),
        show(s.c_ratio),
        show(s.r2_linear)
    );
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    match s.pass {
        Some(true) => {
            println!("pass");
            Ok(EXIT_PASS)
        }
        Some(false) => {
            println!("FAIL");
            Ok(EXIT_FAIL)
        }
        None => Ok(EXIT_PASS),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub initial: Metrics,
    #[serde(rename = "final")]
    pub final_metrics: Metrics,
    /// Final over initial evaluation L1.
    pub l1_ratio: f64,
}

/// One seeded training run with its artifacts written to `dir`.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<(ToyModel, Dataset, TrainSummary)> {
    let (dcfg, mcfg, tcfg) = cfg.run(seed);
    std::fs::create_dir_all(dir)?;
    let dataset = generate_dataset(&dcfg)?;
    let model = ToyModel::new(cfg.variant, mcfg, cfg.shape())?;
    let outcome = train(model, &dataset, &tcfg)?;
    io::write_train_log(&dir.join("metrics.csv"), &outcome.log)?;
    io::save_checkpoint(&dir.join("model.ckpt"), &outcome.model)?;
    let summary = TrainSummary {
        variant: cfg.variant,
        seed,
        initial: outcome.initial,
        final_metrics: outcome.final_metrics,
        l1_ratio: outcome.final_metrics.l1 / outcome.initial.l1,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok((outcome.model, dataset, summary))
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<i32> {
    write_sidecar(cfg, out)?;
    for &seed in &cfg.seeds {
        let (_, _, s) = train_seed(cfg, seed, &seed_dir(out, seed))?;
        println!(
            "{} seed {seed}: l1 {:.4} -> {:.4} (x{:.3}), diagonality {:.4}, coverage {:.4}",
            s.variant, s.initial.l1, s.final_metrics.l1, s.l1_ratio, s.final_metrics.diagonality, s.final_metrics.coverage
        );
    }
    Ok(EXIT_PASS)
}

/// Sweeps `model` over held-out instances; output ratios are the configured
/// multiples of the dataset's mean ratio.
pub fn sweep_model(model: &ToyModel, dataset: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let base = dataset.mean_ratio();
    let held_out = dataset.sample_more(cfg.sweep.eval_instances, cfg.sweep.eval_seed);
    let absolute: Vec<f64> = cfg.sweep.ratios.iter().map(|r| r * base).collect();
    let mut pts = length_sweep(model, &held_out, &absolute, cfg.train.window)?;
    for (p, &r) in pts.iter_mut().zip(&cfg.sweep.ratios) {
        p.ratio = r;
    }
    Ok(pts)
}

fn print_sweep(label: &str, pts: &[SweepPoint]) {
    for p in pts {
        println!(
            "{label} ratio {:.3}: l1 {:.4} diagonality {:.4} coverage {:.4} violations {}",
            p.ratio, p.metrics.l1, p.metrics.diagonality, p.metrics.coverage, p.metrics.monotonicity_violations
        );
    }
}

fn check_checkpoint(model: &ToyModel, cfg: &ExperimentConfig, check_variant: bool) -> Result<()> {
    if model.shape != cfg.shape() {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape {:?} does not match config {:?}",
            model.shape,
            cfg.shape()
        )));
    }
    if check_variant && model.variant != cfg.variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}, --variant asks for {}",
            model.variant, cfg.variant
        )));
    }
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, check_variant: bool) -> Result<i32> {
    if checkpoint.is_none() && cfg.variant.is_autoregressive() {
        return Err(Error::Config(format!("{} decodes autoregressively; sweeps need a parallel variant", cfg.variant)));
    }
    write_sidecar(cfg, out)?;
    if let Some(path) = checkpoint {
        let model = io::load_checkpoint(path)?;
        check_checkpoint(&model, cfg, check_variant)?;
        let (dcfg, _, _) = cfg.run(cfg.seeds[0]);
        let dataset = generate_dataset(&dcfg)?;
        let pts = sweep_model(&model, &dataset, cfg)?;
        io::write_sweep(&out.join("sweep.csv"), &pts)?;
        print_sweep(model.variant.name(), &pts);
        return Ok(EXIT_PASS);
    }
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed);
        let (model, dataset, _) = train_seed(cfg, seed, &dir)?;
        let pts = sweep_model(&model, &dataset, cfg)?;
        io::write_sweep(&dir.join("sweep.csv"), &pts)?;
        print_sweep(&format!("{} seed {seed}", cfg.variant), &pts);
    }
    Ok(EXIT_PASS)
}

#[derive(Clone, Debug)]
pub enum AlignSource {
    /// Index into the held-out instances of the sweep configuration.
    Instance(usize),
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct AlignRequest {
    pub checkpoint: PathBuf,
    pub check_variant: bool,
    pub source: AlignSource,
    pub frames: Option<usize>,
    pub generate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignSummary {
    pub variant: Variant,
    pub source_tokens: Vec<usize>,
    pub frames: usize,
    pub decoding: String,
    /// Present when a reference path is known for the decoded length.
    pub metrics: Option<Metrics>,
}

pub fn cmd_align(cfg: &ExperimentConfig, out: &Path, req: &AlignRequest) -> Result<i32> {
    write_sidecar(cfg, out)?;
    let model = io::load_checkpoint(&req.checkpoint)?;
    check_checkpoint(&model, cfg, req.check_variant)?;
    let (dcfg, _, _) = cfg.run(cfg.seeds[0]);
    let dataset = generate_dataset(&dcfg)?;
    let instance = match &req.source {
        AlignSource::Instance(k) => {
            let held = dataset.sample_more(cfg.sweep.eval_instances.max(k + 1), cfg.sweep.eval_seed);
            Some(held[*k].clone())
        }
        AlignSource::Tokens(_) => None,
    };
    let tokens = match (&req.source, &instance) {
        (AlignSource::Tokens(t), _) => t.clone(),
        (_, Some(inst)) => inst.source_tokens.clone(),
        _ => unreachable!("instance sources always resolve"),
    };
    if tokens.is_empty() {
        return Err(Error::Config("no source tokens".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= model.shape.vocab) {
        return Err(Error::Config(format!("token {bad} outside vocabulary of {}", model.shape.vocab)));
    }
    let frames = req
        .frames
        .or_else(|| instance.as_ref().map(|i| i.target_len()))
        .unwrap_or_else(|| ((dataset.mean_ratio() * tokens.len() as f64).round() as usize).max(1));
    if frames == 0 {
        return Err(Error::Config("--frames must be positive".into()));
    }
    let teacher = instance.as_ref().filter(|i| i.target_len() == frames && !req.generate);
    let (decoding, (pred, weights)) = if !model.variant.is_autoregressive() {
        ("parallel", model.decode_parallel(&tokens, frames)?)
    } else if let Some(inst) = teacher {
        ("teacher-forced", model.teacher_forced(&tokens, &inst.target)?)
    } else {
        ("generated", model.generate(&tokens, frames)?)
    };
    let metrics = instance
        .as_ref()
        .map(|i| compute_metrics(&weights, &rescale_path(&i.gt_path, frames), cfg.train.window));
    io::write_matrix_csv(&out.join("weights.csv"), &weights)?;
    io::write_pgm(&out.join("weights.pgm"), &weights)?;
    io::write_matrix_csv(&out.join("prediction.csv"), &pred)?;
    let summary = AlignSummary {
        variant: model.variant,
        source_tokens: tokens,
        frames,
        decoding: decoding.into(),
        metrics,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    println!("{} {decoding}: {frames} frames x {} tokens", model.variant, summary.source_tokens.len());
    if let Some(m) = metrics {
        println!("diagonality {:.4} coverage {:.4} violations {}", m.diagonality, m.coverage, m.monotonicity_violations);
    }
    Ok(EXIT_PASS)
}
