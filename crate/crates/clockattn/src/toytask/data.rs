use clockattn_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic monotonic-alignment corpus parameters.
///
/// Every vocabulary entry has a fixed duration drawn once from `dur_range`,
/// so the frame count of a token is a function of the token and alignment
/// is learnable from the source alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub vocab: usize,
    /// Inclusive source length range.
    pub n_range: [usize; 2],
    /// Inclusive frames-per-token range.
    pub dur_range: [usize; 2],
    pub features: usize,
    pub noise_std: f64,
    /// Amplitude of a linear within-token ramp added to the target.
    pub ramp: f64,
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            vocab: 20,
            n_range: [5, 12],
            dur_range: [2, 6],
            features: 8,
            noise_std: 0.05,
            ramp: 0.0,
            n_instances: 2000,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab == 0 || self.features == 0 {
            return bad("vocab and features must be positive");
        }
        if self.n_range[0] == 0 || self.n_range[0] > self.n_range[1] {
            return bad("n_range must be a non-empty range of positive lengths");
        }
        if self.dur_range[0] == 0 || self.dur_range[0] > self.dur_range[1] {
            return bad("dur_range must be a non-empty range of positive durations");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) || !self.ramp.is_finite() {
            return bad("noise_std must be non-negative and ramp finite");
        }
        if self.n_instances == 0 {
            return bad("n_instances must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentInstance {
    pub source_tokens: Vec<usize>,
    pub durations: Vec<usize>,
    /// `[T × F]`.
    pub target: Matrix,
    /// Source index of every target frame.
    pub gt_path: Vec<usize>,
    pub noise_std: f64,
}

impl AlignmentInstance {
    pub fn source_len(&self) -> usize {
        self.source_tokens.len()
    }

    pub fn target_len(&self) -> usize {
        self.gt_path.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// `[V × F]` clean target frame per token.
    pub token_frames: Matrix,
    pub token_durations: Vec<usize>,
    pub instances: Vec<AlignmentInstance>,
}

impl Dataset {
    /// Mean frames per source token over the corpus.
    pub fn mean_ratio(&self) -> f64 {
        let (frames, tokens) = self.instances.iter().fold((0, 0), |(f, t), i| {
            (f + i.target_len(), t + i.source_len())
        });
        frames as f64 / tokens as f64
    }

    /// Draws `n` more instances from the same vocabulary, seeded by `seed`.
    pub fn sample_more(&self, n: usize, seed: u64) -> Vec<AlignmentInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> AlignmentInstance {
        let c = &self.config;
        let n = rng.random_range(c.n_range[0]..=c.n_range[1]);
        let source_tokens: Vec<usize> = (0..n).map(|_| rng.random_range(0..c.vocab)).collect();
        let durations: Vec<usize> = source_tokens.iter().map(|&v| self.token_durations[v]).collect();
        let gt_path: Vec<usize> = durations
            .iter()
            .enumerate()
            .flat_map(|(j, &d)| std::iter::repeat_n(j, d))
            .collect();
        let mut target = Matrix::zeros(gt_path.len(), c.features);
        let mut t = 0;
        for (&tok, &d) in source_tokens.iter().zip(&durations) {
            for k in 0..d {
                let frac = if d > 1 { k as f64 / (d - 1) as f64 - 0.5 } else { 0.0 };
                for (f, o) in target.row_mut(t).iter_mut().enumerate() {
                    *o = self.token_frames[(tok, f)] + c.ramp * frac;
                    if c.noise_std > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        *o += c.noise_std * z;
                    }
                }
                t += 1;
            }
        }
        AlignmentInstance {
            source_tokens,
            durations,
            target,
            gt_path,
            noise_std: c.noise_std,
        }
    }
}

/// Deterministic corpus for `config`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let token_frames = Matrix::from_fn(config.vocab, config.features, |_, _| {
        StandardNormal.sample(&mut rng)
    });
    let token_durations = (0..config.vocab)
        .map(|_| rng.random_range(config.dur_range[0]..=config.dur_range[1]))
        .collect();
    let mut ds = Dataset {
        config: config.clone(),
        token_frames,
        token_durations,
        instances: Vec::new(),
    };
    ds.instances = (0..config.n_instances).map(|_| ds.draw(&mut rng)).collect();
    Ok(ds)
}
