use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariance of the zero-mean fluctuation, with `ell` in grid steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    White { sigma: f64 },
    OrnsteinUhlenbeck { sigma: f64, ell: f64 },
    SquaredExponential { sigma: f64, ell: f64 },
}

impl Kernel {
    pub fn sigma(&self) -> f64 {
        match *self {
            Kernel::White { sigma }
            | Kernel::OrnsteinUhlenbeck { sigma, .. }
            | Kernel::SquaredExponential { sigma, .. } => sigma,
        }
    }

    /// Same shape with amplitude `sigma`.
    pub fn with_sigma(self, sigma: f64) -> Self {
        match self {
            Kernel::White { .. } => Kernel::White { sigma },
            Kernel::OrnsteinUhlenbeck { ell, .. } => Kernel::OrnsteinUhlenbeck { sigma, ell },
            Kernel::SquaredExponential { ell, .. } => Kernel::SquaredExponential { sigma, ell },
        }
    }

    /// Covariance at a lag of `k` grid steps.
    pub fn covariance(&self, k: usize) -> f64 {
        let k = k as f64;
        match *self {
            Kernel::White { sigma } => {
                if k == 0.0 {
                    sigma * sigma
                } else {
                    0.0
                }
            }
            Kernel::OrnsteinUhlenbeck { sigma, ell } => sigma * sigma * (-k / ell).exp(),
            Kernel::SquaredExponential { sigma, ell } => {
                sigma * sigma * (-k * k / (2.0 * ell * ell)).exp()
            }
        }
    }
}

/// Gaussian rate field `η = mean_path + ξ`, `ξ ~ N(0, C)` on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub mean_path: Vec<f64>,
    pub kernel: Kernel,
    pub grid_step: f64,
}

impl FieldSpec {
    pub fn constant(len: usize, mean: f64, kernel: Kernel, grid_step: f64) -> Self {
        Self {
            mean_path: vec![mean; len],
            kernel,
            grid_step,
        }
    }

    pub fn grid_len(&self) -> usize {
        self.mean_path.len()
    }

    /// Clock span `S = (L - 1) Δu`.
    pub fn span(&self) -> f64 {
        (self.grid_len() as f64 - 1.0) * self.grid_step
    }

    pub fn is_stationary(&self) -> bool {
        self.mean_path.windows(2).all(|w| w[0] == w[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_len() < 2 {
            return Err(Error::FieldSpec("grid_len must be at least 2".into()));
        }
        if !(self.grid_step > 0.0 && self.grid_step.is_finite()) {
            return Err(Error::FieldSpec("grid_step must be positive".into()));
        }
        if self.mean_path.iter().any(|m| !m.is_finite()) {
            return Err(Error::FieldSpec("mean_path must be finite".into()));
        }
        let sigma = self.kernel.sigma();
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::FieldSpec("sigma must be non-negative".into()));
        }
        match self.kernel {
            Kernel::OrnsteinUhlenbeck { ell, .. } | Kernel::SquaredExponential { ell, .. }
                if !(ell > 0.0 && ell.is_finite()) =>
            {
                Err(Error::FieldSpec("ell must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Jitter levels tried, relative to the kernel variance.
const JITTERS: [f64; 8] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

enum Factor {
    /// Deterministic field.
    Zero,
    /// `σ I`.
    Diagonal(f64),
    /// Lower Cholesky factor, row-major.
    Dense(Vec<f64>),
}

/// Precomputed sampler for one field.
pub struct FieldSampler {
    spec: FieldSpec,
    factor: Factor,
}

impl FieldSampler {
    pub fn new(spec: &FieldSpec) -> Result<Self> {
        spec.validate()?;
        let sigma = spec.kernel.sigma();
        let factor = match spec.kernel {
            _ if sigma == 0.0 => Factor::Zero,
            Kernel::White { sigma } => Factor::Diagonal(sigma),
            kernel => Factor::Dense(cholesky_with_jitter(&kernel, spec.grid_len())?),
        };
        Ok(Self {
            spec: spec.clone(),
            factor,
        })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    /// Applies the factor to given standard normals, `out = mean + L z`.
    pub fn transform(&self, z: &[f64], out: &mut [f64]) {
        let n = self.spec.grid_len();
        out.copy_from_slice(&self.spec.mean_path);
        match &self.factor {
            Factor::Zero => {}
            Factor::Diagonal(sigma) => {
                for (o, zi) in out.iter_mut().zip(z) {
                    *o += sigma * zi;
                }
            }
            Factor::Dense(l) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &l[i * n..i * n + i + 1];
                    *o += row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

fn cholesky_with_jitter(kernel: &Kernel, n: usize) -> Result<Vec<f64>> {
    let var = kernel.covariance(0);
    let cov = DMatrix::from_fn(n, n, |i, j| kernel.covariance(i.abs_diff(j)));
    let mut last = 0.0;
    for rel in JITTERS {
        last = rel * var;
        let mut c = cov.clone();
        for i in 0..n {
            c[(i, i)] += last;
        }
        if let Some(chol) = c.cholesky() {
            let l = chol.l();
            return Ok((0..n * n).map(|k| l[(k / n, k % n)]).collect());
        }
    }
    Err(Error::Cholesky { jitter: last })
}

/// RNG stream of one Monte-Carlo sample; independent of scheduling.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn fill_normals<R: rand::Rng>(rng: &mut R, z: &mut [f64]) {
    for v in z.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// One draw of the field, deterministic in `seed`.
pub fn sample_field(spec: &FieldSpec, seed: u64) -> Result<Vec<f64>> {
    let sampler = FieldSampler::new(spec)?;
    let mut z = vec![0.0; spec.grid_len()];
    fill_normals(&mut sample_rng(seed, 0), &mut z);
    let mut out = vec![0.0; spec.grid_len()];
    sampler.transform(&z, &mut out);
    Ok(out)
}
