use std::fmt;
use std::str::FromStr;

use clockattn_core::autodiff::layers::{
    sca_attention, sdpa_attention, AttentionConfig, AttentionVars, GraphSeq,
};
use clockattn_core::autodiff::{Tape, Var};
use clockattn_core::{ClockMode, Matrix, DEFAULT_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four compared configurations. Only the cross-attention score and the
/// decoding regime differ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Normalized clocks, parallel decoding.
    ScaNorm,
    /// Unnormalized clocks, autoregressive decoding.
    ScaUnnorm,
    /// Dot-product score, parallel decoding.
    Sdpa,
    /// Dot-product score, autoregressive decoding.
    SdpaAr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ScaNorm, Variant::ScaUnnorm, Variant::Sdpa, Variant::SdpaAr];

    pub fn is_sca(self) -> bool {
        matches!(self, Variant::ScaNorm | Variant::ScaUnnorm)
    }

    pub fn is_autoregressive(self) -> bool {
        matches!(self, Variant::ScaUnnorm | Variant::SdpaAr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ScaNorm => "sca-norm",
            Variant::ScaUnnorm => "sca-unnorm",
            Variant::Sdpa => "sdpa",
            Variant::SdpaAr => "sdpa-ar",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub eps: f64,
    pub logit_scale: f64,
    /// When false `logit_scale` stays fixed and parameter counts match exactly.
    pub learn_logit_scale: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            ffn_dim: 64,
            num_heads: 1,
            eps: DEFAULT_EPS,
            logit_scale: 1.0,
            learn_logit_scale: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config("num_heads must divide d_model".into()));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for sinusoidal positions".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Sizes the model needs from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskShape {
    pub vocab: usize,
    pub features: usize,
}

// Parameter slots, in storage order.
const TOK_EMB: usize = 0;
const ENC_WQ: usize = 1;
const ENC_WK: usize = 2;
const ENC_WV: usize = 3;
const FFN_W1: usize = 4;
const FFN_B1: usize = 5;
const FFN_W2: usize = 6;
const FFN_B2: usize = 7;
const DEC_WIN: usize = 8;
const DEC_BIN: usize = 9;
const X_WQ: usize = 10;
const X_WK: usize = 11;
const X_WV: usize = 12;
const OUT_WC: usize = 13;
const OUT_WU: usize = 14;
const OUT_B1: usize = 15;
const OUT_W: usize = 16;
const OUT_B: usize = 17;
const LOGIT_SCALE: usize = 18;

const NAMES: [&str; 19] = [
    "tok_emb", "enc_wq", "enc_wk", "enc_wv", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "dec_win",
    "dec_bin", "x_wq", "x_wk", "x_wv", "out_wc", "out_wu", "out_b1", "out_w", "out_b",
    "logit_scale",
];

/// Encoder-decoder whose only varied component is the cross-attention.
///
/// Encoder: token embedding plus sinusoidal positions, one dot-product
/// self-attention block and a tanh feed-forward block, both residual.
/// Decoder queries come from sinusoidal positions of the target frames
/// (parallel) or from `[previous frame, position]` (autoregressive).
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub variant: Variant,
    pub config: ModelConfig,
    pub shape: TaskShape,
    pub params: Vec<Matrix>,
}

/// Recorded forward pass of one instance.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[T × F]` prediction.
    pub output: Var,
    /// `[T × N]` cross-attention weights (first head).
    pub weights: Var,
}

/// Sinusoidal position features of positions `0..len`, `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |t, c| {
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / dim as f64);
        let angle = t as f64 * freq;
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl ToyModel {
    pub fn new(variant: Variant, config: ModelConfig, shape: TaskShape) -> Result<Self> {
        config.validate()?;
        if shape.vocab == 0 || shape.features == 0 {
            return Err(Error::Config("vocab and features must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = Self::param_shapes(variant, &config, shape)
            .into_iter()
            .map(|(name, rows, cols)| match name {
                "logit_scale" => Matrix::filled(1, 1, config.logit_scale),
                "tok_emb" => random(&mut rng, rows, cols, 1.0),
                _ if rows == 1 => Matrix::zeros(rows, cols),
                _ => random(&mut rng, rows, cols, 1.0 / (rows as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            variant,
            config,
            shape,
            params,
        })
    }

    /// Name and shape of every trainable tensor, in storage order.
    pub fn param_shapes(
        variant: Variant,
        config: &ModelConfig,
        shape: TaskShape,
    ) -> Vec<(&'static str, usize, usize)> {
        let (d, h, f) = (config.d_model, config.ffn_dim, shape.features);
        let din = if variant.is_autoregressive() { f + d } else { d };
        let mut shapes = vec![
            (shape.vocab, d),
            (d, d),
            (d, d),
            (d, d),
            (d, h),
            (1, h),
            (h, d),
            (1, d),
            (din, d),
            (1, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (1, d),
            (d, f),
            (1, f),
        ];
        if variant.is_sca() && config.learn_logit_scale {
            shapes.push((1, 1));
        }
        shapes
            .into_iter()
            .enumerate()
            .map(|(i, (r, c))| (NAMES[i], r, c))
            .collect()
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        NAMES[..self.params.len()].to_vec()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.rows() * p.cols()).sum()
    }

    pub fn logit_scale(&self) -> f64 {
        self.params
            .get(LOGIT_SCALE)
            .map_or(self.config.logit_scale, |m| m[(0, 0)])
    }

    /// Registers every parameter as a leaf.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Constant decoder input: positions, preceded by the previous frames in
    /// the autoregressive regime.
    pub fn decoder_input(&self, target_len: usize, prev_frames: Option<&Matrix>) -> Result<Matrix> {
        let pos = sinusoidal_positions(target_len, self.config.d_model);
        match (self.variant.is_autoregressive(), prev_frames) {
            (false, None) => Ok(pos),
            (true, Some(prev)) => {
                if prev.shape() != (target_len, self.shape.features) {
                    return Err(Error::Config(format!(
                        "previous frames have shape {:?}, expected ({target_len}, {})",
                        prev.shape(),
                        self.shape.features
                    )));
                }
                Ok(Matrix::concat_cols(&[prev.clone(), pos])?)
            }
            (false, Some(_)) => Err(Error::Config("parallel decoders take no previous frames".into())),
            (true, None) => Err(Error::Config("autoregressive decoders need previous frames".into())),
        }
    }

    /// Records the model on `tape` for one source and decoder input.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        source: &[usize],
        decoder_input: &Matrix,
    ) -> Result<Forward> {
        if source.is_empty() || decoder_input.rows() == 0 {
            return Err(Error::Config("empty source or target".into()));
        }
        if let Some(&bad) = source.iter().find(|&&s| s >= self.shape.vocab) {
            return Err(Error::Config(format!("token {bad} outside the vocabulary")));
        }
        let d = self.config.d_model;
        let src_mask = vec![true; source.len()];
        let tgt_mask = vec![true; decoder_input.rows()];

        let emb = tape.gather_rows(vars[TOK_EMB], source);
        let pos = tape.leaf(sinusoidal_positions(source.len(), d));
        let x0 = tape.add(emb, pos);
        let enc_cfg = AttentionConfig {
            num_heads: self.config.num_heads,
            eps: self.config.eps,
            ..AttentionConfig::default()
        };
        let xs = GraphSeq::new(x0, &src_mask);
        let enc_w = AttentionVars {
            wq: vars[ENC_WQ],
            wk: vars[ENC_WK],
            wv: vars[ENC_WV],
            logit_scale: None,
        };
        let sa = sdpa_attention(tape, xs, xs, xs, &enc_w, &enc_cfg, None)?;
        let h = tape.add(x0, sa.context);
        let f = self.ffn(tape, vars, h);
        let memory = tape.add(h, f);

        let inp = tape.leaf(decoder_input.clone());
        let u = tape.matmul(inp, vars[DEC_WIN]);
        let u = tape.add_row(u, vars[DEC_BIN]);

        let qs = GraphSeq::new(u, &tgt_mask);
        let ms = GraphSeq::new(memory, &src_mask);
        let w = AttentionVars {
            wq: vars[X_WQ],
            wk: vars[X_WK],
            wv: vars[X_WV],
            logit_scale: vars.get(LOGIT_SCALE).copied(),
        };
        let cfg = AttentionConfig {
            logit_scale: self.config.logit_scale,
            eps: self.config.eps,
            mode: if self.variant == Variant::ScaNorm {
                ClockMode::Normalized
            } else {
                ClockMode::Unnormalized
            },
            causal: self.variant == Variant::ScaUnnorm,
            num_heads: self.config.num_heads,
            include_log_variance: false,
        };
        let cross = if self.variant.is_sca() {
            sca_attention(tape, qs, ms, ms, &w, &cfg, None)?
        } else {
            sdpa_attention(tape, qs, ms, ms, &w, &cfg, None)?
        };

        let a = tape.matmul(cross.context, vars[OUT_WC]);
        let b = tape.matmul(u, vars[OUT_WU]);
        let z = tape.add(a, b);
        let z = tape.add_row(z, vars[OUT_B1]);
        let z = tape.tanh(z);
        let y = tape.matmul(z, vars[OUT_W]);
        let output = tape.add_row(y, vars[OUT_B]);
        Ok(Forward {
            output,
            weights: cross.head_weights[0],
        })
    }

    fn ffn(&self, tape: &mut Tape, vars: &[Var], h: Var) -> Var {
        let a = tape.matmul(h, vars[FFN_W1]);
        let a = tape.add_row(a, vars[FFN_B1]);
        let a = tape.tanh(a);
        let b = tape.matmul(a, vars[FFN_W2]);
        tape.add_row(b, vars[FFN_B2])
    }

    /// Prediction and cross-attention weights without gradients.
    pub fn predict(&self, source: &[usize], decoder_input: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let fw = self.forward(&mut tape, &vars, source, decoder_input)?;
        Ok((tape.value(fw.output).clone(), tape.value(fw.weights).clone()))
    }

    /// Parallel decode of `target_len` frames.
    pub fn decode_parallel(&self, source: &[usize], target_len: usize) -> Result<(Matrix, Matrix)> {
        let inp = self.decoder_input(target_len, None)?;
        self.predict(source, &inp)
    }

    /// Teacher-forced forward of an autoregressive model on `target`.
    pub fn teacher_forced(&self, source: &[usize], target: &Matrix) -> Result<(Matrix, Matrix)> {
        let inp = self.decoder_input(target.rows(), Some(&shift_frames(target)))?;
        self.predict(source, &inp)
    }

    /// Decodes frame `step` from the given frames `0..step` only, by
    /// running the model on that prefix and keeping its last row.
    pub fn decode_step(&self, source: &[usize], prefix_frames: &Matrix, step: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        if prefix_frames.rows() < step {
            return Err(Error::Config("prefix shorter than step".into()));
        }
        let given = Matrix::from_fn(step, self.shape.features, |r, c| prefix_frames[(r, c)]);
        let prev = shift_frames_with_next(&given);
        let inp = self.decoder_input(step + 1, Some(&prev))?;
        let (out, w) = self.predict(source, &inp)?;
        Ok((out.row(step).to_vec(), w.row(step).to_vec()))
    }

    /// Free-running autoregressive generation of `target_len` frames.
    pub fn generate(&self, source: &[usize], target_len: usize) -> Result<(Matrix, Matrix)> {
        let mut frames = Matrix::zeros(target_len, self.shape.features);
        let mut weights = Matrix::zeros(target_len, source.len());
        for t in 0..target_len {
            let (y, w) = self.decode_step(source, &frames, t)?;
            frames.row_mut(t).copy_from_slice(&y);
            weights.row_mut(t).copy_from_slice(&w);
        }
        Ok((frames, weights))
    }

    /// Prediction and weights on `target`'s length: teacher forcing for
    /// autoregressive models, a parallel decode otherwise.
    pub fn evaluate_instance(&self, source: &[usize], target: &Matrix) -> Result<(Matrix, Matrix)> {
        if self.variant.is_autoregressive() {
            self.teacher_forced(source, target)
        } else {
            self.decode_parallel(source, target.rows())
        }
    }

    /// Graph of one training instance: prediction and L1 loss node.
    pub fn loss(&self, tape: &mut Tape, vars: &[Var], source: &[usize], target: &Matrix) -> Result<Var> {
        let inp = if self.variant.is_autoregressive() {
            self.decoder_input(target.rows(), Some(&shift_frames(target)))?
        } else {
            self.decoder_input(target.rows(), None)?
        };
        let fw = self.forward(tape, vars, source, &inp)?;
        Ok(tape.l1_loss(fw.output, target, &vec![true; target.rows()]))
    }
}

/// Teacher-forcing input: a zero start frame followed by `target[..T-1]`.
pub fn shift_frames(target: &Matrix) -> Matrix {
    Matrix::from_fn(target.rows(), target.cols(), |r, c| {
        if r == 0 {
            0.0
        } else {
            target[(r - 1, c)]
        }
    })
}

/// Previous-frame input for predicting one frame past `given`.
fn shift_frames_with_next(given: &Matrix) -> Matrix {
    Matrix::from_fn(given.rows() + 1, given.cols(), |r, c| {
        if r == 0 {
            0.0
        } else {
            given[(r - 1, c)]
        }
    })
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}
