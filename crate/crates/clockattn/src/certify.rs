//! Runtime gradient certification: every differentiable op, the clock score,
//! both attention forwards and the toy model loss, each on ten random
//! instances against central finite differences.

use clockattn_core::autodiff::{gradcheck, GradcheckConfig};
use clockattn_core::autodiff::layers::{
    clock, sca_attention, sdpa_attention, AttentionConfig, AttentionVars, GraphSeq,
};
use clockattn_core::autodiff::{Tape, Var};
use clockattn_core::{AllowMask, ClockMode, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::toytask::{ModelConfig, TaskShape, ToyModel, Variant};

pub const INSTANCES: u64 = 10;

/// Offset that keeps L1 residuals away from the kink at 0.
const KINK_OFFSET: f64 = std::f64::consts::SQRT_2 * 1e-3;

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> clockattn_core::Result<Var>>;
type Build = fn(&mut ChaCha8Rng) -> (Vec<Matrix>, Loss);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: u64,
    /// Worst relative error over all instances and entries; NaN sticks.
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// `Σ out ⊙ R` for a fixed random `R`.
fn probe(t: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = t.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.leaf(rand_matrix(&mut rng, r, c, 1.0));
    let prod = t.mul(out, w);
    t.sum(prod)
}

/// Unary op on one random `m × n` input of the given scale.
fn unary(rng: &mut ChaCha8Rng, scale: f64, rows_plus: usize, op: fn(&mut Tape, Var) -> Var) -> (Vec<Matrix>, Loss) {
    let (m, n, _) = dims(rng);
    let seed = rng.random();
    let x = rand_matrix(rng, m + rows_plus, n, scale);
    (vec![x], Box::new(move |t, p| {
        let o = op(t, p[0]);
        Ok(probe(t, o, seed))
    }))
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Var) -> (Vec<Matrix>, Loss) {
    let (m, n, _) = dims(rng);
    let seed = rng.random();
    let (a, b) = (rand_matrix(rng, m, n, 1.0), rand_matrix(rng, m, n, 1.0));
    (vec![a, b], Box::new(move |t, p| {
        let o = op(t, p[0], p[1]);
        Ok(probe(t, o, seed))
    }))
}

fn matmul_case(rng: &mut ChaCha8Rng, transposed: bool) -> (Vec<Matrix>, Loss) {
    let (m, k, n) = dims(rng);
    let seed = rng.random();
    let a = rand_matrix(rng, m, k, 1.0);
    let b = if transposed { rand_matrix(rng, n, k, 1.0) } else { rand_matrix(rng, k, n, 1.0) };
    (vec![a, b], Box::new(move |t, p| {
        let o = if transposed { t.matmul_bt(p[0], p[1]) } else { t.matmul(p[0], p[1]) };
        Ok(probe(t, o, seed))
    }))
}

fn time_norm_case(rng: &mut ChaCha8Rng, causal: bool) -> (Vec<Matrix>, Loss) {
    let l = rng.random_range(2..8);
    let n = rng.random_range(1..4);
    let valid = rng.random_range(2..=l);
    let mask: Vec<bool> = (0..l).map(|i| i < valid).collect();
    let seed = rng.random();
    let mut x = rand_matrix(rng, l, n, 2.0);
    for i in valid..l {
        x.row_mut(i).fill(0.0);
    }
    (vec![x], Box::new(move |t, p| {
        let o = t.time_norm(p[0], &mask, 1e-3, causal)?;
        Ok(probe(t, o, seed))
    }))
}

fn clock_score_case(rng: &mut ChaCha8Rng, mode: ClockMode) -> (Vec<Matrix>, Loss) {
    let (l, tk, d) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..4));
    let seed = rng.random();
    let (a, b) = (rand_matrix(rng, l, d, 1.5), rand_matrix(rng, tk, d, 1.5));
    (vec![a, b], Box::new(move |t, p| {
        let (mq, mk) = (vec![true; l], vec![true; tk]);
        let lq = clock(t, GraphSeq::new(p[0], &mq), mode, 1e-3)?;
        let lk = clock(t, GraphSeq::new(p[1], &mk), mode, 1e-3)?;
        let d2 = t.pairwise_sqdist(lq, lk);
        Ok(probe(t, d2, seed))
    }))
}

fn attention_case(rng: &mut ChaCha8Rng, mode: ClockMode, causal: bool, heads: usize, dot: bool) -> (Vec<Matrix>, Loss) {
    let (l, tk) = (rng.random_range(2..6), rng.random_range(2..6));
    let (dq, dk, dv) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
    let d = heads * rng.random_range(1..3);
    let dvo = heads * rng.random_range(1..3);
    let params = vec![
        rand_matrix(rng, l, dq, 1.0),
        rand_matrix(rng, tk, dk, 1.0),
        rand_matrix(rng, tk, dv, 1.0),
        rand_matrix(rng, dq, d, 1.0),
        rand_matrix(rng, dk, d, 1.0),
        rand_matrix(rng, dv, dvo, 1.0),
        Matrix::filled(1, 1, rng.random_range(0.5..3.0)),
    ];
    let target = rand_matrix(rng, l, dvo, 1.0).map(|x| x + KINK_OFFSET);
    let cfg = AttentionConfig {
        mode,
        causal,
        num_heads: heads,
        ..AttentionConfig::default()
    };
    (params, Box::new(move |t, p| {
        let (mq, mk) = (vec![true; l], vec![true; tk]);
        let w = AttentionVars {
            wq: p[3],
            wk: p[4],
            wv: p[5],
            logit_scale: (!dot).then_some(p[6]),
        };
        let (q, k, v) = (GraphSeq::new(p[0], &mq), GraphSeq::new(p[1], &mk), GraphSeq::new(p[2], &mk));
        let attn = if dot {
            sdpa_attention(t, q, k, v, &w, &cfg, None)?
        } else {
            sca_attention(t, q, k, v, &w, &cfg, None)?
        };
        Ok(t.l1_loss(attn.context, &target, &mq))
    }))
}

fn toy_case(rng: &mut ChaCha8Rng, variant: Variant) -> (Vec<Matrix>, Loss) {
    let shape = TaskShape { vocab: 5, features: 2 };
    let cfg = ModelConfig {
        d_model: 4,
        ffn_dim: 4,
        init_seed: rng.random(),
        ..ModelConfig::default()
    };
    let model = ToyModel::new(variant, cfg, shape).expect("valid toy config");
    let n = rng.random_range(2..5);
    let source: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let frames = rng.random_range(3..8);
    let target = rand_matrix(rng, frames, 2, 1.0).map(|x| x + KINK_OFFSET);
    let params = model.params.clone();
    (params, Box::new(move |t, p| {
        model
            .loss(t, p, &source, &target)
            .map_err(|_| clockattn_core::Error::InvalidParameter("toy loss"))
    }))
}

/// Named builders of every certified case.
pub fn cases() -> Vec<(&'static str, Build)> {
    vec![
        ("matmul", |r| matmul_case(r, false)),
        ("matmul_bt", |r| matmul_case(r, true)),
        ("add", |r| binary(r, Tape::add)),
        ("sub", |r| binary(r, Tape::sub)),
        ("mul", |r| binary(r, Tape::mul)),
        ("add_row", |r| {
            let (m, n, _) = dims(r);
            let seed = r.random();
            let (a, b) = (rand_matrix(r, m, n, 1.0), rand_matrix(r, 1, n, 1.0));
            (vec![a, b], Box::new(move |t, p| {
                let o = t.add_row(p[0], p[1]);
                Ok(probe(t, o, seed))
            }))
        }),
        ("scale_add_scalar", |r| unary(r, 1.0, 0, |t, x| {
            let o = t.scale(x, -1.7);
            let o = t.add_scalar(o, 0.3);
            t.mul(o, o)
        })),
        ("scale_by", |r| {
            let (m, n, _) = dims(r);
            let seed = r.random();
            let (a, s) = (rand_matrix(r, m, n, 1.0), rand_matrix(r, 1, 1, 2.0));
            (vec![a, s], Box::new(move |t, p| {
                let o = t.scale_by(p[0], p[1]);
                Ok(probe(t, o, seed))
            }))
        }),
        ("div_const", |r| {
            let (m, n, _) = dims(r);
            let seed = r.random();
            let denom = Matrix::from_fn(m, n, |_, _| r.random_range(0.5..2.0));
            (vec![rand_matrix(r, m, n, 1.0)], Box::new(move |t, p| {
                let o = t.div_const(p[0], denom.clone());
                Ok(probe(t, o, seed))
            }))
        }),
        ("phi", |r| unary(r, 3.0, 0, Tape::phi)),
        ("tanh", |r| unary(r, 2.0, 0, Tape::tanh)),
        ("mask_rows", |r| {
            let (m, n, _) = dims(r);
            let mask: Vec<bool> = (0..m).map(|_| r.random()).collect();
            let seed = r.random();
            (vec![rand_matrix(r, m, n, 1.0)], Box::new(move |t, p| {
                let o = t.mask_rows(p[0], &mask);
                Ok(probe(t, o, seed))
            }))
        }),
        ("mid_edge", |r| unary(r, 1.0, 1, Tape::mid_edge)),
        ("cumsum_leftpad", |r| unary(r, 1.0, 0, Tape::cumsum_leftpad)),
        ("div_col_sum", |r| {
            let (m, n, k) = dims(r);
            let seed = r.random();
            let num = rand_matrix(r, m, n, 1.0);
            let den = Matrix::from_fn(k, n, |_, _| r.random_range(0.2..1.5));
            (vec![num, den], Box::new(move |t, p| {
                let o = t.div_col_sum(p[0], p[1]);
                Ok(probe(t, o, seed))
            }))
        }),
        ("gather_rows", |r| {
            let (m, n, k) = dims(r);
            let ids: Vec<usize> = (0..k + 2).map(|_| r.random_range(0..m)).collect();
            let seed = r.random();
            (vec![rand_matrix(r, m, n, 1.0)], Box::new(move |t, p| {
                let o = t.gather_rows(p[0], &ids);
                Ok(probe(t, o, seed))
            }))
        }),
        ("slice_concat", |r| {
            let (m, n, k) = dims(r);
            let seed = r.random();
            let (a, b) = (rand_matrix(r, m, n + 2, 1.0), rand_matrix(r, m, k, 1.0));
            (vec![a, b], Box::new(move |t, p| {
                let s = t.slice_cols(p[0], 1, n);
                let o = t.concat_cols(&[p[1], s, p[0]]);
                Ok(probe(t, o, seed))
            }))
        }),
        ("time_norm", |r| time_norm_case(r, false)),
        ("time_norm_causal", |r| time_norm_case(r, true)),
        ("pairwise_sqdist", |r| {
            let (m, n, d) = dims(r);
            let seed = r.random();
            let (a, b) = (rand_matrix(r, m, d, 1.0), rand_matrix(r, n, d, 1.0));
            (vec![a, b], Box::new(move |t, p| {
                let o = t.pairwise_sqdist(p[0], p[1]);
                Ok(probe(t, o, seed))
            }))
        }),
        ("masked_softmax", |r| {
            let (m, n, _) = dims(r);
            let mut allow = AllowMask::from_fn(m, n, |_, _| r.random_bool(0.7));
            allow.set(0, 0, true);
            let seed = r.random();
            (vec![rand_matrix(r, m, n, 3.0)], Box::new(move |t, p| {
                let o = t.masked_softmax(p[0], &allow);
                Ok(probe(t, o, seed))
            }))
        }),
        ("l1_loss", |r| {
            let (m, n, _) = dims(r);
            let mask: Vec<bool> = (0..m).map(|i| i == 0 || r.random_bool(0.6)).collect();
            let target = rand_matrix(r, m, n, 1.0).map(|x| x + KINK_OFFSET);
            (vec![rand_matrix(r, m, n, 1.0)], Box::new(move |t, p| Ok(t.l1_loss(p[0], &target, &mask))))
        }),
        ("clock_score_normalized", |r| clock_score_case(r, ClockMode::Normalized)),
        ("clock_score_unnormalized", |r| clock_score_case(r, ClockMode::Unnormalized)),
        ("sca_normalized", |r| attention_case(r, ClockMode::Normalized, false, 1, false)),
        ("sca_unnormalized", |r| attention_case(r, ClockMode::Unnormalized, false, 1, false)),
        ("sca_causal", |r| attention_case(r, ClockMode::Unnormalized, true, 1, false)),
        ("sca_two_heads", |r| attention_case(r, ClockMode::Normalized, false, 2, false)),
        ("sdpa", |r| attention_case(r, ClockMode::Normalized, false, 2, true)),
        ("toy_sca_norm", |r| toy_case(r, Variant::ScaNorm)),
        ("toy_sca_unnorm", |r| toy_case(r, Variant::ScaUnnorm)),
        ("toy_sdpa", |r| toy_case(r, Variant::Sdpa)),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>, cfg: GradcheckConfig) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (name, build) in cases() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut worst = 0.0f64;
        let mut passed = true;
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (params, loss) = build(&mut rng);
            let report = gradcheck(&loss, &params, cfg)?;
            let err = report.max_rel_err();
            worst = if worst.is_nan() || err.is_nan() { f64::NAN } else { worst.max(err) };
            passed &= report.passed;
        }
        out.push(CaseReport {
            name,
            instances: INSTANCES,
            max_rel_err: worst,
            passed,
        });
    }
    Ok(out)
}
