use clockattn_core::autodiff::layers::{sca_attention, AttentionConfig, AttentionVars, GraphSeq};
use clockattn_core::autodiff::Tape;
use clockattn_core::tensor::pairwise_sqdist;
use clockattn_core::{
    build_clock, causal_allow_mask, clock_diff_score, sca_forward, sdpa_forward, AttentionParams, ClockMode,
    MaskedSeq, Matrix, DEFAULT_EPS,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

/// Query/key sequences with right padding plus square projections.
fn instance() -> impl Strategy<Value = (MaskedSeq, MaskedSeq, Matrix, Matrix, Matrix)> {
    (1usize..12, 2usize..14, 1usize..5)
        .prop_flat_map(|(l, t, d)| {
            (matrix(l, d), matrix(t, d), 1..=l, 1..=t, matrix(d, d), matrix(d, d), matrix(d, d))
        })
        .prop_map(|(q, k, lq, lk, wq, wk, wv)| {
            (
                MaskedSeq::with_prefix(q, lq).unwrap(),
                MaskedSeq::with_prefix(k, lk).unwrap(),
                wq,
                wk,
                wv,
            )
        })
}

fn check_weights(w: &Matrix, q_mask: &[bool], k_mask: &[bool]) -> Result<(), TestCaseError> {
    for i in 0..w.rows() {
        let row = w.row(i);
        if q_mask[i] {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for (j, &x) in row.iter().enumerate() {
            prop_assert!(x >= 0.0);
            if !q_mask[i] || !k_mask[j] {
                prop_assert_eq!(x, 0.0);
            }
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_are_row_stochastic_and_masked((q, k, wq, wk, wv) in instance()) {
        for mode in [ClockMode::Normalized, ClockMode::Unnormalized] {
            let p = AttentionParams::new(wq.clone(), wk.clone(), wv.clone()).with_mode(mode);
            let r = sca_forward(&q, &k, &k, &p, None).unwrap();
            check_weights(&r.weights, q.mask(), k.mask())?;
        }
        let r = sdpa_forward(&q, &k, &k, &AttentionParams::new(wq, wk, wv), None).unwrap();
        check_weights(&r.weights, q.mask(), k.mask())?;
    }

    #[test]
    fn score_is_non_positive_and_zero_at_exact_meetings((q, k, _, _, _) in instance()) {
        // A key sequence against itself meets on the whole diagonal.
        for (q, mode) in [(&q, ClockMode::Normalized), (&q, ClockMode::Unnormalized), (&k, ClockMode::Normalized)] {
            let s = clock_diff_score(q, &k, mode, DEFAULT_EPS).unwrap();
            let cq = build_clock(q, mode, DEFAULT_EPS).unwrap();
            let ck = build_clock(&k, mode, DEFAULT_EPS).unwrap();
            let d2 = pairwise_sqdist(&cq.lambda, &ck.lambda).unwrap();
            for i in 0..q.valid_len() {
                let row = &s.logits.row(i)[..k.valid_len()];
                prop_assert!(row.iter().all(|&x| x <= 0.0));
                // Σ² varies along a row, so the argmax is pinned only where
                // some key meets the query clock exactly.
                if let Some(j) = (0..row.len()).find(|&j| d2[(i, j)] == 0.0) {
                    prop_assert_eq!(row[j], 0.0);
                    prop_assert!(row.iter().all(|&x| x <= row[j]));
                }
            }
        }
    }

    #[test]
    fn causal_steps_match_the_full_pass((q, k, wq, wk, wv) in instance()) {
        let l = q.valid_len();
        let limits: Vec<usize> = (0..l).map(|i| (i + 1).min(k.valid_len())).collect();
        let q = q.prefix(l).unwrap();
        let allow = causal_allow_mask(l, k.len(), &limits).unwrap();
        let p = AttentionParams::new(wq, wk, wv).with_mode(ClockMode::Unnormalized).with_causal(true);
        let full = sca_forward(&q, &k, &k, &p, Some(&allow)).unwrap();
        for step in 0..l {
            let qs = q.prefix(step + 1).unwrap();
            let a = causal_allow_mask(step + 1, k.len(), &limits[..=step]).unwrap();
            let part = sca_forward(&qs, &k, &k, &p, Some(&a)).unwrap();
            for (x, y) in part.weights.row(step).iter().zip(full.weights.row(step)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn graph_forward_equals_the_plain_forward((q, k, wq, wk, wv) in instance(), heads in 1usize..3) {
        let d = wq.cols();
        prop_assume!(d % heads == 0);
        for mode in [ClockMode::Normalized, ClockMode::Unnormalized] {
            let p = AttentionParams::new(wq.clone(), wk.clone(), wv.clone()).with_mode(mode).with_heads(heads);
            let plain = sca_forward(&q, &k, &k, &p, None).unwrap();
            let mut tape = Tape::new();
            let (qv, kv) = (tape.leaf(q.values().clone()), tape.leaf(k.values().clone()));
            let w = AttentionVars {
                wq: tape.leaf(wq.clone()),
                wk: tape.leaf(wk.clone()),
                wv: tape.leaf(wv.clone()),
                logit_scale: None,
            };
            let g = sca_attention(
                &mut tape,
                GraphSeq::new(qv, q.mask()),
                GraphSeq::new(kv, k.mask()),
                GraphSeq::new(kv, k.mask()),
                &w,
                &AttentionConfig::of(&p),
                None,
            )
            .unwrap();
            prop_assert!(tape.value(g.context).max_abs_diff(&plain.context) <= 1e-12);
            for (h, node) in g.head_weights.iter().enumerate() {
                prop_assert!(tape.value(*node).max_abs_diff(&plain.head_weights[h]) <= 1e-12);
            }
        }
    }
}

#[test]
fn equal_constant_rates_align_on_the_identity() {
    for len in 2..30 {
        let x = MaskedSeq::full(Matrix::filled(len, 2, 0.3)).unwrap();
        let s = clock_diff_score(&x, &x, ClockMode::Normalized, DEFAULT_EPS).unwrap();
        for i in 0..len {
            let row = s.logits.row(i);
            let best = (0..len).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, i);
        }
    }
}

#[test]
fn normalized_clocks_reject_causal_masks() {
    let x = MaskedSeq::full(Matrix::filled(3, 1, 1.0)).unwrap();
    let p = AttentionParams::new(Matrix::identity(1), Matrix::identity(1), Matrix::identity(1));
    let allow = causal_allow_mask(3, 3, &[1, 2, 3]).unwrap();
    assert!(sca_forward(&x, &x, &x, &p, Some(&allow)).is_err());
    assert!(sca_forward(&x, &x, &x, &p.clone().with_mode(ClockMode::Unnormalized), Some(&allow)).is_ok());
}
