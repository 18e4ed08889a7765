use clockattn_core::Matrix;
use serde::{Deserialize, Serialize};

/// Default half-width of the diagonality window, in source tokens.
pub const DEFAULT_WINDOW: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute error on target features; 0 when no prediction was scored.
    pub l1: f64,
    pub diagonality: f64,
    pub monotonicity_violations: usize,
    /// Mean `|argmax(t) - gt(t)|`, in source positions.
    pub path_mae: f64,
    /// Fraction of source tokens that are the row argmax of some frame.
    pub coverage: f64,
}

impl Metrics {
    pub fn with_l1(self, l1: f64) -> Self {
        Self { l1, ..self }
    }

    /// Componentwise mean; violations are summed.
    pub fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Metrics {
            l1: avg(|m| m.l1),
            diagonality: avg(|m| m.diagonality),
            monotonicity_violations: all.iter().map(|m| m.monotonicity_violations).sum(),
            path_mae: avg(|m| m.path_mae),
            coverage: avg(|m| m.coverage),
        }
    }
}

/// First maximum of each row.
pub fn argmax_path(weights: &Matrix) -> Vec<usize> {
    (0..weights.rows())
        .map(|t| {
            let row = weights.row(t);
            let mut best = 0;
            for (j, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Alignment quality of `weights` `[T × N]` against `gt_path`; `l1` is left 0.
pub fn compute_metrics(weights: &Matrix, gt_path: &[usize], window: usize) -> Metrics {
    let (t_len, n) = (weights.rows(), weights.cols());
    assert_eq!(t_len, gt_path.len(), "one reference index per weight row");
    if t_len == 0 || n == 0 {
        return Metrics::default();
    }
    let path = argmax_path(weights);
    let diagonality = gt_path
        .iter()
        .enumerate()
        .map(|(t, &g)| {
            let lo = g.saturating_sub(window);
            let hi = (g + window).min(n - 1);
            weights.row(t)[lo..=hi].iter().sum::<f64>()
        })
        .sum::<f64>()
        / t_len as f64;
    let monotonicity_violations = path.windows(2).filter(|w| w[1] < w[0]).count();
    let path_mae = path
        .iter()
        .zip(gt_path)
        .map(|(&a, &g)| a.abs_diff(g) as f64)
        .sum::<f64>()
        / t_len as f64;
    let mut hit = vec![false; n];
    for &j in &path {
        hit[j] = true;
    }
    let coverage = hit.iter().filter(|&&h| h).count() as f64 / n as f64;
    Metrics {
        l1: 0.0,
        diagonality,
        monotonicity_violations,
        path_mae,
        coverage,
    }
}

/// Reference path at a new length: frame `t'` of `new_len` maps to the
/// original frame containing its centre.
pub fn rescale_path(gt_path: &[usize], new_len: usize) -> Vec<usize> {
    let t = gt_path.len();
    (0..new_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * t as f64 / new_len as f64) as usize;
            gt_path[src.min(t - 1)]
        })
        .collect()
}
