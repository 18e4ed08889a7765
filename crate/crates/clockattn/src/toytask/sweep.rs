use clockattn_core::Matrix;
use serde::{Deserialize, Serialize};

use super::data::AlignmentInstance;
use super::metrics::{compute_metrics, rescale_path, Metrics};
use super::model::ToyModel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Frames per source token requested at decode time.
    pub ratio: f64,
    pub metrics: Metrics,
}

/// Decodes every instance at `T' = round(r N)` frames for each ratio `r`
/// and scores the attention against the linearly rescaled reference path.
///
/// `l1` compares against the target resampled the same way, so it measures
/// content at the new pace rather than frame-exact agreement.
pub fn length_sweep(
    model: &ToyModel,
    instances: &[AlignmentInstance],
    ratios: &[f64],
    window: usize,
) -> Result<Vec<SweepPoint>> {
    if model.variant.is_autoregressive() {
        return Err(Error::Config("length sweeps need a parallel decoder".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("ratio {r} must be positive")));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let mut all = Vec::with_capacity(instances.len());
            for inst in instances {
                let n = inst.source_len();
                let len = ((ratio * n as f64).round() as usize).max(1);
                let (pred, weights) = model.decode_parallel(&inst.source_tokens, len)?;
                let reference = rescale_path(&inst.gt_path, len);
                let target = resample_rows(&inst.target, len);
                let l1 = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / pred.data().len() as f64;
                all.push(compute_metrics(&weights, &reference, window).with_l1(l1));
            }
            Ok(SweepPoint {
                ratio,
                metrics: Metrics::mean(&all),
            })
        })
        .collect()
}

/// Nearest-centre resampling of frames to `len` rows.
fn resample_rows(x: &Matrix, len: usize) -> Matrix {
    let t = x.rows();
    Matrix::from_fn(len, x.cols(), |i, c| {
        let src = ((i as f64 + 0.5) * t as f64 / len as f64) as usize;
        x[(src.min(t - 1), c)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytask::data::{generate_dataset, DatasetConfig};
    use crate::toytask::model::{ModelConfig, TaskShape, Variant};

    #[test]
    fn sweep_reports_one_point_per_ratio() {
        let ds = generate_dataset(&DatasetConfig {
            n_instances: 5,
            ..DatasetConfig::default()
        })
        .unwrap();
        let shape = TaskShape { vocab: 20, features: 8 };
        let cfg = ModelConfig {
            d_model: 8,
            ffn_dim: 8,
            ..ModelConfig::default()
        };
        let model = ToyModel::new(Variant::ScaNorm, cfg.clone(), shape).unwrap();
        let pts = length_sweep(&model, &ds.instances, &[0.5, 1.0, 2.0], 2).unwrap();
        assert_eq!(pts.len(), 3);
        for p in &pts {
            assert!((0.0..=1.0).contains(&p.metrics.diagonality));
            assert!(p.metrics.coverage > 0.0 && p.metrics.l1.is_finite());
        }
        assert!(length_sweep(&model, &ds.instances, &[0.0], 2).is_err());
        let ar = ToyModel::new(Variant::ScaUnnorm, cfg, shape).unwrap();
        assert!(length_sweep(&ar, &ds.instances, &[1.0], 2).is_err());
    }

    #[test]
    fn resampling_to_own_length_is_identity() {
        let x = Matrix::from_fn(7, 2, |r, c| (r * 2 + c) as f64);
        assert_eq!(resample_rows(&x, 7), x);
        assert_eq!(resample_rows(&x, 14).row(13), x.row(6));
    }
}
