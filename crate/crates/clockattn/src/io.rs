//! On-disk formats: CSV matrices and metric tables (6 significant digits),
//! binary PGM heatmaps, JSON documents and flat little-endian checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use clockattn_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toytask::{LogRecord, ModelConfig, SweepPoint, TaskShape, ToyModel, Variant};

/// Fixed six-significant-digit rendering, stable across platforms.
pub fn fmt6(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if x.is_finite() {
        format!("{x:.5e}")
    } else {
        format!("{x}")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Row-major matrix, no header.
pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(create(path)?);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|&x| fmt6(x)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("{path:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::Config(format!("{path:?}: ragged rows")));
    }
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Matrix::from_vec(rows.len(), cols, rows.concat())?)
}

/// Table with a header row; every value rendered with [`fmt6`].
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|&x| fmt6(x)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(
            rec?.iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

pub const TRAIN_LOG_HEADER: [&str; 9] = [
    "step",
    "batch_loss",
    "grad_norm",
    "logit_scale",
    "l1",
    "diagonality",
    "violations",
    "path_mae",
    "coverage",
];

pub fn write_train_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let rows: Vec<Vec<f64>> = log
        .iter()
        .map(|r| {
            vec![
                r.step as f64,
                r.batch_loss,
                r.grad_norm,
                r.logit_scale,
                r.eval.l1,
                r.eval.diagonality,
                r.eval.monotonicity_violations as f64,
                r.eval.path_mae,
                r.eval.coverage,
            ]
        })
        .collect();
    write_table_csv(path, &TRAIN_LOG_HEADER, &rows)
}

pub const SWEEP_HEADER: [&str; 5] = ["ratio", "l1", "diagonality", "coverage", "violations"];

pub fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<()> {
    let rows: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            vec![
                p.ratio,
                p.metrics.l1,
                p.metrics.diagonality,
                p.metrics.coverage,
                p.metrics.monotonicity_violations as f64,
            ]
        })
        .collect();
    write_table_csv(path, &SWEEP_HEADER, &rows)
}

/// Binary P5 heatmap; each row maps `[0, row max]` linearly onto `[0, 255]`.
pub fn write_pgm(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "P5\n{} {}\n255\n", m.cols(), m.rows())?;
    w.write_all(&pgm_bytes(m))?;
    w.flush()?;
    Ok(())
}

pub fn pgm_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.rows() * m.cols());
    for i in 0..m.rows() {
        let row = m.row(i);
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        out.extend(row.iter().map(|&x| {
            if max > 0.0 {
                (255.0 * (x.max(0.0) / max)).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    out
}

/// Parses a P5 image into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Config(format!("{path:?}: not a binary PGM"));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(i + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

const CHECKPOINT_FORMAT: &str = "clockattn-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    variant: Variant,
    model: ModelConfig,
    shape: TaskShape,
    tensors: Vec<TensorEntry>,
}

/// Layout: `u64` LE header length, UTF-8 JSON header, then every tensor's
/// entries as `f64` LE in header order, row-major.
pub fn save_checkpoint(path: &Path, model: &ToyModel) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        variant: model.variant,
        model: model.config.clone(),
        shape: model.shape,
        tensors: model
            .param_names()
            .into_iter()
            .zip(&model.params)
            .map(|(name, p)| TensorEntry {
                name: name.into(),
                rows: p.rows(),
                cols: p.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = create(path)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        for x in p.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel> {
    let mut f = File::open(path).map_err(|e| Error::Checkpoint(format!("{path:?}: {e}")))?;
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| Error::Checkpoint("header too large".into()))?;
    if len > 1 << 24 {
        return Err(Error::Checkpoint("header too large".into()));
    }
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let mut model = ToyModel::new(header.variant, header.model, header.shape)?;
    let expected = ToyModel::param_shapes(model.variant, &model.config, model.shape);
    let listed: Vec<(&str, usize, usize)> = header
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.rows, t.cols))
        .collect();
    if listed != expected {
        return Err(Error::Checkpoint("tensor list does not match the model layout".into()));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    let total: usize = expected.iter().map(|(_, r, c)| r * c).sum();
    if rest.len() != total * 8 {
        return Err(Error::Checkpoint(format!("expected {} data bytes, found {}", total * 8, rest.len())));
    }
    let mut values = rest.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    for p in &mut model.params {
        for x in p.data_mut() {
            *x = values.next().expect("length checked");
        }
    }
    Ok(model)
}

/// Loads a checkpoint and checks it was trained for `variant` on data of `shape`.
pub fn load_checkpoint_for(path: &Path, variant: Variant, shape: TaskShape) -> Result<ToyModel> {
    let model = load_checkpoint(path)?;
    if model.variant != variant {
        return Err(Error::Checkpoint(format!("checkpoint is {}, config asks for {variant}", model.variant)));
    }
    if model.shape != shape {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape {:?} does not match config {:?}",
            model.shape, shape
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytask::{Metrics, ModelConfig};

    #[test]
    fn fmt6_has_six_significant_digits() {
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(1.0), "1.00000e0");
        assert_eq!(fmt6(-0.000123456789), "-1.23457e-4");
        assert_eq!(fmt6(123456789.0), "1.23457e8");
    }

    #[test]
    fn matrix_csv_round_trips_to_six_digits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Matrix::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 1.37).sin() * 10f64.powi(c as i32 - 2));
        write_matrix_csv(&path, &m).unwrap();
        let back = read_matrix_csv(&path).unwrap();
        assert_eq!(back.shape(), m.shape());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 5e-6 * a.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let pts = [
            SweepPoint { ratio: 2.0, metrics: Metrics { l1: 0.25, diagonality: 0.9, monotonicity_violations: 3, path_mae: 0.1, coverage: 1.0 } },
            SweepPoint { ratio: 8.0, metrics: Metrics { l1: 0.5, diagonality: 0.75, monotonicity_violations: 0, path_mae: 0.2, coverage: 0.875 } },
        ];
        write_sweep(&path, &pts).unwrap();
        let (header, rows) = read_table_csv(&path).unwrap();
        assert_eq!(header, SWEEP_HEADER);
        assert_eq!(rows, vec![vec![2.0, 0.25, 0.9, 1.0, 3.0], vec![8.0, 0.5, 0.75, 0.875, 0.0]]);
    }

    #[test]
    fn pgm_maps_each_row_to_its_max() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pgm");
        let m = Matrix::from_rows(&[[0.5, 0.25, 0.25], [0.0, 0.0, 0.0], [0.1, 0.2, 0.7]]);
        write_pgm(&path, &m).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (3, 3));
        assert_eq!(px, [255, 128, 128, 0, 0, 0, 36, 73, 255]);
        let raw = fs::read(&path).unwrap();
        assert!(raw.starts_with(b"P5\n3 3\n255\n"));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let shape = TaskShape { vocab: 6, features: 3 };
        let cfg = ModelConfig { d_model: 4, ffn_dim: 6, ..ModelConfig::default() };
        for v in Variant::ALL {
            let m = ToyModel::new(v, cfg.clone(), shape).unwrap();
            save_checkpoint(&path, &m).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap(), m);
            assert!(load_checkpoint_for(&path, v, TaskShape { vocab: 7, features: 3 }).is_err());
        }
        let other = if Variant::ALL[3] == Variant::SdpaAr { Variant::Sdpa } else { Variant::SdpaAr };
        assert!(load_checkpoint_for(&path, other, shape).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = ToyModel::new(Variant::Sdpa, ModelConfig { d_model: 4, ffn_dim: 4, ..ModelConfig::default() }, TaskShape { vocab: 3, features: 2 }).unwrap();
        save_checkpoint(&path, &m).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn json_configs_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"d_model": 8, "dmodel": 4}"#).unwrap();
        assert!(read_json::<ModelConfig>(&path).is_err());
        fs::write(&path, r#"{"d_model": 8}"#).unwrap();
        assert_eq!(read_json::<ModelConfig>(&path).unwrap().d_model, 8);
    }
}
