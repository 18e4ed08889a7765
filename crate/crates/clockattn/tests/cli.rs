use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clockattn::cli::{ExperimentConfig, McSummary, RESOLVED_CONFIG};
use clockattn::io;
use clockattn::toytask::{argmax_path, ModelConfig, TaskShape, ToyModel, Variant};
use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clockattn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, v: &Value) -> String {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

/// Seconds-scale training configuration.
fn tiny() -> Value {
    json!({
        "seeds": [3],
        "dataset": {"n_instances": 40, "vocab": 6, "features": 3},
        "model": {"d_model": 8, "ffn_dim": 8},
        "train": {"steps": 12, "log_every": 4, "eval_instances": 6},
        "sweep": {"eval_instances": 5}
    })
}

#[test]
fn selftest_passes_filters_and_catches_the_eps_fault() {
    let ok = run(&["selftest", "--instances", "50"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("PASS  attention.reduction"));

    let clocks = run(&["selftest", "--filter", "clocks", "--instances", "50"]);
    assert_eq!(clocks.status.code(), Some(0));
    let text = stdout(&clocks);
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l.contains("clocks.")), "{lines:?}");

    let fault = run(&["selftest", "--clock-eps", "0", "--instances", "200"]);
    assert_eq!(fault.status.code(), Some(1));
    assert!(stderr(&fault).contains("clocks.monotonicity"), "{}", stderr(&fault));

    assert_eq!(run(&["selftest", "--filter", "no-such-suite"]).status.code(), Some(2));
}

#[test]
fn gradcheck_reports_each_case() {
    let o = run(&["gradcheck", "--filter", "phi"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS  phi"));
}

#[test]
fn mc_validate_writes_a_summary_and_guards_small_runs() {
    let dir = tempfile::tempdir().unwrap();
    let small = |extra: Value| {
        let mut mc = json!({"grid_len": 24, "n_samples": 4000, "bridge_samples": 4000});
        mc.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
        json!({ "mc": mc })
    };

    let out = dir.path().join("mc");
    let cfg = write(&dir.path().join("mc.json"), &small(json!({})));
    let o = run(&["mc-validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let raw: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for key in ["max_rel_err", "R2_bridge", "c_ratio", "R2_linear", "pass"] {
        assert!(raw.get(key).is_some(), "missing {key}");
    }
    assert_eq!(raw["pass"], json!(true));
    let summary: McSummary = io::read_json(&out.join("summary.json")).unwrap();
    assert_eq!(serde_json::to_value(&summary).unwrap(), raw);
    let density = io::read_matrix_csv(&out.join("density_normalized.csv")).unwrap();
    assert_eq!(density.shape(), (24, 24));
    let resolved: ExperimentConfig = io::read_json(&out.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.mc.grid_len, 24);

    let out = dir.path().join("noiseless");
    let cfg = write(&dir.path().join("s0.json"), &small(json!({"kernel": {"type": "white", "sigma": 0.0}})));
    let o = run(&["mc-validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let s: McSummary = io::read_json(&out.join("summary.json")).unwrap();
    assert!(s.deterministic && s.max_rel_err < 1e-9);

    let out = dir.path().join("few");
    let cfg = write(&dir.path().join("few.json"), &small(json!({"n_samples": 10, "bridge_samples": 10})));
    let o = run(&["mc-validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("insufficient samples"));
    let raw: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(raw["pass"], Value::Null);
}

#[test]
fn train_is_byte_reproducible_and_writes_its_config_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("tiny.json"), &tiny());
    let csvs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(&["train", "--config", &cfg, "--variant", "sdpa", "--out", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
            let resolved: ExperimentConfig = io::read_json(&out.join(RESOLVED_CONFIG)).unwrap();
            assert_eq!(resolved.variant, Variant::Sdpa);
            assert!(out.join("seed_3/model.ckpt").exists());
            fs::read(out.join("seed_3/metrics.csv")).unwrap()
        })
        .collect();
    assert_eq!(csvs[0], csvs[1]);
    let (header, rows) = io::read_table_csv(&dir.path().join("a/seed_3/metrics.csv")).unwrap();
    assert_eq!(header[0], "step");
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.0, 4.0, 8.0, 11.0]);
}

#[test]
fn sweep_writes_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("tiny.json"), &tiny());
    let trained = dir.path().join("t");
    assert_eq!(run(&["train", "--config", &cfg, "--out", trained.to_str().unwrap()]).status.code(), Some(0));
    let ckpt = trained.join("seed_3/model.ckpt");
    let out = dir.path().join("s");
    let o = run(&[
        "sweep", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(),
        "--ratios", "0.5,1.0,2.0", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = io::read_table_csv(&out.join("sweep.csv")).unwrap();
    assert_eq!(header, ["ratio", "l1", "diagonality", "coverage", "violations"]);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [0.5, 1.0, 2.0]);

    let o = run(&["sweep", "--config", &cfg, "--variant", "sca-unnorm", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn align_exports_the_synthetic_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("tiny.json"), &tiny());
    // Zero query and key projections give constant time-normalized
    // features, hence uniform clocks that meet on the diagonal; a large
    // scale makes the peak sharp.
    let shape = TaskShape { vocab: 6, features: 3 };
    let mut model = ToyModel::new(Variant::ScaNorm, ModelConfig { d_model: 8, ffn_dim: 8, ..ModelConfig::default() }, shape).unwrap();
    let names = model.param_names();
    for (p, name) in model.params.iter_mut().zip(&names) {
        match *name {
            "x_wq" | "x_wk" => p.data_mut().fill(0.0),
            "logit_scale" => p.data_mut().fill(50.0),
            _ => {}
        }
    }
    let ckpt = dir.path().join("diag.ckpt");
    io::save_checkpoint(&ckpt, &model).unwrap();

    let out = dir.path().join("align");
    let o = run(&[
        "align", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(),
        "--tokens", "0,1,2,3,4,5,0,1", "--frames", "8", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (w, h, px) = io::read_pgm(&out.join("weights.pgm")).unwrap();
    assert_eq!((w, h), (8, 8));
    for i in 0..8 {
        let row = &px[i * 8..(i + 1) * 8];
        assert_eq!(row[i], 255);
        assert!(row.iter().enumerate().all(|(j, &v)| j == i || v < 255), "row {i}: {row:?}");
    }
    let weights = io::read_matrix_csv(&out.join("weights.csv")).unwrap();
    assert_eq!(argmax_path(&weights), (0..8).collect::<Vec<_>>());

    let o = run(&["align", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["decoding"], "parallel");
    assert!(summary["metrics"]["diagonality"].as_f64().is_some());
}

#[test]
fn config_and_checkpoint_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let unknown = write(&dir.path().join("bad.json"), &json!({"trian": {}}));
    assert_eq!(run(&["train", "--config", &unknown, "--out", out]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "/no/such/file.json"]).status.code(), Some(2));

    let cfg = write(&dir.path().join("tiny.json"), &tiny());
    let missing = run(&["align", "--config", &cfg, "--checkpoint", "/no/such.ckpt", "--out", out]);
    assert_eq!(missing.status.code(), Some(2));

    let model = ToyModel::new(Variant::Sdpa, ModelConfig { d_model: 8, ffn_dim: 8, ..ModelConfig::default() }, TaskShape { vocab: 9, features: 3 }).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    io::save_checkpoint(&ckpt, &model).unwrap();
    let mismatch = run(&["align", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--out", out]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(stderr(&mismatch).contains("shape"));

    let threads = Command::new(env!("CARGO_BIN_EXE_clockattn"))
        .args(["gradcheck", "--filter", "phi"])
        .env("CLOCKATTN_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(2));
}
