use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 3,
  "sizes": {"annotated": 60, "unannotated": 60, "validation": 50, "test": 50},
  "edge": {
    "transformer": {"embed": 12, "hidden": 12, "layers": 1, "heads": 2},
    "bilstm": {"embed": 12, "hidden": 12, "layers": 1},
    "cnn": {"embed": 12, "hidden": 12, "layers": 1}
  },
  "vocab": {"edge": 150, "shared": 300},
  "pivot": {"sizes": [16, 24], "layers": 1, "heads": 2, "mlm": {"steps": 10}},
  "training": {
    "source": {"epochs": 3, "lr": {"fixed": 0.01}},
    "kd1": {"epochs": 2, "lr": {"fixed": 0.01}},
    "kd2": {"epochs": 2, "lr": {"fixed": 0.01}},
    "pseudo": {"epochs": 2, "lr": {"fixed": 0.01}}
  }
}"#;

fn xlkd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlkd"))
        .arg("--out")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = xlkd(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> (TempDir, String) {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    (d, cfg)
}

#[test]
fn every_command_runs_end_to_end() {
    let (d, cfg) = setup();
    let listing = ok(d.path(), &["--config", &cfg, "gen-data"]);
    assert_eq!(listing.lines().count(), 16);
    ok(d.path(), &["train-source"]);
    ok(d.path(), &["pipeline"]);
    ok(d.path(), &["pipeline", "--pivot-size", "24"]);
    ok(d.path(), &["pipeline", "--balanced", "--augment"]);
    let tt = xlkd(d.path(), &["baseline", "translate-test"]);
    assert!(tt.status.success());
    let gate = String::from_utf8_lossy(&tt.stderr);
    assert!(gate.contains("label reads xa/test"), "{gate}");
    ok(d.path(), &["baseline", "translate-train-pseudo"]);
    let pipe = xlkd(d.path(), &["pipeline"]);
    for line in String::from_utf8_lossy(&pipe.stderr).lines() {
        if line.contains("/unannotated") {
            assert!(line.contains("successful 0"), "{line}");
        }
    }
    ok(d.path(), &["reference", "gold-supervised"]);
    let md = ok(d.path(), &["report"]);
    assert!(md.contains("Off-the-shelf source (transformer)"));
    assert!(md.contains("+ Data augmentation"));
    assert!(md.contains("Gold-supervised target"));
    assert!(md.contains("Δ avg"));

    let run = d.path().join("run");
    let first = fs::read(run.join("report.json")).unwrap();
    ok(d.path(), &["report"]);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), first);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["artifacts"]["report.md"].is_string());

    let model = run.join("models/source-sentence-transformer.json");
    let score: f64 = ok(d.path(), &["eval", "--model", model.to_str().unwrap(), "--lang", "en"]).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&score));
}

#[test]
fn word_task_and_grid() {
    let (d, cfg) = setup();
    ok(d.path(), &["--config", &cfg, "gen-data"]);
    for a in ["transformer", "bilstm", "cnn"] {
        ok(d.path(), &["train-source", "--task", "word", "--arch", a]);
    }
    let rows: serde_json::Value = serde_json::from_str(&ok(d.path(), &["pipeline", "--task", "word", "--grid"])).unwrap();
    // Three pivots plus nine target rows.
    assert_eq!(rows.as_array().unwrap().len(), 12);
    let csv = fs::read_dir(d.path().join("run/grids")).unwrap().count();
    assert_eq!(csv, 1);
    ok(d.path(), &["report"]);
    let out = xlkd(d.path(), &["pipeline", "--task", "word", "--balanced"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("balanced"));
}

#[test]
fn schema_errors_exit_nonzero() {
    let d = TempDir::new().unwrap();
    let bad = d.path().join("bad.json");
    fs::write(&bad, r#"{"sizes": {"annotated": 60, "unannotated": 60, "validation": 50, "tset": 50}}"#).unwrap();
    let out = xlkd(d.path(), &["--config", bad.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tset"));
}

#[test]
fn missing_inputs_exit_nonzero() {
    let (d, cfg) = setup();
    let out = xlkd(d.path(), &["--config", &cfg, "train-source"]);
    assert_eq!(out.status.code(), Some(1));
    let out = xlkd(d.path(), &["--config", &cfg, "report"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_finite_loss_exits_nonzero() {
    let (d, cfg) = setup();
    ok(d.path(), &["--config", &cfg, "gen-data"]);
    let mut v: serde_json::Value = serde_json::from_str(TINY).unwrap();
    v["training"]["source"]["lr"] = serde_json::json!({"fixed": 1e30});
    v["training"]["source"]["clip_norm"] = serde_json::Value::Null;
    let hot = d.path().join("hot.json");
    fs::write(&hot, v.to_string()).unwrap();
    let out = xlkd(d.path(), &["--config", hot.to_str().unwrap(), "train-source"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&out.stderr));
}
