//! End-to-end runs of the `transdod` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use transdod_core::data::{read_manifest, Split};

const MICRO_CONFIG: &str = r#"{
  "schema_version": 1,
  "model": {
    "num_tasks": 7,
    "backbone": {"stage_channels": [4, 8]},
    "transformer": {"d": 12, "heads": 2, "enc_layers": 1, "dec_layers": 1, "levels": 2, "points": 2}
  },
  "train": {"max_epoch": 3, "steps_per_epoch": 1, "batch_size": 1, "patch": [8, 16, 16], "window": [16, 16, 16]}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transdod"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generated data plus a checkpoint trained for a few steps.
struct Trained {
    dir: TempDir,
}

impl Trained {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let cfg = dir.path().join("cfg.json");
        fs::write(&cfg, MICRO_CONFIG).unwrap();
        let data = dir.path().join("data");
        ok(&[
            "gen",
            "--out",
            s(&data),
            "--cases-per-task",
            "2",
            "--shape",
            "16,24,24",
            "--seed",
            "3",
        ]);
        ok(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&data.join("manifest.json")),
            "--out",
            s(&dir.path().join("run")),
        ]);
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

#[test]
fn gen_writes_every_task_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "gen",
            "--out",
            s(out),
            "--cases-per-task",
            "2",
            "--shape",
            "16,16,16",
            "--seed",
            "5",
        ]);
    }
    let subdirs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(subdirs, 7);
    for e in read_manifest(&a.join("manifest.json")).unwrap() {
        assert_eq!(fs::read(a.join(&e.path)).unwrap(), fs::read(b.join(&e.path)).unwrap());
    }
    assert!(a.join("run.json").exists());
}

#[test]
fn gen_task_subset_keeps_registry_flags() {
    let dir = TempDir::new().unwrap();
    ok(&[
        "gen",
        "--out",
        s(dir.path()),
        "--tasks",
        "4,6",
        "--cases-per-task",
        "3",
        "--shape",
        "16,16,16",
    ]);
    let m = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.len(), 6);
    assert!(m.iter().all(|e| e.task_id == 4 || e.task_id == 6));
    assert_eq!(m.iter().filter(|e| e.split == Split::Val).count(), 2);
    for e in &m {
        let case = transdod_core::data::read_volume(&dir.path().join(&e.path)).unwrap();
        match e.task_id {
            4 => assert!(!case.labels.contains(&1)),
            _ => assert!(!case.labels.contains(&2)),
        }
    }
}

#[test]
fn eval_of_identical_masks_is_perfect() {
    let dir = TempDir::new().unwrap();
    ok(&[
        "gen",
        "--out",
        s(dir.path()),
        "--tasks",
        "0",
        "--cases-per-task",
        "2",
        "--shape",
        "16,16,16",
    ]);
    let v = dir.path().join("0_liver/case000.vol");
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--pred", s(&v), "--gt", s(&v)])).unwrap();
    for k in ["organ", "tumor"] {
        assert_eq!(report[k]["dice"], 1.0);
        assert_eq!(report[k]["hausdorff"], 0.0);
    }
}

#[test]
fn paramcount_is_pure() {
    let a = ok(&["paramcount"]);
    assert_eq!(a, ok(&["paramcount"]));
    assert!(a.lines().next().unwrap().trim_end().ends_with(" 162"));
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema_version": 1, "train": {"lr": 0.1}}"#).unwrap();
    let out = run(&["paramcount", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `lr`"));
    fs::write(&bad, r#"{"schema_version": 9}"#).unwrap();
    assert_eq!(run(&["paramcount", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(
        run(&["eval", "--pred", "/nonexistent/a", "--gt", "/nonexistent/b"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(run(&["gen"]).status.code(), Some(2));
}

#[test]
fn trained_model_round_trip() {
    let t = Trained::new();
    let ckpt = t.path("run/model.ckpt");
    for f in ["run/model.ckpt", "run/log.csv", "run/run.json"] {
        assert!(t.path(f).exists(), "{f}");
    }

    // Colon annotates only tumors, so its organ channel is reported unavailable.
    let volume = t.path("data/4_colon/case001.vol");
    ok(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--volume",
        s(&volume),
        "--task",
        "4",
        "--out",
        s(&t.path("one")),
    ]);
    let pred = t.path("one/task4.vol");
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred", s(&pred), "--gt", s(&volume)])).unwrap();
    assert!(report["organ"].is_null());
    assert!(report["tumor"]["dice"].is_number());
    assert_eq!(report["unavailable"], serde_json::json!(["organ"]));

    let other = t.path("other.json");
    fs::write(&other, MICRO_CONFIG.replace(r#""points": 2"#, r#""points": 3"#)).unwrap();
    let out = run(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--volume",
        s(&volume),
        "--task",
        "0",
        "--out",
        s(&t.path("x")),
        "--config",
        s(&other),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("transformer.points"));

    let resumed = run(&[
        "train",
        "--config",
        s(&other),
        "--data",
        s(&t.path("data/manifest.json")),
        "--out",
        s(&t.path("r")),
        "--resume",
        s(&ckpt),
    ]);
    assert_eq!(resumed.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_the_micro_config() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(out.contains("micro_model"));
    assert!(!out.contains("FAIL"));
}
