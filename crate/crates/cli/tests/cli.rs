use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn clipbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipbench")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A shortened copy of a shipped preset.
fn short_config(dir: &Path, preset: &str, steps: usize) -> PathBuf {
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(configs().join(preset)).unwrap()).unwrap();
    doc["train"]["steps"] = steps.into();
    doc["train"]["eval_every"] = 10.into();
    let path = dir.join(preset);
    fs::write(&path, doc.to_string()).unwrap();
    path
}

#[test]
fn ranges_json_anchor() {
    let o = clipbench(&["ranges", "--delta", "0.07", "--format", "json"]);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((doc["lower"].as_f64().unwrap() - 0.671).abs() < 5e-4);
    assert!((doc["upper"].as_f64().unwrap() - 1.422).abs() < 5e-4);
    assert_eq!(doc["method"], "lambert_w");
}

#[test]
fn ranges_text_and_bad_delta() {
    let o = clipbench(&["ranges", "--delta", "0.07"]);
    assert!(stdout(&o).contains("lower           0.670972"));
    for bad in ["-1", "0", "nan"] {
        assert_eq!(clipbench(&["ranges", "--delta", bad]).status.code(), Some(2), "delta {bad}");
    }
}

#[test]
fn verify_is_deterministic_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let a = clipbench(&["verify", "--which", "t3", "--seed", "4", "--out", out]);
    let b = clipbench(&["verify", "--which", "t3", "--seed", "4"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t3.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
}

#[test]
fn train_twice_gives_identical_bytes_and_report_renders() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), "mixed_kl3.json", 30);
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        let o = clipbench(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "evals.jsonl", "summary.json"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }

    let charts = dir.path().join("charts");
    let o = clipbench(&[
        "report",
        runs[0].to_str().unwrap(),
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        charts.to_str().unwrap(),
        "--smooth-window",
        "5",
    ]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped"));
    let svgs = fs::read_dir(&charts)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, 4);
    assert!(charts.join("summary.txt").exists());
}

#[test]
fn sweep_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("sweep_mixed.json")).unwrap()).unwrap();
    for run in doc["runs"].as_array_mut().unwrap() {
        run["config"]["steps"] = 10.into();
    }
    doc["seeds"] = serde_json::json!([0, 1]);
    let cfg = dir.path().join("sweep.json");
    fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = clipbench(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let n = doc["runs"].as_array().unwrap().len() * 2;
    assert_eq!(summary.as_array().unwrap().len(), n);
}

#[test]
fn bad_configs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    let text = fs::read_to_string(configs().join("bandit_kl3.json")).unwrap().replace("\"steps\"", "\"stpes\"");
    fs::write(&typo, text).unwrap();
    let out = dir.path().join("out");
    for cfg in [typo, dir.path().join("absent.json")] {
        let o = clipbench(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{}", cfg.display());
    }
}

#[test]
fn shipped_presets_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let ok = if text.contains("\"runs\"") {
            clipbench::config::SweepConfigFile::from_json(&text).is_ok()
        } else {
            clipbench::config::RunConfigFile::from_json(&text).is_ok()
        };
        assert!(ok, "{}", path.display());
    }
}
