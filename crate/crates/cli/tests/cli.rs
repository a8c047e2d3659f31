use std::path::Path;
use std::process::{Command, Output};

fn tierscale(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tierscale"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, json: &str) {
    std::fs::write(dir.join(name), json).unwrap();
}

const SMALL: &str = r#"{
    "collect": {"episodes": 4, "collector": {"episode_len": 120}},
    "train": {"hyper": {"cnn": {"epochs": 3}, "bt": {"rounds": 20}}},
    "workload": {"duration": 40},
    "seeds": [1, 2]
}"#;

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, "exp.json", SMALL);

    let out = tierscale(d, &["collect", "--config", "exp.json", "--out", "data"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["dataset.bin", "audit.csv", "collect.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }

    let out = tierscale(
        d,
        &[
            "train",
            "--config",
            "exp.json",
            "--dataset",
            "data/dataset.bin",
            "--out",
            "model",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("model/metrics.json")).unwrap()).unwrap();
    assert_eq!(
        metrics["train_samples"].as_u64().unwrap() + metrics["test_samples"].as_u64().unwrap(),
        480
    );
    assert!(metrics["cnn_test_rmse"].as_f64().unwrap().is_finite());
    assert!(metrics["classifier_test"]["accuracy"].as_f64().is_some());

    for policy in ["as_cons", "sinan"] {
        let out = tierscale(
            d,
            &[
                "run",
                "--config",
                "exp.json",
                "--policy",
                policy,
                "--model",
                "model/model.json",
                "--out",
                "runs",
            ],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        for seed in [1, 2] {
            assert!(d.join(format!("runs/decisions_{policy}_{seed}.csv")).exists());
            assert!(d.join(format!("runs/summary_{policy}_{seed}.json")).exists());
        }
    }
    let log = std::fs::read_to_string(d.join("runs/decisions_sinan_1.csv")).unwrap();
    assert_eq!(log.lines().count(), 41);

    let out = tierscale(
        d,
        &[
            "compare",
            "runs/summary_as_cons_1.json",
            "runs/summary_as_cons_2.json",
            "runs/summary_sinan_1.json",
            "runs/summary_sinan_2.json",
            "--out",
            "cmp",
        ],
    );
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("as_cons,2,") && rows[1].ends_with(",1,1"));
    assert!(rows[2].starts_with("sinan,2,"));

    let out = tierscale(
        d,
        &[
            "explain",
            "--model",
            "model/model.json",
            "--dataset",
            "data/dataset.bin",
            "--episode",
            "1",
            "--interval",
            "60",
            "--out",
            "ex",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let top = String::from_utf8(out.stdout).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ex/explain.json")).unwrap()).unwrap();
    assert!(!top.trim().is_empty());
    assert!(report.to_string().contains(top.trim()));
    assert!(d.join("ex/explain.txt").exists());
}

#[test]
fn collection_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(
        d,
        "exp.json",
        r#"{"collect": {"episodes": 2, "collector": {"episode_len": 60}}}"#,
    );
    let digest = |out: &str, seed: &str| {
        let o = tierscale(d, &["collect", "--config", "exp.json", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(out).join("collect.json")).unwrap()).unwrap();
        report["sha256"].as_str().unwrap().to_string()
    };
    let a = digest("a", "5");
    assert_eq!(a, digest("b", "5"));
    assert_ne!(a, digest("c", "6"));
}

#[test]
fn missing_graph_exits_with_code_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.json", r#"{"graph": "nowhere/graph.json"}"#);
    let out = tierscale(dir.path(), &["collect", "--config", "exp.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph.json"));
}

#[test]
fn malformed_or_unknown_config_fields_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "typo.json", r#"{"sedes": [1]}"#);
    write_config(dir.path(), "broken.json", "{");
    for cfg in ["typo.json", "broken.json"] {
        assert_eq!(
            code(&tierscale(dir.path(), &["run", "--config", cfg, "--policy", "as_cons"])),
            2
        );
    }
}

#[test]
fn bad_inputs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&tierscale(d, &["compare", "missing.json"])), 2);
    assert_eq!(code(&tierscale(d, &["run", "--policy", "bogus"])), 2);
    assert_eq!(
        code(&tierscale(d, &["run", "--policy", "sinan", "--model", "missing.json"])),
        2
    );
    assert_eq!(code(&tierscale(d, &["train", "--dataset", "missing.bin"])), 2);

    write_config(
        d,
        "exp.json",
        r#"{"collect": {"episodes": 1, "collector": {"episode_len": 40}}}"#,
    );
    assert_eq!(
        code(&tierscale(d, &["collect", "--config", "exp.json", "--out", "data"])),
        0
    );
    let out = tierscale(
        d,
        &[
            "explain",
            "--model",
            "missing.json",
            "--dataset",
            "data/dataset.bin",
            "--interval",
            "5",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn single_class_training_set_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Far below capacity: no interval violates.
    write_config(
        d,
        "exp.json",
        r#"{"workload": {"peak_qps": 20}, "collect": {"episodes": 2, "collector": {"episode_len": 60}}}"#,
    );
    assert_eq!(
        code(&tierscale(d, &["collect", "--config", "exp.json", "--out", "data"])),
        0
    );
    let out = tierscale(
        d,
        &[
            "train",
            "--config",
            "exp.json",
            "--dataset",
            "data/dataset.bin",
            "--out",
            "m",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(!d.join("m/model.json").exists());
}

#[test]
fn diverging_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(
        d,
        "exp.json",
        r#"{"collect": {"episodes": 4, "collector": {"episode_len": 120}},
            "train": {"hyper": {"cnn": {"epochs": 3, "lr": 1e12, "clip_norm": 0}}}}"#,
    );
    assert_eq!(
        code(&tierscale(d, &["collect", "--config", "exp.json", "--out", "data"])),
        0
    );
    let out = tierscale(
        d,
        &[
            "train",
            "--config",
            "exp.json",
            "--dataset",
            "data/dataset.bin",
            "--out",
            "m",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value.is_object(), "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 5);
    // Unknown keys are rejected, so a dry `run` of a config without a
    // policy fails only on the missing policy.
    let out = tierscale(&dir, &["run", "--config", "diurnal.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no policy"));
}
