use std::path::Path;
use std::process::{Command, Output};

use icscope::barsdata::BarsParams;
use icscope::netcore::{Head, Network};

fn icscope(args: &[&str]) -> Output {
    icscope_in(Path::new("."), args)
}

fn icscope_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icscope"))
        .current_dir(cwd)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_model(dir: &Path) -> String {
    let net = Network::<f64>::init(BarsParams::default().input_dim(), &[8, 6], Head::Sigmoid, 2, 0.0, 5).unwrap();
    let path = dir.join("net.json");
    net.save(&path).unwrap();
    path.display().to_string()
}

#[test]
fn generate_data_writes_manifest_and_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = icscope(&["generate-data", "--n", "12", "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
    let bytes = std::fs::metadata(out.join("sample_000000.f32")).unwrap().len();
    assert_eq!(bytes as usize, 4 * BarsParams::default().input_dim());
}

#[test]
fn config_errors_exit_with_code_2() {
    let o = icscope(&["run-preset", "mcs-table", "--set", "layers=[7]"]);
    assert_eq!(o.status.code(), Some(2));
    let o = icscope(&["run-preset", "mcs-table", "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_preset_is_rejected() {
    let o = icscope(&["run-preset", "everything"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
}

#[test]
fn cavs_attribute_and_global_chain() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let cavs = dir.path().join("cavs.json");
    let data = dir.path().join("data");
    let o = icscope(&[
        "train-cavs",
        "--model",
        &model,
        "--layer",
        "1",
        "--concept",
        "orientation",
        "--B",
        "2",
        "--n-perm",
        "2",
        "--n",
        "120",
        "--out",
        cavs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["cavs"], 6);

    assert!(icscope(&["generate-data", "--n", "5", "--out", data.to_str().unwrap()])
        .status
        .success());
    let csv = dir.path().join("attr.csv");
    let o = icscope(&[
        "attribute",
        "--model",
        &model,
        "--cavs",
        cavs.to_str().unwrap(),
        "--samples",
        data.to_str().unwrap(),
        "--baseline",
        "concept_forgetting",
        "--lambda",
        "0.5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 5);

    let o = icscope(&[
        "attribute",
        "--model",
        &model,
        "--cavs",
        cavs.to_str().unwrap(),
        "--samples",
        data.to_str().unwrap(),
        "--lambda",
        "0.5",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "lambda without forgetting baseline");

    let o = icscope(&[
        "global",
        "--model",
        &model,
        "--cavs",
        cavs.to_str().unwrap(),
        "--n",
        "40",
        "--method",
        "sign_cs",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let median = g["tcav_median"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&median));
}

#[test]
fn report_rejects_a_missing_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = icscope(&["report", dir.path().join("nope").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn run_preset_is_reproducible_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    let tiny = serde_json::json!({
        "dataset": {"n_train": 200, "n_test": 80, "n_pool": 80},
        "models": {
            "orientation": {"hidden": [10, 6], "epochs": 1},
            "color": {"hidden": [10, 6], "epochs": 1}
        },
        "layers": [0, 1],
        "nd": {"layer": 1},
        "local_examples": {"layer": 1},
        "influence": {"n_samples": 40}
    });
    std::fs::write(&config, tiny.to_string()).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = icscope_in(
            dir.path(),
            &["run-preset", "influence", "--config", "tiny.json", "--output-dir", "runs"],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        // same configured output_dir for both runs, so the config hash agrees; move the result aside
        std::fs::rename(dir.path().join("runs/influence"), &out).unwrap();
        outputs.push(out);
    }
    for name in ["influence.csv", "report.json", "manifest.json"] {
        let a = std::fs::read(outputs[0].join(name)).unwrap();
        let b = std::fs::read(outputs[1].join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    let o = icscope(&["report", outputs[0].to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[influence]"));
}
