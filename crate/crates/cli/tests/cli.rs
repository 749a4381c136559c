use std::path::Path;
use std::process::{Command, Output};

fn transpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transpose"))
        .args(args)
        .env("TRANSPOSE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = transpose(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config_path(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn generate_train_infer_explain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    ok(&["gen", "--n", "24", "--seed", "3", "--out", &p("data")]);
    assert!(dir.path().join("data/img_00023.ppm").exists());
    let toy = config_path("toy.json");
    ok(&[
        "train",
        "--config",
        &toy,
        "--data",
        &p("data"),
        "--out",
        &p("run"),
        "--train-count",
        "20",
        "--set",
        "train.epochs=1",
    ]);
    let report = json(&dir.path().join("run/report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);
    assert_eq!(report["train_samples"], 20);
    let model = p("run/model.tpose");
    let image = p("data/img_00021.ppm");

    ok(&[
        "infer",
        "--model",
        &model,
        "--image",
        &image,
        "--out",
        &p("infer"),
    ]);
    let kps = json(&dir.path().join("infer/keypoints.json"));
    let points = kps["keypoints"].as_array().unwrap();
    assert_eq!(points.len(), 4);
    for pt in points {
        let (x, y) = (pt["x"].as_f64().unwrap(), pt["y"].as_f64().unwrap());
        assert!((0.0..48.0).contains(&x) && (0.0..64.0).contains(&y), "{pt}");
    }
    for k in 0..4 {
        let pgm =
            std::fs::read_to_string(dir.path().join(format!("infer/heatmap_{k}.pgm"))).unwrap();
        assert!(pgm.starts_with("P2\n12 16\n"));
    }
    let first = std::fs::read(dir.path().join("infer/keypoints.json")).unwrap();
    ok(&[
        "infer",
        "--model",
        &model,
        "--image",
        &image,
        "--out",
        &p("infer"),
    ]);
    assert_eq!(
        std::fs::read(dir.path().join("infer/keypoints.json")).unwrap(),
        first
    );

    ok(&[
        "explain",
        "--model",
        &model,
        "--image",
        &image,
        "--keypoint",
        "1",
        "--out",
        &p("dep"),
    ]);
    let dep = json(&dir.path().join("dep/report.json"));
    assert_eq!(dep["kind"], "dependency");
    assert_eq!(dep["keypoint_index"], 1);
    assert_eq!(dep["layer_index"], 1);
    assert_eq!(dep["delta"], 0.00075);
    assert!(!dep["area"].as_array().unwrap().is_empty());
    assert!(dir.path().join("dep/report.pgm").exists());

    ok(&[
        "explain",
        "--model",
        &model,
        "--image",
        &image,
        "--delta",
        "1.1",
        "--out",
        &p("empty"),
    ]);
    assert!(json(&dir.path().join("empty/report.json"))["area"]
        .as_array()
        .unwrap()
        .is_empty());
    let csv = std::fs::read_to_string(dir.path().join("empty/report.csv")).unwrap();
    assert_eq!(csv.trim(), "index,row,col,score");

    ok(&[
        "explain",
        "--model",
        &model,
        "--image",
        &image,
        "--mode",
        "affected",
        "--layer",
        "0",
        "--out",
        &p("aff"),
    ]);
    assert_eq!(
        json(&dir.path().join("aff/report.json"))["kind"],
        "affected"
    );

    let out = ok(&[
        "explain",
        "--model",
        &model,
        "--image",
        &image,
        "--mode",
        "strict-grad",
        "--source",
        "5",
        "--out",
        &p("strict"),
    ]);
    assert!(out.contains("max relative error"));
    let strict = json(&dir.path().join("strict/report.json"));
    assert!(strict["max_rel_err"].as_f64().unwrap() < 1e-8);
    assert!(!dir.path().join("strict/report.pgm").exists());

    ok(&["pe-analyze", "--model", &model, "--out", &p("pe")]);
    let sim = std::fs::read_to_string(dir.path().join("pe/similarity.csv")).unwrap();
    assert_eq!(sim.lines().count(), 192);
    assert!(
        std::fs::read_to_string(dir.path().join("pe/similarity.pgm"))
            .unwrap()
            .starts_with("P2\n144 256\n")
    );

    let csv_out = p("res/pck.csv");
    ok(&[
        "eval-res",
        "--model",
        &model,
        "--data",
        &p("data"),
        "--train-count",
        "20",
        "--resolutions",
        "64x48,128x96",
        "--out",
        &csv_out,
    ]);
    let rows = std::fs::read_to_string(&csv_out).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "height,width,pck");
    assert!(lines[1].starts_with("64,48,") && lines[2].starts_with("128,96,"));
}

#[test]
fn count_params_reports_the_reference_model() {
    let out = ok(&["count-params", "--config", &config_path("tp_r_a3.json")]);
    let total: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((total / 5.2e6 - 1.0).abs() < 0.05, "{total}");
    let toy = ok(&["count-params"]);
    assert_eq!(
        toy,
        ok(&["count-params", "--config", &config_path("toy.json")])
    );
}

#[test]
fn bad_flags_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(transpose(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(transpose(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        transpose(&["gen", "--out", "x", "--size", "64"])
            .status
            .code(),
        Some(2)
    );

    let out = transpose(&[
        "infer",
        "--model",
        "/nonexistent/m.tpose",
        "--image",
        "x.ppm",
        "--out",
        "/tmp",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.starts_with("error: ") && err.lines().count() == 1,
        "{err}"
    );

    let out = transpose(&["count-params", "--set", "model.depth=3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_documents_defaults() {
    let help = ok(&["explain", "--help"]);
    assert!(help.contains("[default: 0.00075]"));
    assert!(help.contains("[default: dependency]"));
    assert!(ok(&["gen", "--help"]).contains("[default: 64x48]"));
}
