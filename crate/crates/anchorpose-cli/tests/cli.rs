//! End-to-end tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

use anchorpose::models::{generate, save_ply, ShapeKind, SyntheticShapeSpec};
use anchorpose::rng::substream;
use anchorpose::so3::Vec3;
use anchorpose::voting::{make_field, FieldFile};
use rand::Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchorpose"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let output = cmd.output().expect("binary should run");
    assert!(
        output.status.success(),
        "command failed: {}\nstderr: {}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).expect("stdout should be JSON")
}

fn write_blob_spec(path: &Path) {
    let spec = SyntheticShapeSpec {
        kind: ShapeKind::Blob { seed: 7 },
        n_points: 40,
    };
    std::fs::write(path, serde_json::to_string(&spec).unwrap()).unwrap();
}

#[test]
fn anchors_dump_lists_every_member() {
    let output = run_ok(bin().args(["anchors", "dump", "--group", "icosa60"]));
    let dump = stdout_json(&output);
    assert_eq!(dump["kind"], "icosa60");
    assert_eq!(dump["count"], 60);
    let quats = dump["quats_wxyz"].as_array().unwrap();
    assert_eq!(quats.len(), 60);
    // First member is the identity; every member is unit length.
    assert_eq!(quats[0][0].as_f64().unwrap(), 1.0);
    for q in quats {
        let n2: f64 = (0..4).map(|i| q[i].as_f64().unwrap().powi(2)).sum();
        assert!((n2 - 1.0).abs() < 1e-12);
    }
}

#[test]
fn anchors_verify_reports_every_check() {
    let output = run_ok(bin().args(["anchors", "verify", "--group", "tetra12"]));
    let text = String::from_utf8_lossy(&output.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("ok:")).count(), 3);
}

#[test]
fn unknown_group_is_a_usage_error() {
    let output = bin()
        .args(["anchors", "dump", "--group", "dodeca"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn too_few_verify_samples_is_a_usage_error() {
    let output = bin()
        .args(["anchors", "verify", "--group", "tetra12", "--samples", "10"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn vote_recovers_a_planted_center() {
    let dir = tempfile::tempdir().unwrap();
    let center = Vec3::new(0.3, -0.1, 0.2);
    let mut rng = substream(99, "cli-test-field", 0);
    let points: Vec<Vec3> = (0..50)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let field = make_field(&points, center).unwrap();
    let field_path = dir.path().join("field.json");
    std::fs::write(
        &field_path,
        serde_json::to_string(&FieldFile::from_field(&field)).unwrap(),
    )
    .unwrap();

    let out_path = dir.path().join("vote.json");
    run_ok(bin().args([
        "vote",
        "--field",
        field_path.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--seed",
        "4",
    ]));
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let got = result["center"].as_array().unwrap();
    for (i, want) in [center.x, center.y, center.z].iter().enumerate() {
        assert!((got[i].as_f64().unwrap() - want).abs() < 1e-6);
    }
    assert_eq!(result["inlier_indices"].as_array().unwrap().len(), 50);
}

#[test]
fn missing_input_is_a_data_error() {
    let output = bin()
        .args(["vote", "--field", "/definitely/not/here.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn fit_snaps_to_the_identity_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("shape.json");
    write_blob_spec(&spec_path);
    let output = run_ok(bin().args([
        "fit",
        "--shape",
        spec_path.to_str().unwrap(),
        "--target",
        "1,0,0,0",
        "--group",
        "tetra12",
    ]));
    let fit = stdout_json(&output);
    assert_eq!(fit["mode"], "anchored");
    assert_eq!(fit["selected_index"], 0);
    assert!(fit["result"]["normalized_loss"].as_f64().unwrap() < 1e-6);
    assert_eq!(
        fit["per_anchor_normalized_loss"].as_array().unwrap().len(),
        12
    );
}

#[test]
fn direct_fit_converges_from_a_nearby_start() {
    let dir = tempfile::tempdir().unwrap();
    let spec_path = dir.path().join("shape.json");
    write_blob_spec(&spec_path);
    let output = run_ok(bin().args([
        "fit",
        "--shape",
        spec_path.to_str().unwrap(),
        "--target",
        "1,0,0,0",
        "--start",
        "0.999,0.02,0.0,0.0",
    ]));
    let fit = stdout_json(&output);
    assert_eq!(fit["mode"], "direct");
    assert!(fit["result"]["normalized_loss"].as_f64().unwrap() < 1e-3);
}

#[test]
fn eval_scores_perfect_estimates_at_one() {
    let dir = tempfile::tempdir().unwrap();
    let model = generate(&SyntheticShapeSpec {
        kind: ShapeKind::Blob { seed: 12 },
        n_points: 30,
    })
    .unwrap();
    let model_path = dir.path().join(format!("{}.ply", model.id()));
    save_ply(&model, &model_path).unwrap();

    let records = serde_json::json!([{
        "object_id": model.id(),
        "rotation_wxyz": [1.0, 0.0, 0.0, 0.0],
        "translation_m": [0.05, 0.0, -0.02],
    }]);
    let est_path = dir.path().join("est.json");
    let truth_path = dir.path().join("truth.json");
    std::fs::write(&est_path, records.to_string()).unwrap();
    std::fs::write(&truth_path, records.to_string()).unwrap();

    let output = run_ok(bin().args([
        "eval",
        "--estimates",
        est_path.to_str().unwrap(),
        "--truths",
        truth_path.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
    ]));
    let report = stdout_json(&output);
    let per = &report["per_object"][model.id()];
    assert_eq!(per["accuracy"], 1.0);
    assert_eq!(per["auc"], 1.0);
    assert_eq!(per["n"], 1);
}

#[test]
fn bench_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bench.json");
    std::fs::write(
        &config_path,
        serde_json::json!({
            "n_instances": 2,
            "n_points": 120,
            "model": {"spec": {"shape": "blob", "seed": 3, "n_points": 40}},
            "anchors": null,
            "fit": {"max_iters": 60},
        })
        .to_string(),
    )
    .unwrap();

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let output = run_ok(bin().args([
            "bench",
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--seed",
            "17",
        ]));
        // The aggregate line on stdout is machine-readable.
        let aggregate = stdout_json(&output);
        assert_eq!(aggregate["n_ok"], 2);
        for name in [
            "report.json",
            "curve_add.csv",
            "curve_trans.csv",
            "curve_rot.csv",
        ] {
            assert!(out_dir.join(name).exists(), "{name} missing");
        }
        outputs.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "replay must be byte-identical");
}

#[test]
fn malformed_config_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bench.json");
    std::fs::write(&config_path, "{ not json").unwrap();
    let output = bin()
        .args(["bench", "--config", config_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let output = bin().arg("--help").output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&output.stdout).contains("anchorpose"));
}
