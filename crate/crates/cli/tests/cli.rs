//! End-to-end tests of the `bms` binary: exit codes, diagnostics, and
//! rerun determinism of every artifact it writes.

use std::path::Path;
use std::process::{Command, Output};

fn bms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bms"))
        .args(args)
        .output()
        .expect("spawning the bms binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 6x6x6 example-shaped phantom: small enough for fast solves.
const SMALL_SPEC: &str = r#"{
  "domain_size": [0.1, 0.1, 0.1],
  "grid_resolution": [6, 6, 6],
  "gland": { "center": [0.05, 0.05, 0.06], "radii": [0.03, 0.025, 0.025] },
  "central_zone": { "center": [0.05, 0.05, 0.06], "radii": [0.015, 0.012, 0.012] },
  "bone": { "normal": [0.0, 0.0, -1.0], "offset": -0.015 },
  "probe": { "center": [0.05, 0.05, 0.1], "radius": 0.022 }
}"#;

fn make_phantom(dir: &Path) {
    let spec = dir.join("spec.json");
    write(&spec, SMALL_SPEC);
    let out = dir.join("phantom");
    assert_ok(&bms(&[
        "phantom",
        "--config",
        path_str(&spec),
        "--seed",
        "7",
        "--out",
        path_str(&out),
    ]));
}

fn simulate(dir: &Path, name: &str, sims: &str, seed: &str, split: &str, features: &str) {
    let out = dir.join(name);
    assert_ok(&bms(&[
        "simulate",
        "--phantom",
        path_str(&dir.join("phantom")),
        "--simulations",
        sims,
        "--seed",
        seed,
        "--split",
        split,
        "--features",
        features,
        "--out",
        path_str(&out),
    ]));
}

#[test]
fn malformed_config_is_rejected_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write(&bad, "{ \"domain_size\": [0.1, 0.1,\n    oops ]");
    let out = bms(&[
        "phantom",
        "--config",
        path_str(&bad),
        "--out",
        path_str(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("bad.json"), "diagnostic names the file: {msg}");
    assert!(msg.contains("line 2"), "diagnostic carries the position: {msg}");
}

#[test]
fn out_of_range_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    // Parses fine; validation must still catch the zero resolution.
    write(
        &bad,
        &SMALL_SPEC.replace("\"grid_resolution\": [6, 6, 6]", "\"grid_resolution\": [0, 6, 6]"),
    );
    let out = bms(&[
        "phantom",
        "--config",
        path_str(&bad),
        "--out",
        path_str(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("grid_resolution"), "stderr: {}", stderr(&out));
}

#[test]
fn unsolvable_simulations_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path());
    // A 0.2 m probe push on a 0.1 m domain in one load step with almost no
    // Newton budget cannot converge; a failed majority aborts the dataset.
    let cruel = dir.path().join("cruel.json");
    write(
        &cruel,
        r#"{ "simulations": 2, "displacement_scale": 0.2,
             "solver": { "load_steps": 1, "max_newton_iterations": 2,
                         "max_line_search_halvings": 2 } }"#,
    );
    let out = bms(&[
        "simulate",
        "--phantom",
        path_str(&dir.path().join("phantom")),
        "--config",
        path_str(&cruel),
        "--seed",
        "77",
        "--out",
        path_str(&dir.path().join("fail")),
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("2 of 2"), "stderr: {}", stderr(&out));
}

#[test]
fn mismatched_feature_modes_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path());
    simulate(dir.path(), "train", "3", "11", "train", "pbk");
    simulate(dir.path(), "val", "1", "12", "validation", "pbk");
    simulate(dir.path(), "hold_pb", "1", "13", "holdout", "pb");

    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        r#"{ "gfv_size": 32, "points_per_cloud": 343, "minibatch": 3, "epochs": 1 }"#,
    );
    let model_dir = dir.path().join("model");
    assert_ok(&bms(&[
        "train",
        "--data",
        path_str(&dir.path().join("train")),
        "--val",
        path_str(&dir.path().join("val")),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&model_dir),
    ]));

    let out = bms(&[
        "predict",
        "--model",
        path_str(&model_dir.join("model.bmck")),
        "--data",
        path_str(&dir.path().join("hold_pb")),
        "--out",
        path_str(&dir.path().join("pred.bmpr")),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("'pbk'") && msg.contains("'pb'"), "names both modes: {msg}");
}

#[test]
fn material_free_training_strips_full_datasets() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path());
    simulate(dir.path(), "train", "3", "11", "train", "pbk");
    simulate(dir.path(), "val", "1", "12", "validation", "pbk");

    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        r#"{ "gfv_size": 32, "points_per_cloud": 343, "minibatch": 3, "epochs": 1 }"#,
    );
    let model_dir = dir.path().join("model");
    assert_ok(&bms(&[
        "train",
        "--data",
        path_str(&dir.path().join("train")),
        "--val",
        path_str(&dir.path().join("val")),
        "--config",
        path_str(&cfg),
        "--features",
        "pb",
        "--out",
        path_str(&model_dir),
    ]));

    // The resulting model wants 7-wide inputs, so full datasets are refused.
    let out = bms(&[
        "predict",
        "--model",
        path_str(&model_dir.join("model.bmck")),
        "--data",
        path_str(&dir.path().join("train")),
        "--out",
        path_str(&dir.path().join("pred.bmpr")),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("'pb'"), "stderr: {}", stderr(&out));
}

#[test]
fn wrong_split_tags_are_refused_for_training() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path());
    simulate(dir.path(), "hold", "1", "13", "holdout", "pbk");
    simulate(dir.path(), "val", "1", "12", "validation", "pbk");

    let out = bms(&[
        "train",
        "--data",
        path_str(&dir.path().join("hold")),
        "--val",
        path_str(&dir.path().join("val")),
        "--out",
        path_str(&dir.path().join("model")),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("holdout") && msg.contains("train"), "names both tags: {msg}");
}

#[test]
fn evaluation_refuses_contaminated_holdouts() {
    let dir = tempfile::tempdir().unwrap();
    make_phantom(dir.path());
    simulate(dir.path(), "train", "3", "11", "train", "pbk");
    simulate(dir.path(), "val", "1", "12", "validation", "pbk");

    let cfg = dir.path().join("train.json");
    write(
        &cfg,
        r#"{ "gfv_size": 32, "points_per_cloud": 343, "minibatch": 3, "epochs": 1 }"#,
    );
    let model_dir = dir.path().join("model");
    assert_ok(&bms(&[
        "train",
        "--data",
        path_str(&dir.path().join("train")),
        "--val",
        path_str(&dir.path().join("val")),
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&model_dir),
    ]));

    // Re-tag the training dataset as holdout without changing its id.
    let manifest_path = dir.path().join("train").join("manifest.json");
    let manifest = std::fs::read_to_string(&manifest_path).unwrap();
    write(&manifest_path, &manifest.replace("\"train\"", "\"holdout\""));

    let out = bms(&[
        "evaluate",
        "--model",
        path_str(&model_dir.join("model.bmck")),
        "--holdout",
        path_str(&dir.path().join("train")),
        "--out",
        path_str(&dir.path().join("report")),
    ]);
    assert_eq!(out.status.code(), Some(4), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("contaminated"), "stderr: {}", stderr(&out));
}

#[test]
fn verification_battery_passes_quickly() {
    let start = std::time::Instant::now();
    let out = bms(&["verify-fe"]);
    let elapsed = start.elapsed();
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for line in ["patch interior error", "uniaxial relative error", "force vs finite diff", "tangent vs finite diff"] {
        assert!(text.contains(line), "report lists {line}:\n{text}");
    }
    assert!(text.contains("overall: pass"), "report:\n{text}");
    assert!(elapsed.as_secs() < 60, "verification took {elapsed:?}");
}

/// Drops the named CSV column (by zero-based index) from every row.
fn strip_column(csv: &str, index: usize) -> String {
    csv.lines()
        .map(|line| {
            let mut fields: Vec<&str> = line.split(',').collect();
            if index < fields.len() {
                fields.remove(index);
            }
            fields.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

#[test]
fn reruns_produce_identical_artifacts_modulo_timing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SMALL_SPEC);
    let train_cfg = dir.path().join("train.json");
    write(
        &train_cfg,
        r#"{ "gfv_size": 32, "points_per_cloud": 343, "minibatch": 4, "epochs": 2, "seed": 5 }"#,
    );

    let run = |tag: &str| {
        let root = dir.path().join(tag);
        std::fs::create_dir_all(&root).unwrap();
        let phantom = root.join("phantom");
        assert_ok(&bms(&[
            "phantom", "--config", path_str(&spec), "--seed", "7", "--out", path_str(&phantom),
        ]));
        for (name, sims, seed, split) in
            [("train", "4", "11", "train"), ("val", "1", "12", "validation"), ("hold", "2", "13", "holdout")]
        {
            assert_ok(&bms(&[
                "simulate", "--phantom", path_str(&phantom), "--simulations", sims,
                "--seed", seed, "--split", split, "--out", path_str(&root.join(name)),
            ]));
        }
        let model = root.join("model");
        assert_ok(&bms(&[
            "train", "--data", path_str(&root.join("train")), "--val", path_str(&root.join("val")),
            "--config", path_str(&train_cfg), "--out", path_str(&model),
        ]));
        assert_ok(&bms(&[
            "predict", "--model", path_str(&model.join("model.bmck")),
            "--data", path_str(&root.join("hold")), "--block", "128", "--seed", "3",
            "--out", path_str(&root.join("pred.bmpr")),
        ]));
        assert_ok(&bms(&[
            "evaluate", "--model", path_str(&model.join("model.bmck")),
            "--holdout", path_str(&root.join("hold")), "--out", path_str(&root.join("report")),
        ]));
        root
    };

    let a = run("a");
    let b = run("b");

    // Byte-for-byte deterministic artifacts.
    for rel in [
        "phantom/mesh.bmsh",
        "phantom/phantom.json",
        "train/manifest.json",
        "train/sample_00000.bmsd",
        "train/sample_00003.bmsd",
        "hold/manifest.json",
        "hold/sample_00000.bmsd",
        "model/model.bmck",
    ] {
        assert_eq!(read(&a.join(rel)), read(&b.join(rel)), "{rel} differs between reruns");
    }

    // train_log.csv: seconds column is wall-clock, everything else fixed.
    let log_a = String::from_utf8(read(&a.join("model/train_log.csv"))).unwrap();
    let log_b = String::from_utf8(read(&b.join("model/train_log.csv"))).unwrap();
    assert_eq!(strip_column(&log_a, 3), strip_column(&log_b, 3), "training curves differ");

    // pred.bmpr: the trailing f64 is measured latency, the rest is exact.
    let pred_a = read(&a.join("pred.bmpr"));
    let pred_b = read(&b.join("pred.bmpr"));
    assert_eq!(pred_a.len(), pred_b.len());
    assert_eq!(
        pred_a[..pred_a.len() - 8],
        pred_b[..pred_b.len() - 8],
        "prediction payload differs between reruns"
    );

    // report.csv: the last column is ms/case, everything else fixed.
    let rep_a = String::from_utf8(read(&a.join("report/report.csv"))).unwrap();
    let rep_b = String::from_utf8(read(&b.join("report/report.csv"))).unwrap();
    assert_eq!(strip_column(&rep_a, 12), strip_column(&rep_b, 12), "reports differ");
}

#[test]
fn randomize_varies_geometry_with_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, SMALL_SPEC);
    let gen = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        assert_ok(&bms(&[
            "phantom", "--config", path_str(&spec), "--randomize", "--seed", seed,
            "--out", path_str(&out),
        ]));
        read(&out.join("mesh.bmsh"))
    };
    let a = gen("1", "p1");
    let b = gen("2", "p2");
    let a_again = gen("1", "p1b");
    assert_eq!(a, a_again, "same seed must reproduce the mesh");
    assert_ne!(a, b, "different seeds should move the geometry");
}
