use std::path::Path;
use std::process::{Command, Output};

use odoflow::data::{load_dataset, DatasetRecipe, SceneRecipe};
use odoflow::geometry::ply::write_ply;
use odoflow::model::NetConfig;
use odoflow::train::{read_export, StageEpochs, TrainConfig, EXPORT_PLY};

fn odoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odoflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = DatasetRecipe {
        scene: SceneRecipe {
            n_points: 32,
            n_objects: 1,
            seed: 5,
            ..SceneRecipe::default()
        },
        count: 2,
        objects: None,
    };
    let recipe_path = dir.path().join("recipe.json");
    write_json(&recipe_path, &recipe);
    let data = dir.path().join("data");
    assert_ok(&odoflow(&["gen-data", "--recipe", s(&recipe_path), "--out", s(&data)]));
    let pairs = load_dataset(&data).unwrap();
    assert_eq!(pairs.len(), 2);

    let cfg = TrainConfig {
        net: Some(NetConfig::reduced_tiny()),
        batch: 1,
        stages: StageEpochs {
            pose_only: 1,
            flow_only: 1,
            joint: 1,
        },
        ..TrainConfig::default()
    };
    let cfg_path = dir.path().join("train.json");
    write_json(&cfg_path, &cfg);
    let ckpt = dir.path().join("model.json");
    assert_ok(&odoflow(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
        "--seed",
        "3",
    ]));
    for name in [
        "model.json",
        "model.pose_only.json",
        "model.flow_only.json",
        "model.joint.json",
        "model.log.json",
    ] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }

    let report_path = dir.path().join("report.json");
    let out = odoflow(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--json",
        s(&report_path),
    ]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["pairs"], 2);
    assert!(report["flow"]["epe3d"].as_f64().unwrap().is_finite());

    // 40-point clouds are resampled to the network's 32 inputs.
    let p_path = dir.path().join("p.ply");
    let q_path = dir.path().join("q.ply");
    let mut p = pairs[0].p.points().to_vec();
    p.extend_from_within(..8);
    write_ply(&p_path, &p, None).unwrap();
    write_ply(&q_path, pairs[0].q.points(), None).unwrap();
    let export = dir.path().join("infer");
    assert_ok(&odoflow(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--p",
        s(&p_path),
        "--q",
        s(&q_path),
        "--out",
        s(&export),
    ]));
    let pred = read_export(&export).unwrap();
    assert_eq!(pred.flow.len(), 32);
    assert_eq!(pred.static_mask.len(), 32);
    assert!(pred.correct.is_none());
    assert!(export.join(EXPORT_PLY).is_file());
}

#[test]
fn gradcheck_module_passes() {
    let out = odoflow(&["gradcheck", "--module", "geometry"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS geometry")));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn errors_exit_with_code_two() {
    let out = odoflow(&["gradcheck", "--module", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = odoflow(&["eval", "--ckpt", s(&missing), "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
