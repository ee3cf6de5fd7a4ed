use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use emdreg::ffd::FfdTransform;
use emdreg::image::{load_image, save_image};
use emdreg::phantom::brain_phantom;

fn emdreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emdreg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run emdreg")
}

fn write_phantom(dir: &Path, name: &str, variant: u64) {
    save_image(&brain_phantom(40, 34, variant), dir.join(name)).unwrap();
}

#[test]
fn decompose_writes_all_levels() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), "in.png", 0);
    let out = emdreg(&["decompose", "--input", "in.png", "--levels", "3", "--out-dir", "d"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["imf_1.png", "imf_2.png", "imf_3.png", "residual.png", "average.png"] {
        let img = load_image(tmp.path().join("d").join(name)).unwrap();
        assert_eq!((img.width(), img.height()), (40, 34));
    }
}

#[test]
fn simulate_bias_with_zero_kernels_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), "in.png", 1);
    let out = emdreg(
        &["simulate-bias", "--input", "in.png", "--kernels", "0", "--seed", "3", "--out", "o.png"],
        tmp.path(),
    );
    assert!(out.status.success());
    let a = load_image(tmp.path().join("in.png")).unwrap();
    let b = load_image(tmp.path().join("o.png")).unwrap();
    assert_eq!(a, b);

    let out = emdreg(
        &["simulate-bias", "--input", "in.png", "--kernels", "2", "--out", "b.png", "--field-out", "f.png"],
        tmp.path(),
    );
    assert!(out.status.success());
    let field = load_image(tmp.path().join("f.png")).unwrap();
    assert!(field.min_max().1 > 0.1);
}

#[test]
fn register_writes_transform_and_image() {
    let tmp = tempfile::tempdir().unwrap();
    write_phantom(tmp.path(), "r.png", 2);
    write_phantom(tmp.path(), "f.png", 2);
    let out = emdreg(
        &[
            "register", "--ref", "r.png", "--flo", "f.png", "--method", "intensity", "--measure", "ssd",
            "--levels", "2", "--grid", "6", "--max-iters", "5", "--out-transform", "t.json", "--out-image",
            "w.png",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = FfdTransform::from_json(&fs::read_to_string(tmp.path().join("t.json")).unwrap()).unwrap();
    assert_eq!((t.nx, t.ny, t.image_width, t.image_height), (6, 6, 40, 34));
    assert!(tmp.path().join("w.png").exists());
}

#[test]
fn benchmark_from_config_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("exp.toml"),
        r#"
methods = ["intensity"]
measures = ["cc"]
kernels = [0, 2]
runs = 2
seed = 5
phantom_size = [40, 34]
grid = 6
levels = 2
out_dir = "out"

[optimizer]
max_iters = 4
initial_step = 2.0
shrink = 0.5
min_step = 0.001
fd_step = 0.5
tolerance = 1e-6
"#,
    )
    .unwrap();
    let out = emdreg(&["benchmark", "--config", "exp.toml"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(tmp.path().join("out/records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 4);
    let convergence = fs::read_to_string(tmp.path().join("out/convergence.csv")).unwrap();
    assert_eq!(convergence.lines().count(), 1 + 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["trials"].as_array().unwrap().len(), 4);

    let summary = fs::read_to_string(tmp.path().join("out/summary.csv")).unwrap();
    let out = emdreg(&["report", "--records", "out/records.csv", "--out", "rep"], tmp.path());
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("rep/summary.csv")).unwrap(), summary);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_config = emdreg(&["benchmark", "--kernels", "7", "--out", "x"], tmp.path());
    assert_eq!(bad_config.status.code(), Some(1));
    let missing = emdreg(&["report", "--records", "nope.csv"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
    fs::write(tmp.path().join("empty.csv"), "").unwrap();
    let empty = emdreg(&["report", "--records", "empty.csv"], tmp.path());
    assert_eq!(empty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&empty.stderr).contains("parse error"));
    let usage = emdreg(&["decompose"], tmp.path());
    assert_eq!(usage.status.code(), Some(1));
    let missing_input = emdreg(&["decompose", "--input", "none.png", "--out-dir", "d"], tmp.path());
    assert_eq!(missing_input.status.code(), Some(2));
}
