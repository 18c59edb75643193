use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn provfield(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_provfield"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, json: &str) {
    fs::write(dir.join(name), json).unwrap();
}

const TINY_TRAIN: &str = r#""train": {"iterations": 10, "rays_per_iter": 4, "points_per_ray": 4, "hidden": 16, "b": 4, "freqs": 2, "lr": 1e-3}"#;

#[test]
fn missing_scene_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"scene": "nowhere/scene.json", "cameras": "cams.json"}"#);
    let out = provfield(&["train", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/scene.json"));
}

#[test]
fn unknown_keys_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", r#"{"train": {"iterations": 1, "itterations": 2}}"#);
    let out = provfield(&["train", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("itterations"));
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"fixture": "single-camera", "train": {"iterations": 50, "rays_per_iter": 4, "points_per_ray": 4, "hidden": 8, "b": 2, "freqs": 1, "lr": 1e300}}"#,
    );
    let out = provfield(&["train", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.json", &format!(r#"{{"fixture": "single-camera", {TINY_TRAIN}}}"#));
    ok(&provfield(&["train", "--config", "c.json", "--out", "a", "--seed", "4"], dir.path()));
    ok(&provfield(&["train", "--config", "c.json", "--out", "b", "--seed", "4"], dir.path()));
    let a = fs::read_to_string(dir.path().join("a/losses.csv")).unwrap();
    assert_eq!(a.lines().count(), 11);
    assert!(dir.path().join("a/field.bin").exists());
    assert_eq!(a, fs::read_to_string(dir.path().join("b/losses.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a/field.bin")).unwrap(),
        fs::read(dir.path().join("b/field.bin")).unwrap()
    );
    // The echoed config reproduces the run.
    ok(&provfield(&["train", "--config", "a/config.json", "--out", "c"], dir.path()));
    assert_eq!(a, fs::read_to_string(dir.path().join("c/losses.csv")).unwrap());
    let echoed: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 4);
}

/// One camera looking at a slab, as scene and camera files.
fn slab_rig(dir: &Path) {
    ok(&provfield(&["gen-scene", "--out", "gen"], dir));
    let scene = r#"{"bounds": {"min": [-1, -1, -1], "max": [1, 1, 1]},
        "primitives": [{"type": "box", "min": [-1, -1, 0.2], "max": [1, 1, 0.6], "density": 40}]}"#;
    fs::write(dir.join("slab.json"), scene).unwrap();
    fs::copy(dir.join("gen/single-camera/cameras.json"), dir.join("cams.json")).unwrap();
}

#[test]
fn uncertainty_maps_and_report() {
    let dir = tempfile::tempdir().unwrap();
    slab_rig(dir.path());
    write_config(
        dir.path(),
        "c.json",
        r#"{"scene": "slab.json", "cameras": "cams.json", "source": "oracle",
            "uncertainty": {"n_is": 2000, "per_view": 6, "stride": 8, "depth_samples": 32}}"#,
    );
    ok(&provfield(&["uncertainty", "--config", "c.json", "--out", "u"], dir.path()));
    let u = dir.path().join("u");
    for stem in ["nll_0", "depth_error_0"] {
        let pfm = fs::read(u.join(format!("{stem}.pfm"))).unwrap();
        let header = b"Pf\n8 8\n-1.0\n";
        assert_eq!(&pfm[..header.len()], header);
        assert_eq!(pfm.len(), header.len() + 64 * 4);
        let ppm = fs::read(u.join(format!("{stem}.ppm"))).unwrap();
        let header = b"P6\n8 8\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 64 * 3);
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(u.join("nll_report.json")).unwrap()).unwrap();
    let per: Vec<f64> = report["per_point"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(report["n_points"].as_u64().unwrap() as usize, per.len());
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    assert!((report["mean_nll"].as_f64().unwrap() - mean).abs() < 1e-9);
    assert_eq!(report["n_sentinel"], 0);
}

#[test]
fn uncertainty_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = provfield(&["uncertainty", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("field.bin"));
}

#[test]
fn eval_perfect_predictor() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"fixture": "opposed-pair", "source": "oracle", "eval": {"lattice_res": 4}}"#,
    );
    ok(&provfield(&["eval", "--config", "c.json", "--out", "e"], dir.path()));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["ap"].as_f64().unwrap(), 1.0);
    assert_eq!(m["schedule"]["count"], 500);
    let curve = fs::read_to_string(dir.path().join("e/pr_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 501);
}

#[test]
fn refine_weight_zero_ignores_provenance() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "t.json", &format!(r#"{{"fixture": "floater-rig", {TINY_TRAIN}}}"#));
    ok(&provfield(&["train", "--config", "t.json", "--out", "f"], dir.path()));
    let refine = r#""refine": {"regularizer": {"iterations": 4, "rays_per_iter": 8, "reg_weight": 0.0}}"#;
    write_config(
        dir.path(),
        "a.json",
        &format!(r#"{{"fixture": "floater-rig", "checkpoint": "f/field.bin", {refine}}}"#),
    );
    write_config(
        dir.path(),
        "b.json",
        &format!(r#"{{"fixture": "floater-rig", "source": "oracle", {refine}}}"#),
    );
    ok(&provfield(&["refine", "--config", "a.json", "--out", "a"], dir.path()));
    ok(&provfield(&["refine", "--config", "b.json", "--out", "b"], dir.path()));
    let a = fs::read_to_string(dir.path().join("a/refine.csv")).unwrap();
    assert_eq!(a.lines().count(), 6);
    assert_eq!(a, fs::read_to_string(dir.path().join("b/refine.csv")).unwrap());
}

#[test]
fn viewselect_zero_iterations_single_row() {
    let dir = tempfile::tempdir().unwrap();
    write_config(
        dir.path(),
        "c.json",
        r#"{"fixture": "floater-rig", "source": "oracle",
            "viewselect": {"select": {"iterations": 0, "targets": [[0, 0, -0.01]]}}}"#,
    );
    ok(&provfield(&["viewselect", "--config", "c.json", "--out", "v"], dir.path()));
    let csv = fs::read_to_string(dir.path().join("v/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("iter,objective,L_c,L_d,nearest_y_dist"));
}

#[test]
fn gen_scene_writes_every_fixture() {
    let dir = tempfile::tempdir().unwrap();
    ok(&provfield(&["gen-scene", "--out", "g"], dir.path()));
    for name in ["single-camera", "opposed-pair", "stereo-5deg", "stereo-60deg", "floater-rig"] {
        assert!(dir.path().join("g").join(name).join("scene.json").exists(), "{name}");
        assert!(dir.path().join("g").join(name).join("cameras.json").exists(), "{name}");
    }
    assert!(dir.path().join("g/floater-rig/test_cameras.json").exists());
}
