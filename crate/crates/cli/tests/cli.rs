use std::path::Path;
use std::process::{Command, Output};

use voxband::io::{read_field, read_mesh};

fn voxband(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxband")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn help_lists_subcommands() {
    let out = voxband(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth-render", "gt-tsdf", "quantize-study", "reconstruct", "texture", "train-toy", "eval"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn errors_are_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.obj");
    let out = voxband(&["gt-tsdf", "--mesh", &s(&missing), "--resolution", "8", "--out", &s(&dir.path().join("x.svf"))]);
    assert_eq!(out.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let out = voxband(&["gt-tsdf", "--mesh", "@teapot", "--resolution", "8", "--out", &s(&dir.path().join("x.svf"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"coarse_resolution": 32, "fine_resolution": 48}"#).unwrap();
    let out = voxband(&["--config", &s(&cfg), "gt-tsdf", "--mesh", "@sphere", "--resolution", "8", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");

    let open = dir.path().join("open.obj");
    std::fs::write(&open, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let out = voxband(&["gt-tsdf", "--mesh", &s(&open), "--resolution", "8", "--out", &s(&dir.path().join("x.svf"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn gt_tsdf_and_quantize_study_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"coarse_resolution": 16, "fine_resolution": 32, "volume_edge": 64.0}"#).unwrap();
    let svf = dir.path().join("sphere.svf");
    let out = voxband(&["--config", &s(&cfg), "gt-tsdf", "--mesh", "@sphere", "--resolution", "16", "--out", &s(&svf)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let field = read_field(&svf, 5.0).unwrap();
    assert_eq!(field.len(), 16 * 16 * 16);
    assert!(field.values().iter().any(|&v| v < 0.0) && field.values().iter().all(|&v| v.abs() <= 5.0));

    let csv = dir.path().join("q.csv");
    let out = voxband(&[
        "--config", &s(&cfg), "quantize-study", "--mesh", "@sphere", "--resolutions", "16,32,64", "--samples", "2000", "--out", &s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0] > rows[1] && rows[1] > rows[2]);
}

#[test]
fn synth_render_then_eval_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cap = dir.path().join("cap");
    let out = voxband(&["synth-render", "--mesh", "@sphere", "--views", "2", "--size", "48", "--radius", "100", "--out", &s(&cap)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cap.join("cameras.json").exists());

    let mesh = dir.path().join("s.ply");
    voxband::io::write_mesh(&mesh, &voxband::synth::shapes::icosphere(20.0, 3)).unwrap();
    assert_eq!(read_mesh(&mesh).unwrap().triangles.len(), 1280);
    let report = dir.path().join("m.json");
    let out = voxband(&["eval", "--pred", &s(&mesh), "--gt", &s(&mesh), "--views", &s(&cap), "--out", &s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["distances"]["p2s_precision"], 0.0);
    assert!(r["normal_error_deg"].as_f64().unwrap() < 1e-4);

    let csv = dir.path().join("m.csv");
    let out = voxband(&["eval", "--pred", "@sphere", "--gt", &s(&mesh), "--out", &s(&csv)]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("metric,value\n"));
}

#[test]
fn train_toy_rejects_large_coarse_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = voxband(&[
        "train-toy", "--stage", "coarse", "--capture", &s(dir.path()), "--gt", "@sphere", "--out", &s(&dir.path().join("c.vbw")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
