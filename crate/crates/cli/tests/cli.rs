use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"schema_version = 1
seed = 7
mode = "progressive"
iterations = 20
resolution = 16
gaussians_per_triangle = 1
eval_every = 10
checkpoint_every = 10

[symgen]
d = 4

[curriculum]
n_s = 2
n_syn = 1
n_real = 1
n_f = 4
"#;

fn splatgen(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_splatgen"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn missing_required_key_exits_2_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let text: String = TINY.lines().filter(|l| !l.starts_with("iterations")).map(|l| format!("{l}\n")).collect();
    let cfg = write_config(tmp.path(), &text);
    let out = splatgen(&["run", "--config", &cfg, "--out", tmp.path().join("run").to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterations"));
}

#[test]
fn unknown_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("[symgen]\n", "[symgen]\nspeed = 3\n"));
    let out = splatgen(&["run", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("symgen") && err.contains("speed"), "{err}");
}

#[test]
fn runs_are_deterministic_and_tools_work_on_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = splatgen(&["run", "--config", &cfg, "--out", dir.to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["metrics.jsonl", "final.ply", "config.resolved.toml", "checkpoints/avatar-000010.ply"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_eq!(std::fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 20);
    assert!(a.join("checkpoints/adam-000020.json").is_file());
    assert!(a.join("renders/turntable").is_dir());

    // A completed directory is never overwritten.
    let again = splatgen(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], &[]);
    assert_eq!(again.status.code(), Some(2));

    let ply = tmp.path().join("smile.ply");
    let out = splatgen(
        &["export-ply", "--run", a.to_str().unwrap(), "--out", ply.to_str().unwrap(), "--expression", "smile:0.8"],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(splatgen_core::avatar::read_ply(&ply).unwrap().len(), 1280);
    let inside = a.join("extra.ply");
    let out = splatgen(&["export-ply", "--run", a.to_str().unwrap(), "--out", inside.to_str().unwrap()], &[]);
    assert!(!out.status.success());

    let tt = tmp.path().join("tt");
    let out = splatgen(
        &["render-turntable", "--run", a.to_str().unwrap(), "--out", tt.to_str().unwrap(), "--frames", "8"],
        &[],
    );
    assert!(out.status.success());
    assert_eq!(std::fs::read_dir(&tt).unwrap().count(), 8);

    let out = splatgen(
        &["eval", "--frames", tt.to_str().unwrap(), "--reference", tt.join("frame_0000.png").to_str().unwrap()],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["render_fps"].is_null());
    assert!(report["motion_stability"].as_f64().unwrap() <= 1.0);

    let out = splatgen(&["compare", a.to_str().unwrap(), b.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("progressive")).count(), 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("iterations = 20", "iterations = 12"));
    let root = tmp.path().join("root");
    let out = splatgen(
        &["run", "--config", &cfg, "--mode", "no-temporal", "--seed", "3"],
        &[("SPLATGEN_OUTPUT_ROOT", &root)],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.join("no-temporal-seed3/summary.json").is_file());
    let resolved = std::fs::read_to_string(root.join("no-temporal-seed3/config.resolved.toml")).unwrap();
    assert!(resolved.contains("mode = \"no-temporal\"") && resolved.contains("seed = 3"));
}

#[test]
fn bad_mode_is_a_usage_error() {
    let out = splatgen(&["run", "--config", "x.toml", "--mode", "sideways"], &[]);
    assert_eq!(out.status.code(), Some(2));
}
