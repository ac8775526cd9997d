//! Every example runs to completion. A full `cargo test` builds them next
//! to the test binaries; a filtered run would see stale binaries,
//! so they are rebuilt first.

use std::path::PathBuf;
use std::process::Command;
use std::sync::Once;

static BUILD: Once = Once::new();

fn example(name: &str) -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|deps| deps.parent()).unwrap();
    profile_dir.join("examples").join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

fn run(name: &str, args: &[&str]) -> String {
    let path = example(name);
    BUILD.call_once(|| {
        let status = Command::new(env!("CARGO"))
            .args(["build", "--quiet", "--examples", "-p", "crossview"])
            .current_dir(env!("CARGO_MANIFEST_DIR"))
            .status()
            .unwrap();
        assert!(status.success(), "cargo build --examples failed");
    });
    assert!(path.is_file(), "example binary {} not built", path.display());
    let out = Command::new(&path).args(args).output().unwrap();
    assert!(out.status.success(), "{name} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn autodiff() {
    let out = run("autodiff", &[]);
    assert!(out.contains("pass = true"), "{out}");
}

#[test]
fn localize() {
    assert!(run("localize", &[]).contains("top-1% accuracy"));
}

#[test]
fn synthetic_world() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("synthetic_world", &[dir.path().to_str().unwrap(), "16"]);
    assert!(out.contains("16 pairs"), "{out}");
    assert!(dir.path().join("manifest.csv").is_file());
}

#[test]
fn train_pipeline() {
    assert!(run("train_pipeline", &[]).contains("top1pct"));
}

#[test]
fn multi_scale() {
    assert!(run("multi_scale", &[]).contains("multi-scale val distance"));
}

#[test]
fn visualize() {
    let dir = tempfile::tempdir().unwrap();
    run("visualize", &[dir.path().to_str().unwrap()]);
    for f in ["heatmap.ppm", "heatmap.georef", "fine_heatmap.ppm", "falsecolor.ppm"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn max_activation() {
    assert_eq!(run("max_activation", &[]).lines().count(), 8);
}
