use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusedview"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth",
        "--kind",
        "deforming",
        "--views",
        "8",
        "--resolution",
        "48",
        "--out",
        s(dir),
    ]);
}

#[test]
fn synth_writes_a_complete_dataset() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    for f in ["manifest.json", "meshfit.json", "gt_atlas.png", "images/frame_0007.png"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn texture_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let (m, fit) = (d.join("manifest.json"), d.join("meshfit.json"));
    for frame in ["frame_0000", "frame_0004"] {
        let out = d.join("partial");
        ok(&[
            "extract-texture",
            "--manifest",
            s(&m),
            "--meshfit",
            s(&fit),
            "--frame",
            frame,
            "--out",
            s(&out),
            "--size",
            "64",
        ]);
    }
    let partials = d.join("partial");
    let stems: Vec<String> = ["frame_0000", "frame_0004"]
        .iter()
        .map(|f| s(&partials.join(f)).to_string())
        .collect();
    let mut args = vec!["stitch"];
    args.extend(stems.iter().map(|x| x.as_str()));
    let atlas_dir = d.join("atlas");
    args.extend(["--out", s(&atlas_dir)]);
    ok(&args);
    assert!(atlas_dir.join("atlas.png").exists());
    let face = d.join("face.png");
    ok(&[
        "render-face",
        "--manifest",
        s(&m),
        "--meshfit",
        s(&fit),
        "--atlas",
        s(&atlas_dir.join("atlas")),
        "--frame",
        "frame_0002",
        "--out",
        s(&face),
    ]);
    assert!(face.exists());
}

#[test]
fn evaluate_identical_folders() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let images = dir.path().join("images");
    let csv = dir.path().join("scores.csv");
    ok(&[
        "evaluate",
        "--pred",
        s(&images),
        "--gt",
        s(&images),
        "--blur",
        "--csv",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 8 + 1, "{text}");
}

#[test]
fn grid_from_labeled_images() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let img = |i: usize| format!("F{i}={}", s(&dir.path().join(format!("images/frame_000{i}.png"))));
    let out = dir.path().join("grid.png");
    ok(&[
        "grid",
        &img(0),
        &img(1),
        &img(2),
        "--zoom",
        "10,10,12,12",
        "--out",
        s(&out),
    ]);
    assert!(out.exists());
    let bad = run(&["grid", &img(0), "--zoom", "40,40,20,20", "--out", s(&out)]);
    assert!(!bad.status.success());
}

#[test]
fn missing_upstream_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("run");
    let res = run(&[
        "pipeline",
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--meshfit",
        s(&dir.path().join("meshfit.json")),
        "--out",
        s(&out),
        "--stage",
        "train-fusion",
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("build-pairs"), "{err}");
}

#[test]
fn unknown_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let res = run(&[
        "pipeline",
        "--manifest",
        s(&dir.path().join("manifest.json")),
        "--meshfit",
        s(&dir.path().join("meshfit.json")),
        "--out",
        s(&dir.path().join("run")),
        "--stage",
        "bake",
    ]);
    assert!(!res.status.success());
}

#[test]
fn write_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.json");
    let (m, fit, out) = (
        dir.path().join("manifest.json"),
        dir.path().join("meshfit.json"),
        dir.path().join("run"),
    );
    let base = ["pipeline", "--manifest", s(&m), "--meshfit", s(&fit), "--out", s(&out)];
    let mut args = base.to_vec();
    args.extend(["--profile", "full", "--write-config", s(&cfg)]);
    ok(&args);
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("\"schema_version\": 1"), "{text}");
}

#[test]
fn train_then_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d);
    let m = d.join("manifest.json");
    let run_dir = d.join("nerf");
    ok(&[
        "train-nerf",
        "--manifest",
        s(&m),
        "--out",
        s(&run_dir),
        "--iterations",
        "20",
    ]);
    let ck = run_dir.join("field.ckpt");
    assert!(ck.exists());
    ok(&[
        "train-nerf",
        "--manifest",
        s(&m),
        "--out",
        s(&run_dir),
        "--iterations",
        "30",
        "--resume",
    ]);
    let renders = d.join("renders");
    ok(&[
        "render",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&m),
        "--out",
        s(&renders),
        "--samples",
        "8",
    ]);
    assert!(std::fs::read_dir(&renders).unwrap().count() >= 1);
}
