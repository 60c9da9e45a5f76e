use fusedview::dataset::{ingest, CameraEntry, CameraFile, IngestOptions, Intrinsics, Manifest, Split};
use fusedview::imaging::save_rgb;
use fusedview::linalg::{Rigid, Vec3};
use ndarray::Array3;
use std::path::Path;

fn raw_set(dir: &Path, n: usize) -> std::path::PathBuf {
    let mut frames = Vec::new();
    for i in 0..n {
        let img = Array3::from_shape_fn((60, 80, 3), |(r, c, k)| ((r + c + k + i) % 11) as f64 / 10.0);
        let name = format!("img_{i:03}.png");
        save_rgb(&dir.join(&name), img.view()).unwrap();
        let eye = Vec3::new(i as f64 * 0.1, 0.0, -3.0);
        frames.push(CameraEntry {
            file: name,
            c2w: Rigid::look_at(eye, Vec3::zero(), Vec3::new(0.0, -1.0, 0.0)).0,
        });
    }
    let cams = CameraFile {
        intrinsics: Intrinsics {
            fx: 70.0,
            fy: 70.0,
            cx: 40.0,
            cy: 30.0,
            width: 80,
            height: 60,
        },
        near: 1.0,
        far: 5.0,
        frames,
    };
    let path = dir.join("cameras.json");
    std::fs::write(&path, serde_json::to_string(&cams).unwrap()).unwrap();
    path
}

#[test]
fn stride_keeps_every_kth_frame_with_normalized_times() {
    let raw = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cams = raw_set(raw.path(), 21);
    let opts = IngestOptions {
        stride: 4,
        target: 32,
        ..IngestOptions::default()
    };
    let m = ingest(raw.path(), &cams, out.path(), opts).unwrap();
    assert_eq!(m.frames.len(), 6);
    let times: Vec<f64> = m.frames.iter().map(|f| f.time).collect();
    assert_eq!(times, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
    assert_eq!(m.indices(Split::Test).len(), 1);
    assert_eq!((m.intrinsics.width, m.intrinsics.height), (32, 32));
    let reloaded = Manifest::load(&out.path().join("manifest.json")).unwrap();
    assert_eq!(reloaded, m);
    reloaded.validate(Some(out.path())).unwrap();
}

#[test]
fn reingest_is_idempotent() {
    let raw = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cams = raw_set(raw.path(), 8);
    let opts = IngestOptions {
        target: 32,
        ..IngestOptions::default()
    };
    let first = ingest(raw.path(), &cams, out.path(), opts).unwrap();
    let bytes = std::fs::read(out.path().join(&first.frames[3].image)).unwrap();
    let second = ingest(raw.path(), &cams, out.path(), opts).unwrap();
    assert_eq!(first, second);
    assert_eq!(std::fs::read(out.path().join(&second.frames[3].image)).unwrap(), bytes);
}

#[test]
fn missing_pose_is_an_error() {
    let raw = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cams = raw_set(raw.path(), 3);
    let extra = Array3::<f64>::zeros((60, 80, 3));
    save_rgb(&raw.path().join("zzz.png"), extra.view()).unwrap();
    assert!(ingest(raw.path(), &cams, out.path(), IngestOptions::default()).is_err());
}
