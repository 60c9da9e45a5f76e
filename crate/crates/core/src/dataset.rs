//! Capture manifests: loading, validation, train/test splitting and ingest
//! of raw frame folders.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::Camera;
use crate::imaging::{load_rgb, resize_bilinear, save_rgb};
use crate::linalg::Rigid;
use crate::trainer::TrainingFrames;
use crate::Real;

pub const MANIFEST_SCHEMA: u32 = 1;
/// Held-out fraction used throughout.
pub const TEST_FRACTION: f64 = 0.16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square center crop of side `min(width, height)` (integer offset),
    /// followed by a resize to `target × target`.
    pub fn crop_resize(&self, target: usize) -> (Self, (usize, usize, usize)) {
        let side = self.width.min(self.height);
        let (ox, oy) = ((self.width - side) / 2, (self.height - side) / 2);
        let s = target as f64 / side as f64;
        (
            Self {
                fx: self.fx * s,
                fy: self.fy * s,
                cx: (self.cx - ox as f64) * s,
                cy: (self.cy - oy as f64) * s,
                width: target,
                height: target,
            },
            (ox, oy, side),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    /// Path relative to the manifest's folder.
    #[serde(alias = "file")]
    pub image: String,
    pub time: f64,
    pub c2w: [[f64; 4]; 4],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    pub fn camera<T: Real>(&self, index: usize) -> Camera<T> {
        let f = &self.frames[index];
        let k = &self.intrinsics;
        Camera {
            fx: T::lit(k.fx),
            fy: T::lit(k.fy),
            cx: T::lit(k.cx),
            cy: T::lit(k.cy),
            width: k.width,
            height: k.height,
            c2w: Rigid(f.c2w).cast(),
            near: T::lit(self.near),
            far: T::lit(self.far),
            time: T::lit(f.time),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| self.frames[i].split == split)
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    /// Structural checks; with `root`, also that every image exists with
    /// the declared size.
    pub fn validate(&self, root: Option<&Path>) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA {
            return Err(invalid(format!("unsupported manifest schema {}", self.schema_version)));
        }
        let k = &self.intrinsics;
        if k.width == 0 || k.height == 0 || !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(invalid("intrinsics must have positive size and focal lengths"));
        }
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(invalid("need 0 < near < far"));
        }
        let mut prev = f64::NEG_INFINITY;
        for f in &self.frames {
            if !(0.0..=1.0).contains(&f.time) || f.time < prev {
                return Err(invalid(format!(
                    "frame `{}`: times must be nondecreasing in [0, 1]",
                    f.id
                )));
            }
            prev = f.time;
            let pose = Rigid(f.c2w);
            if pose.orthonormality_error() > 1e-4 || f.c2w[3] != [0.0, 0.0, 0.0, 1.0] {
                return Err(invalid(format!("frame `{}`: c2w is not a rigid transform", f.id)));
            }
        }
        if let Some(frac) = self.test_fraction {
            let want = test_count(self.frames.len(), frac)?;
            let got = self.indices(Split::Test).len();
            if got != want {
                return Err(invalid(format!("{got} test frames tagged, expected {want}")));
            }
        }
        if let Some(root) = root {
            for f in &self.frames {
                let path = root.join(&f.image);
                let (w, h) = image::image_dimensions(&path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                if (w as usize, h as usize) != (k.width, k.height) {
                    return Err(Error::ShapeMismatch(format!(
                        "{} is {w}×{h}, manifest says {}×{}",
                        path.display(),
                        k.width,
                        k.height
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.validate(None)?;
        Ok(m)
    }

    /// Atomic write (temporary file and rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    pub fn load_image<T: Real>(&self, root: &Path, index: usize) -> Result<Array3<T>> {
        load_rgb(&root.join(&self.frames[index].image))
    }

    pub fn training_frames<T: Real>(&self, root: &Path, split: Split) -> Result<TrainingFrames<T>> {
        let idx = self.indices(split);
        let images = idx
            .par_iter()
            .map(|&i| self.load_image(root, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingFrames {
            cameras: idx.iter().map(|&i| self.camera(i)).collect(),
            images,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::imaging::ensure_parent(path)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// `max(1, round(fraction · n))`.
pub fn test_count(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("test fraction {fraction} outside (0, 1)")));
    }
    if n < 2 {
        return Err(invalid("need at least two frames to split"));
    }
    Ok(((fraction * n as f64).round() as usize).clamp(1, n - 1))
}

/// Evenly strided test indices: the center of each of `count` equal runs.
pub fn split_indices(n: usize, fraction: f64) -> Result<Vec<usize>> {
    let count = test_count(n, fraction)?;
    Ok((0..count).map(|k| ((2 * k + 1) * n) / (2 * count)).collect())
}

pub fn split(manifest: &Manifest, fraction: f64) -> Result<Manifest> {
    let test = split_indices(manifest.frames.len(), fraction)?;
    let mut out = manifest.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        f.split = if test.binary_search(&i).is_ok() {
            Split::Test
        } else {
            Split::Train
        };
    }
    out.test_fraction = Some(fraction);
    Ok(out)
}

/// Camera file accepted by [`ingest`]: shared intrinsics plus one pose per
/// source image. A manifest is also a valid camera file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraFile {
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    pub frames: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    #[serde(alias = "image")]
    pub file: String,
    pub c2w: [[f64; 4]; 4],
}

impl CameraFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Pose for an image, matched on its file name.
    fn pose(&self, name: &str) -> Option<[[f64; 4]; 4]> {
        self.frames
            .iter()
            .find(|e| Path::new(&e.file).file_name().is_some_and(|f| f == name))
            .map(|e| e.c2w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub stride: usize,
    pub target: usize,
    pub test_fraction: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            target: 512,
            test_fraction: TEST_FRACTION,
        }
    }
}

/// Keeps every `stride`-th image of `raw_dir` (sorted by name), center-crops
/// and resizes it, and writes `images/` plus `manifest.json` to `out_dir`.
pub fn ingest(raw_dir: &Path, camera_file: &Path, out_dir: &Path, opts: IngestOptions) -> Result<Manifest> {
    if opts.stride == 0 || opts.target == 0 {
        return Err(invalid("stride and target must be ≥ 1"));
    }
    let cams = CameraFile::load(camera_file)?;
    let mut names: Vec<String> = std::fs::read_dir(raw_dir)
        .map_err(io_err(raw_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    let kept: Vec<String> = names.into_iter().step_by(opts.stride).collect();
    if kept.len() < 2 {
        return Err(invalid(format!("{} frames kept; need at least two", kept.len())));
    }
    let missing: Vec<String> = kept.iter().filter(|n| cams.pose(n).is_none()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingCamera(missing));
    }
    let (intr, (ox, oy, side)) = cams.intrinsics.crop_resize(opts.target);
    let n = kept.len();
    let frames: Vec<FrameEntry> = kept
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let img: Array3<f32> = load_rgb(&raw_dir.join(name))?;
            let (h, w, _) = img.dim();
            if (w, h) != (cams.intrinsics.width, cams.intrinsics.height) {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {w}×{h}, camera file says {}×{}",
                    cams.intrinsics.width, cams.intrinsics.height
                )));
            }
            let crop = img.slice(ndarray::s![oy..oy + side, ox..ox + side, ..]);
            let out = resize_bilinear(crop, opts.target, opts.target);
            let id = Path::new(name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{i:05}"));
            let rel = format!("images/{id}.png");
            save_rgb(&out_dir.join(&rel), out.view())?;
            Ok(FrameEntry {
                id,
                image: rel,
                time: i as f64 / (n - 1) as f64,
                c2w: cams.pose(name).expect("checked above"),
                split: Split::Train,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = split(
        &Manifest {
            schema_version: MANIFEST_SCHEMA,
            intrinsics: intr,
            near: cams.near,
            far: cams.far,
            test_fraction: None,
            frames,
        },
        opts.test_fraction,
    )?;
    manifest.validate(Some(out_dir))?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Folder holding a manifest file.
pub fn manifest_root(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vec3;

    #[test]
    fn split_counts_and_disjointness() {
        assert_eq!(split_indices(100, 0.16).unwrap().len(), 16);
        assert_eq!(split_indices(62, 0.16).unwrap().len(), 10);
        assert_eq!(split_indices(5, 0.16).unwrap().len(), 1);
        let idx = split_indices(100, 0.16).unwrap();
        let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| g == 6 || g == 7), "{gaps:?}");
        assert!(split_indices(10, 0.0).is_err());
        assert!(split_indices(10, 1.0).is_err());
    }

    #[test]
    fn intrinsics_crop_example() {
        let k = Intrinsics {
            fx: 1500.0,
            fy: 1500.0,
            cx: 960.0,
            cy: 540.0,
            width: 1920,
            height: 1080,
        };
        let (out, (ox, oy, side)) = k.crop_resize(512);
        assert_eq!((ox, oy, side), (420, 0, 1080));
        let s = 512.0 / 1080.0;
        assert!((out.cx - (960.0 - 420.0) * s).abs() < 1e-12);
        assert!((out.cx - 256.0).abs() < 1e-9 && (out.cy - 256.0).abs() < 1e-9);

        // projection before and after, through the geometric pixel map
        let cam = |k: &Intrinsics| Camera::<f64> {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            c2w: Rigid::identity(),
            near: 0.1,
            far: 10.0,
            time: 0.0,
        };
        let p = Vec3::new(0.3, -0.2, 2.5);
        let (u0, v0, _) = cam(&k).project(p);
        let (u1, v1, _) = cam(&out).project(p);
        assert!((u1 - (u0 - ox as f64) * s).abs() < 1e-3);
        assert!((v1 - (v0 - oy as f64) * s).abs() < 1e-3);
    }
}
