//! Image quality metrics on [0, 1] images and directory-level evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::warn;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

use crate::error::{invalid, io_err, Error, Result};
use crate::imaging::{load_rgb, save_rgb};
use crate::Real;

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn mse<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(invalid("empty image"));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR over pixels where `mask` is set.
pub fn masked_psnr<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>, mask: ArrayView2<bool>) -> Result<f64> {
    same_shape(a, b)?;
    if mask.dim() != (a.shape()[0], a.shape()[1]) {
        return Err(Error::ShapeMismatch("mask does not match image".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            for k in 0..a.shape()[2] {
                let d = a[[r, c, k]].to_f64_lossy() - b[[r, c, k]].to_f64_lossy();
                sum += d * d;
            }
            n += a.shape()[2];
        }
    }
    if n == 0 {
        return Err(invalid("mask is empty"));
    }
    Ok(psnr_from_mse(sum / n as f64))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over valid positions only.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let horiz = Array2::from_shape_fn((h, ow), |(r, c)| (0..n).map(|i| k[i] * x[[r, c + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(r, c)| (0..n).map(|i| k[i] * horiz[[r + i, c]]).sum::<f64>())
}

/// Mean structural similarity over valid 11×11 Gaussian windows, averaged
/// over channels.
pub fn ssim<T: Real>(a: ArrayView3<T>, b: ArrayView3<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ch) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..ch {
        let x = a.index_axis(Axis(2), c).mapv(|v| v.to_f64_lossy());
        let y = b.index_axis(Axis(2), c).mapv(|v| v.to_f64_lossy());
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let sxx = filter_valid(&(&x * &x), &k);
        let syy = filter_valid(&(&y * &y), &k);
        let sxy = filter_valid(&(&x * &y), &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (r, cc) = (i / mx.ncols(), i % mx.ncols());
            let (ux, uy) = (mx[[r, cc]], my[[r, cc]]);
            let vx = sxx[[r, cc]] - ux * ux;
            let vy = syy[[r, cc]] - uy * uy;
            let cov = sxy[[r, cc]] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / ch as f64)
}

/// 3×3 blur with kernel `[1,2,1]/4` per axis and mirror-reflected edges.
pub fn gaussian_blur_3x3<T: Real>(img: ArrayView3<T>) -> Array3<T> {
    let (h, w, ch) = img.dim();
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            0
        } else if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    // (left + right)·¼ + center·½ is symmetric in its neighbours, so the
    // blur commutes exactly with flips
    let (q, half) = (T::lit(0.25), T::lit(0.5));
    let horiz = Array3::from_shape_fn((h, w, ch), |(r, c, z)| {
        let at = |d: isize| img[[r, reflect(c as isize + d, w), z]];
        (at(-1) + at(1)) * q + at(0) * half
    });
    Array3::from_shape_fn((h, w, ch), |(r, c, z)| {
        let at = |d: isize| horiz[[reflect(r as isize + d, h), c, z]];
        (at(-1) + at(1)) * q + at(0) * half
    })
}

/// An extra metric computed on each image pair (for example LPIPS).
pub trait MetricPlugin: Sync {
    fn name(&self) -> &str;
    fn measure(&self, pred: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<f64>;
}

/// Runs `program <pred.png> <gt.png>` and parses a single number from stdout.
pub struct ExternalMetric {
    pub name: String,
    pub program: PathBuf,
}

impl MetricPlugin for ExternalMetric {
    fn name(&self) -> &str {
        &self.name
    }

    fn measure(&self, pred: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<f64> {
        let dir = tempfile::tempdir().map_err(io_err(std::env::temp_dir()))?;
        let (p, g) = (dir.path().join("pred.png"), dir.path().join("gt.png"));
        save_rgb(&p, pred)?;
        save_rgb(&g, gt)?;
        let out = Command::new(&self.program)
            .arg(&p)
            .arg(&g)
            .output()
            .map_err(io_err(&self.program))?;
        let text = String::from_utf8_lossy(&out.stdout);
        if !out.status.success() {
            return Err(invalid(format!(
                "metric plugin `{}` exited with {}",
                self.program.display(),
                out.status
            )));
        }
        text.trim()
            .parse()
            .map_err(|_| invalid(format!("metric plugin printed `{}`, expected a number", text.trim())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR and SSIM after blurring the prediction.
    pub blurred: Option<(f64, f64)>,
    pub plugins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub plugin_names: Vec<String>,
    pub rows: Vec<EvalRow>,
    /// Files present in only one directory.
    pub unmatched: Vec<String>,
}

impl EvalTable {
    pub fn mean(&self) -> Option<EvalRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: &dyn Fn(&EvalRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(EvalRow {
            name: "mean".into(),
            psnr: avg(&|r| r.psnr),
            ssim: avg(&|r| r.ssim),
            blurred: self.rows[0]
                .blurred
                .map(|_| (avg(&|r| r.blurred.unwrap().0), avg(&|r| r.blurred.unwrap().1))),
            plugins: (0..self.plugin_names.len()).map(|i| avg(&|r| r.plugins[i])).collect(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::imaging::ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["image".to_string(), "psnr".into(), "ssim".into()];
        let blur = self.rows.first().is_some_and(|r| r.blurred.is_some());
        if blur {
            header.extend(["psnr_blur".into(), "ssim_blur".into()]);
        }
        header.extend(self.plugin_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for row in self.rows.iter().chain(self.mean().as_ref()) {
            let mut rec = vec![row.name.clone(), format!("{:.4}", row.psnr), format!("{:.4}", row.ssim)];
            if let Some((p, s)) = row.blurred {
                rec.extend([format!("{p:.4}"), format!("{s:.4}")]);
            }
            rec.extend(row.plugins.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.insert(name);
        }
    }
    Ok(names)
}

/// Scores every filename present in both directories.
pub fn evaluate_set(pred_dir: &Path, gt_dir: &Path, plugins: &[&dyn MetricPlugin], blur: bool) -> Result<EvalTable> {
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    let unmatched: Vec<String> = pred.symmetric_difference(&gt).cloned().collect();
    if !unmatched.is_empty() {
        warn!("unmatched files skipped: {unmatched:?}");
    }
    let common: Vec<&String> = pred.intersection(&gt).collect();
    let rows = common
        .par_iter()
        .map(|name| {
            let p: Array3<f32> = load_rgb(&pred_dir.join(name))?;
            let g: Array3<f32> = load_rgb(&gt_dir.join(name))?;
            let blurred = if blur {
                let b = gaussian_blur_3x3(p.view());
                Some((psnr(b.view(), g.view())?, ssim(b.view(), g.view())?))
            } else {
                None
            };
            Ok(EvalRow {
                name: (*name).clone(),
                psnr: psnr(p.view(), g.view())?,
                ssim: ssim(p.view(), g.view())?,
                blurred,
                plugins: plugins
                    .iter()
                    .map(|m| m.measure(p.view(), g.view()))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable {
        plugin_names: plugins.iter().map(|p| p.name().to_string()).collect(),
        rows,
        unmatched,
    })
}
