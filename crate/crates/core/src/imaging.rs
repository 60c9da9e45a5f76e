//! Image files and layout conversions. In memory, images are `H × W × 3`
//! arrays in [0, 1]; masks are `H × W`.

use std::io::Write;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{io_err, Error, Result};
use crate::Real;

pub fn load_rgb<T: Real>(path: &Path) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        T::lit(img.get_pixel(c as u32, r as u32)[k] as f64 / 255.0)
    }))
}

pub fn to_rgb8<T: Real>(rgb: ArrayView3<T>) -> RgbImage {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        image::Rgb([0, 1, 2].map(|k| quantize(rgb[[r as usize, c as usize, k]])))
    })
}

fn quantize<T: Real>(v: T) -> u8 {
    let v = v.to_f64_lossy();
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Writes an 8-bit PNG, clamping to [0, 1]. Parent directories are created.
pub fn save_rgb<T: Real>(path: &Path, rgb: ArrayView3<T>) -> Result<()> {
    ensure_parent(path)?;
    to_rgb8(rgb).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mask<T: Real>(path: &Path) -> Result<Array2<T>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        T::lit(img.get_pixel(c as u32, r as u32)[0] as f64 / 255.0)
    }))
}

pub fn save_mask<T: Real>(path: &Path, mask: &Array2<T>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([quantize(mask[[r as usize, c as usize]])])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Single-channel little-endian PFM (bottom row first).
pub fn save_pfm<T: Real>(path: &Path, data: &Array2<T>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = data.dim();
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for r in (0..h).rev() {
        for c in 0..w {
            buf.extend_from_slice(&data[[r, c]].to_f32_lossy().to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn load_pfm(path: &Path) -> Result<Array2<f32>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let bad = || Error::InvalidInput(format!("{}: malformed PFM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "Pf" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let scale: f32 = fields[3].parse().map_err(|_| bad())?;
    let body = bytes.get(pos..pos + 4 * w * h).ok_or_else(bad)?;
    let mut out = Array2::zeros((h, w));
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        out[[h - 1 - i / w, i % w]] = v;
    }
    Ok(out)
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

/// `H × W × 3` in [0, 1] to `1 × 3 × H × W` in [−1, 1].
pub fn to_signed_chw<T: Real>(rgb: ArrayView3<T>) -> Array4<T> {
    let two = T::lit(2.0);
    rgb.permuted_axes([2, 0, 1])
        .mapv(|v| v * two - T::one())
        .insert_axis(Axis(0))
}

/// Inverse of [`to_signed_chw`] for one batch item, clamped to [0, 1].
pub fn from_signed_chw<T: Real>(x: &Array4<T>, item: usize) -> Array3<T> {
    let half = T::lit(0.5);
    x.index_axis(Axis(0), item)
        .permuted_axes([1, 2, 0])
        .mapv(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
}

/// Bilinear resize with pixel-center alignment.
pub fn resize_bilinear<T: Real>(img: ArrayView3<T>, out_h: usize, out_w: usize) -> Array3<T> {
    let (h, w, ch) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::zeros((out_h, out_w, ch));
    for r in 0..out_h {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = T::lit(fy - y0 as f64);
        for c in 0..out_w {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = T::lit(fx - x0 as f64);
            for k in 0..ch {
                let top = img[[y0, x0, k]] * (T::one() - ax) + img[[y0, x1, k]] * ax;
                let bot = img[[y1, x0, k]] * (T::one() - ax) + img[[y1, x1, k]] * ax;
                out[[r, c, k]] = top * (T::one() - ay) + bot * ay;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.png");
        let img = Array3::from_shape_fn((5, 7, 3), |(r, c, k)| ((r * 31 + c * 7 + k * 50) % 256) as f64 / 255.0);
        save_rgb(&p, img.view()).unwrap();
        let back: Array3<f64> = load_rgb(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let d = Array2::from_shape_fn((3, 4), |(r, c)| r as f32 * 1.5 - c as f32);
        save_pfm(&p, &d).unwrap();
        assert_eq!(load_pfm(&p).unwrap(), d);
    }

    #[test]
    fn signed_layout_round_trip() {
        let img = Array3::from_shape_fn((2, 3, 3), |(r, c, k)| (r + c + k) as f64 / 8.0);
        let x = to_signed_chw(img.view());
        assert_eq!(x.shape(), &[1, 3, 2, 3]);
        assert_eq!(x[[0, 2, 1, 0]], 2.0 * 3.0 / 8.0 - 1.0);
        assert_eq!(from_signed_chw(&x, 0), img);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Array3::from_shape_fn((4, 6, 3), |(r, c, k)| (r * 6 + c + k) as f64);
        assert_eq!(resize_bilinear(img.view(), 4, 6), img);
        let flat = Array3::from_elem((8, 8, 3), 0.25);
        assert!(resize_bilinear(flat.view(), 3, 5).iter().all(|&v| v == 0.25));
    }
}
