//! Face texture path: piecewise-affine extraction into a UV atlas, weighted
//! stitching of partial atlases, z-buffered rasterization of the textured
//! mesh, and the paste overlay.
//!
//! UV convention: `u` runs along atlas columns and `v` along rows, so texel
//! `(row, col)` of an `S × S` atlas is centered at `((col + ½)/S, (row + ½)/S)`.
//! Image coordinates put pixel `(row, col)` at `(col + ½, row + ½)`.

use std::collections::VecDeque;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::Camera;
use crate::imaging::{load_mask, load_pfm, load_rgb, save_mask, save_pfm, save_rgb};
use crate::linalg::Vec3;
use crate::Real;

/// Texels over which a partial atlas's weight ramps up from its mask edge.
pub const FEATHER_TEXELS: usize = 8;

const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFit {
    pub view_id: String,
    /// Per-vertex image positions in pixels.
    pub projected: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    /// Vertex positions for this view in world coordinates, when the face
    /// moved relative to `MeshFit::vertices`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posed_vertices: Option<Vec<[f64; 3]>>,
    /// Camera center in world coordinates; enables the view-angle weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_center: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshFit {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
    #[serde(default)]
    pub views: Vec<ViewFit>,
}

impl MeshFit {
    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        if self.uv.len() != v {
            return Err(invalid(format!("{} uv entries for {v} vertices", self.uv.len())));
        }
        if self.vertices.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite vertex"));
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&k| k >= v) {
                return Err(invalid(format!("face {i} references a vertex ≥ {v}")));
            }
            let uv = f.map(|k| self.uv[k]);
            if signed_area(&uv).abs() <= AREA_EPS {
                return Err(Error::DegenerateTriangle(format!("face {i} has zero UV area")));
            }
        }
        for view in &self.views {
            if view.projected.len() != v || view.visible.len() != v {
                return Err(invalid(format!(
                    "view `{}` does not cover all {v} vertices",
                    view.view_id
                )));
            }
            if view.posed_vertices.as_ref().is_some_and(|p| p.len() != v) {
                return Err(invalid(format!("view `{}` posed vertex count differs", view.view_id)));
            }
            for (i, f) in self.faces.iter().enumerate() {
                if f.iter().all(|&k| view.visible[k]) && signed_area(&f.map(|k| view.projected[k])).abs() <= 0.0 {
                    return Err(Error::DegenerateTriangle(format!(
                        "visible face {i} has zero projected area in view `{}`",
                        view.view_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let fit: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fit.validate()?;
        Ok(fit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::imaging::ensure_parent(path)?;
        let text = serde_json::to_string(self).expect("mesh serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn view_index(&self, view_id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.view_id == view_id)
    }

    /// Vertices for a view: its posed positions if present, else the base mesh.
    pub fn positions(&self, view: Option<usize>) -> &[[f64; 3]] {
        view.and_then(|i| self.views[i].posed_vertices.as_deref())
            .unwrap_or(&self.vertices)
    }

    /// Projects `positions` through `camera` into a new per-view entry. A
    /// vertex is visible when it lies in front of the camera and its
    /// area-weighted normal faces it.
    pub fn project_view<T: Real>(
        &self,
        view_id: &str,
        positions: Option<Vec<[f64; 3]>>,
        camera: &Camera<T>,
    ) -> ViewFit {
        let cam = camera.cast::<f64>();
        let pos = positions.as_deref().unwrap_or(&self.vertices);
        let normals = vertex_normals(pos, &self.faces);
        let eye = cam.center();
        let mut projected = Vec::with_capacity(pos.len());
        let mut visible = Vec::with_capacity(pos.len());
        for (p, n) in pos.iter().zip(&normals) {
            let (u, v, z) = cam.project(Vec3(*p));
            projected.push([u, v]);
            visible.push(z > 0.0 && n.dot(&(eye - Vec3(*p))) > 0.0);
        }
        ViewFit {
            view_id: view_id.to_string(),
            projected,
            visible,
            posed_vertices: positions,
            camera_center: Some(eye.0),
        }
    }
}

fn vertex_normals(pos: &[[f64; 3]], faces: &[[usize; 3]]) -> Vec<Vec3<f64>> {
    let mut n = vec![Vec3::zero(); pos.len()];
    for f in faces {
        let [a, b, c] = f.map(|k| Vec3(pos[k]));
        let fn_ = (b - a).cross(&(c - a));
        for &k in f {
            n[k] = n[k] + fn_;
        }
    }
    n.iter().map(|v| v.normalized()).collect()
}

fn signed_area(t: &[[f64; 2]; 3]) -> f64 {
    0.5 * edge_fn(t[0], t[1], t[2])
}

/// Edge function evaluated with the endpoints in a fixed order, so the two
/// triangles sharing an edge see exactly opposite values.
#[inline]
fn edge_fn(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let (p0, p1, sign) = if (a[0], a[1]) <= (b[0], b[1]) {
        (a, b, 1.0)
    } else {
        (b, a, -1.0)
    };
    sign * ((p1[0] - p0[0]) * (p[1] - p0[1]) - (p1[1] - p0[1]) * (p[0] - p0[0]))
}

/// Top-left ownership of an edge `a → b` of a positively oriented triangle
/// (y down).
#[inline]
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// 2×3 affine map `A` with `A·[x, y, 1]ᵀ = dst` for each source vertex.
pub fn affine_from_triangles(src: [[f64; 2]; 3], dst: [[f64; 2]; 3]) -> Result<[[f64; 3]; 2]> {
    let e1 = [src[1][0] - src[0][0], src[1][1] - src[0][1]];
    let e2 = [src[2][0] - src[0][0], src[2][1] - src[0][1]];
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    if det.abs() <= AREA_EPS || !det.is_finite() {
        return Err(Error::DegenerateTriangle(format!("source triangle {src:?}")));
    }
    // inverse of [e1 e2] (columns)
    let inv = [[e2[1] / det, -e2[0] / det], [-e1[1] / det, e1[0] / det]];
    let mut m = [[0.0; 3]; 2];
    for k in 0..2 {
        let f1 = dst[1][k] - dst[0][k];
        let f2 = dst[2][k] - dst[0][k];
        let a = f1 * inv[0][0] + f2 * inv[1][0];
        let b = f1 * inv[0][1] + f2 * inv[1][1];
        m[k] = [a, b, dst[0][k] - a * src[0][0] - b * src[0][1]];
    }
    Ok(m)
}

#[inline]
pub fn apply_affine(m: &[[f64; 3]; 2], p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

/// Screen-space triangle prepared for coverage tests.
#[derive(Debug, Clone, Copy)]
struct RasterTri {
    v: [[f64; 2]; 3],
    inv_area2: f64,
    owns: [bool; 3],
    rows: (usize, usize),
    cols: (usize, usize),
}

impl RasterTri {
    /// `None` for zero-area or fully off-grid triangles.
    fn new(mut v: [[f64; 2]; 3], h: usize, w: usize) -> Option<(Self, bool)> {
        let mut area2 = edge_fn(v[0], v[1], v[2]);
        if !area2.is_finite() || area2 == 0.0 {
            return None;
        }
        let flipped = area2 < 0.0;
        if flipped {
            v.swap(1, 2);
            area2 = -area2;
        }
        let lo = |k: usize| v.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| v.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = |a: f64, b: f64, n: usize| -> Option<(usize, usize)> {
            let first = (a - 0.5).ceil().max(0.0);
            let last = (b - 0.5).floor().min(n as f64 - 1.0);
            (first <= last).then(|| (first as usize, last as usize + 1))
        };
        let rows = span(lo(1), hi(1), h)?;
        let cols = span(lo(0), hi(0), w)?;
        Some((
            Self {
                v,
                inv_area2: 1.0 / area2,
                owns: [owns_edge(v[1], v[2]), owns_edge(v[2], v[0]), owns_edge(v[0], v[1])],
                rows,
                cols,
            },
            flipped,
        ))
    }

    /// Barycentric weights of `p` when covered.
    #[inline]
    fn cover(&self, p: [f64; 2]) -> Option<[f64; 3]> {
        let [a, b, c] = self.v;
        let e = [edge_fn(b, c, p), edge_fn(c, a, p), edge_fn(a, b, p)];
        for k in 0..3 {
            if e[k] < 0.0 || (e[k] == 0.0 && !self.owns[k]) {
                return None;
            }
        }
        Some(e.map(|x| x * self.inv_area2))
    }
}

/// Row-parallel coverage over a grid. For every covered cell, `shade`
/// returns a priority and value; the highest priority wins, ties go to the
/// lower triangle index.
fn rasterize<R: Send + Clone>(
    h: usize,
    w: usize,
    tris: &[(usize, RasterTri)],
    shade: impl Fn(usize, [f64; 3], (usize, usize)) -> Option<(f64, R)> + Sync,
) -> Vec<Option<R>> {
    let mut out: Vec<Option<R>> = vec![None; h * w];
    out.par_chunks_mut(w.max(1)).enumerate().for_each(|(r, row)| {
        let mut best = vec![f64::NEG_INFINITY; w];
        let y = r as f64 + 0.5;
        for &(id, ref t) in tris {
            if r < t.rows.0 || r >= t.rows.1 {
                continue;
            }
            for c in t.cols.0..t.cols.1 {
                let Some(bary) = t.cover([c as f64 + 0.5, y]) else {
                    continue;
                };
                if let Some((prio, val)) = shade(id, bary, (r, c)) {
                    if prio > best[c] {
                        best[c] = prio;
                        row[c] = Some(val);
                    }
                }
            }
        }
    });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureAtlas<T> {
    /// `S × S × 3` colors in [0, 1]; zero where unwritten.
    pub pixels: Array3<T>,
    /// 1 on written texels.
    pub mask: Array2<T>,
    pub weight: Array2<T>,
}

impl<T: Real> TextureAtlas<T> {
    pub fn empty(size: usize) -> Result<Self> {
        if !size.is_power_of_two() {
            return Err(invalid(format!("atlas size {size} is not a power of two")));
        }
        Ok(Self {
            pixels: Array3::zeros((size, size, 3)),
            mask: Array2::zeros((size, size)),
            weight: Array2::zeros((size, size)),
        })
    }

    pub fn size(&self) -> usize {
        self.mask.nrows()
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m > T::zero()).count()
    }

    /// Color at `uv`, interpolating only over written texels.
    pub fn sample(&self, uv: [f64; 2]) -> Option<[T; 3]> {
        let s = self.size();
        let x = (uv[0] * s as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let y = (uv[1] * s as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(s - 1), (y0 + 1).min(s - 1));
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let taps = [
            (y0, x0, (1.0 - ax) * (1.0 - ay)),
            (y0, x1, ax * (1.0 - ay)),
            (y1, x0, (1.0 - ax) * ay),
            (y1, x1, ax * ay),
        ];
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for (r, c, wt) in taps {
            let m = self.mask[[r, c]].to_f64_lossy();
            if m > 0.0 && wt > 0.0 {
                let w = wt * m;
                wsum += w;
                for k in 0..3 {
                    acc[k] += w * self.pixels[[r, c, k]].to_f64_lossy();
                }
            }
        }
        (wsum > 0.0).then(|| acc.map(|v| T::lit(v / wsum)))
    }

    /// Writes `<stem>.png`, `<stem>_mask.png` and `<stem>_weight.pfm`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_rgb(&dir.join(format!("{stem}.png")), self.pixels.view())?;
        save_mask(&dir.join(format!("{stem}_mask.png")), &self.mask)?;
        save_pfm(&dir.join(format!("{stem}_weight.pfm")), &self.weight)
    }

    /// Inverse of [`Self::save`]; without a weight file the mask is the weight.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let pixels: Array3<T> = load_rgb(&dir.join(format!("{stem}.png")))?;
        let mask: Array2<T> = load_mask(&dir.join(format!("{stem}_mask.png")))?;
        let wpath = dir.join(format!("{stem}_weight.pfm"));
        let weight = if wpath.exists() {
            load_pfm(&wpath)?.mapv(|v| T::lit(v as f64))
        } else {
            mask.clone()
        };
        let s = mask.nrows();
        if pixels.dim() != (s, s, 3) || mask.ncols() != s || weight.dim() != (s, s) || !s.is_power_of_two() {
            return Err(Error::ShapeMismatch(format!("atlas `{stem}` has inconsistent sizes")));
        }
        Ok(Self { pixels, mask, weight })
    }
}

fn sample_image<T: Real>(img: ArrayView3<T>, p: [f64; 2]) -> [T; 3] {
    let (h, w, _) = img.dim();
    let x = (p[0] - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (p[1] - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (ax, ay) = (T::lit(x - x0 as f64), T::lit(y - y0 as f64));
    let one = T::one();
    [0, 1, 2].map(|k| {
        let top = img[[y0, x0, k]] * (one - ax) + img[[y0, x1, k]] * ax;
        let bot = img[[y1, x0, k]] * (one - ax) + img[[y1, x1, k]] * ax;
        top * (one - ay) + bot * ay
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub triangles_used: usize,
    pub skipped_degenerate: usize,
    pub skipped_back_facing: usize,
}

/// Fills the atlas texels of every fully visible triangle by mapping texel
/// centers into the image with the triangle's affine map.
pub fn extract_texture<T: Real>(
    image: ArrayView3<T>,
    mesh: &MeshFit,
    view_index: usize,
    atlas_size: usize,
) -> Result<(TextureAtlas<T>, ExtractStats)> {
    let view = mesh
        .views
        .get(view_index)
        .ok_or_else(|| invalid(format!("view index {view_index} out of range")))?;
    let mut atlas = TextureAtlas::empty(atlas_size)?;
    let s = atlas_size as f64;
    let pos = mesh.positions(Some(view_index));
    let mut stats = ExtractStats::default();
    // (raster triangle id, affine uv-texel → image, view weight)
    let mut maps = Vec::new();
    let mut tris = Vec::new();
    for f in &mesh.faces {
        if !f.iter().all(|&k| view.visible[k]) {
            continue;
        }
        let img_tri = f.map(|k| view.projected[k]);
        if signed_area(&img_tri).abs() <= AREA_EPS {
            stats.skipped_degenerate += 1;
            continue;
        }
        let cosine = match view.camera_center {
            Some(eye) => {
                let [a, b, c] = f.map(|k| Vec3(pos[k]));
                let n = (b - a).cross(&(c - a)).normalized();
                let centroid = (a + b + c) * (1.0 / 3.0);
                n.dot(&(Vec3(eye) - centroid).normalized())
            }
            None => 1.0,
        };
        if cosine <= 0.0 {
            stats.skipped_back_facing += 1;
            continue;
        }
        let uv_tri = f.map(|k| [mesh.uv[k][0] * s, mesh.uv[k][1] * s]);
        let affine = affine_from_triangles(uv_tri, img_tri)?;
        if let Some((t, _)) = RasterTri::new(uv_tri, atlas_size, atlas_size) {
            tris.push((maps.len(), t));
            maps.push((affine, cosine));
        }
        stats.triangles_used += 1;
    }
    let cells = rasterize(atlas_size, atlas_size, &tris, |id, _, (r, c)| {
        let (affine, cosine) = &maps[id];
        let p = apply_affine(affine, [c as f64 + 0.5, r as f64 + 0.5]);
        Some((-(id as f64), (sample_image(image, p), *cosine)))
    });
    for (i, cell) in cells.into_iter().enumerate() {
        if let Some((rgb, wgt)) = cell {
            let (r, c) = (i / atlas_size, i % atlas_size);
            for k in 0..3 {
                atlas.pixels[[r, c, k]] = rgb[k];
            }
            atlas.mask[[r, c]] = T::one();
            atlas.weight[[r, c]] = T::lit(wgt);
        }
    }
    let dist = edge_distance(&atlas.mask);
    ndarray::Zip::from(&mut atlas.weight).and(&dist).for_each(|w, &d| {
        let ramp = (d as f64 / FEATHER_TEXELS as f64).min(1.0);
        *w *= T::lit(ramp);
    });
    Ok((atlas, stats))
}

/// Chessboard distance from each written texel to the nearest unwritten one
/// (1 on the mask boundary). The atlas border does not count as unwritten.
fn edge_distance<T: Real>(mask: &Array2<T>) -> Array2<usize> {
    let (h, w) = mask.dim();
    let mut dist = Array2::from_elem((h, w), usize::MAX);
    let mut queue = VecDeque::new();
    for ((r, c), &m) in mask.indexed_iter() {
        if m <= T::zero() {
            dist[[r, c]] = 0;
            queue.push_back((r, c));
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        let d = dist[[r, c]];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if dist[[nr, nc]] == usize::MAX {
                    dist[[nr, nc]] = d + 1;
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    dist.mapv_inplace(|d| if d == usize::MAX { FEATHER_TEXELS } else { d });
    dist
}

/// Weighted per-texel average of partial atlases. Contributions are summed
/// in a canonical order, so any permutation of `partials` gives a
/// bit-identical result.
pub fn stitch<T: Real>(partials: &[TextureAtlas<T>]) -> Result<TextureAtlas<T>> {
    let first = partials.first().ok_or_else(|| invalid("no partial atlases"))?;
    let s = first.size();
    if partials.iter().any(|p| p.size() != s || p.pixels.dim() != (s, s, 3)) {
        return Err(Error::ShapeMismatch("partial atlases differ in size".into()));
    }
    let mut out = TextureAtlas::empty(s)?;
    let texels: Vec<Option<([T; 3], T)>> = (0..s * s)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / s, i % s);
            let mut contrib: Vec<([T; 3], T)> = partials
                .iter()
                .filter(|p| p.mask[[r, c]] > T::zero())
                .map(|p| ([0, 1, 2].map(|k| p.pixels[[r, c, k]]), p.weight[[r, c]]))
                .collect();
            if contrib.is_empty() {
                return None;
            }
            contrib.sort_by(|a, b| {
                let key = |x: &([T; 3], T)| [x.1, x.0[0], x.0[1], x.0[2]].map(|v| v.to_f64_lossy().to_bits());
                key(a).cmp(&key(b))
            });
            let wsum: T = contrib.iter().map(|x| x.1).sum();
            let rgb = if wsum > T::zero() {
                [0, 1, 2].map(|k| contrib.iter().map(|x| x.0[k] * x.1).sum::<T>() / wsum)
            } else {
                let n = T::from_usize_lossy(contrib.len());
                [0, 1, 2].map(|k| contrib.iter().map(|x| x.0[k]).sum::<T>() / n)
            };
            Some((rgb, wsum))
        })
        .collect();
    for (i, t) in texels.into_iter().enumerate() {
        if let Some((rgb, w)) = t {
            let (r, c) = (i / s, i % s);
            for k in 0..3 {
                out.pixels[[r, c, k]] = rgb[k];
            }
            out.mask[[r, c]] = T::one();
            out.weight[[r, c]] = w;
        }
    }
    if out.coverage() == 0 {
        warn!("stitch: every partial atlas is empty");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRender<T> {
    pub image: Array3<T>,
    pub mask: Array2<bool>,
    pub depth: Array2<T>,
}

impl<T: Real> FaceRender<T> {
    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Z-buffered rasterization of the textured mesh at `camera`, using the
/// posed vertices of `view` when given. Triangles with a vertex at or behind
/// the camera plane are dropped (no clipping).
pub fn rasterize_face<T: Real>(
    mesh: &MeshFit,
    view: Option<usize>,
    atlas: &TextureAtlas<T>,
    camera: &Camera<T>,
) -> Result<FaceRender<T>> {
    camera.validate()?;
    if view.is_some_and(|v| v >= mesh.views.len()) {
        return Err(invalid("view index out of range"));
    }
    let cam = camera.cast::<f64>();
    let (h, w) = (cam.height, cam.width);
    let pos = mesh.positions(view);
    let proj: Vec<(f64, f64, f64)> = pos.iter().map(|p| cam.project(Vec3(*p))).collect();
    let mut tris = Vec::new();
    // per raster triangle: (vertex ids in raster order, 1/z per vertex)
    let mut info = Vec::new();
    for f in &mesh.faces {
        if f.iter().any(|&k| proj[k].2 <= 1e-9) {
            continue;
        }
        let screen = f.map(|k| [proj[k].0, proj[k].1]);
        if let Some((t, flipped)) = RasterTri::new(screen, h, w) {
            let ids = if flipped { [f[0], f[2], f[1]] } else { *f };
            tris.push((info.len(), t));
            info.push((ids, ids.map(|k| 1.0 / proj[k].2)));
        }
    }
    let cells = rasterize(h, w, &tris, |id, bary, _| {
        let (ids, inv_z) = &info[id];
        let wz = [bary[0] * inv_z[0], bary[1] * inv_z[1], bary[2] * inv_z[2]];
        let inv_depth = wz[0] + wz[1] + wz[2];
        if !(inv_depth > 0.0) {
            return None;
        }
        let mut uv = [0.0; 2];
        for k in 0..3 {
            for a in 0..2 {
                uv[a] += wz[k] * mesh.uv[ids[k]][a];
            }
        }
        let uv = uv.map(|x| x / inv_depth);
        Some((inv_depth, (atlas.sample(uv), 1.0 / inv_depth)))
    });
    let mut out = FaceRender {
        image: Array3::zeros((h, w, 3)),
        mask: Array2::from_elem((h, w), false),
        depth: Array2::zeros((h, w)),
    };
    for (i, cell) in cells.into_iter().enumerate() {
        if let Some((Some(rgb), depth)) = cell {
            let (r, c) = (i / w, i % w);
            for k in 0..3 {
                out.image[[r, c, k]] = rgb[k];
            }
            out.mask[[r, c]] = true;
            out.depth[[r, c]] = T::lit(depth);
        }
    }
    Ok(out)
}

/// Face pixels where the face mask is set, radiance-field pixels elsewhere.
pub fn overlay_paste<T: Real>(nerf_image: ArrayView3<T>, face: &FaceRender<T>) -> Result<Array3<T>> {
    if nerf_image.dim() != face.image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "nerf image {:?} vs face render {:?}",
            nerf_image.dim(),
            face.image.dim()
        )));
    }
    let mut out = nerf_image.to_owned();
    for ((r, c), &m) in face.mask.indexed_iter() {
        if m {
            for k in 0..3 {
                out[[r, c, k]] = face.image[[r, c, k]];
            }
        }
    }
    Ok(out)
}
