//! Procedural test scenes: a textured ellipsoid head in front of a textured
//! backdrop, seen by cameras on an arc. Frames are rendered with the face
//! rasterizer (supersampled), and every ground-truth artifact is kept.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, FrameEntry, Intrinsics, Manifest, Split, MANIFEST_SCHEMA, TEST_FRACTION};
use crate::error::{invalid, Result};
use crate::face_texture::{rasterize_face, MeshFit, TextureAtlas};
use crate::geometry::Camera;
use crate::imaging::save_rgb;
use crate::linalg::{Rigid, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Static,
    /// The head translates by `displacement · t`.
    Rigid,
    /// The lower face drops and pushes forward with `t`.
    Deforming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub n_views: usize,
    pub resolution: usize,
    pub seed: u64,
    pub displacement: [f64; 3],
    /// Full angular extent of the camera arc, degrees.
    pub arc_degrees: f64,
    pub camera_distance: f64,
    /// Samples per pixel side when rendering ground truth.
    pub supersample: usize,
    /// Leading frames of a moving scene captured at t = 0 from across the
    /// arc. One view alone leaves the canonical depth ambiguous.
    #[serde(default = "default_anchor_views")]
    pub anchor_views: usize,
}

fn default_anchor_views() -> usize {
    3
}

impl SynthSpec {
    pub fn new(kind: SceneKind, n_views: usize, resolution: usize, seed: u64) -> Self {
        Self {
            kind,
            n_views,
            resolution,
            seed,
            displacement: [0.1, 0.0, 0.0],
            arc_degrees: 60.0,
            camera_distance: 3.0,
            supersample: 3,
            anchor_views: default_anchor_views(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 || self.resolution == 0 || self.supersample == 0 {
            return Err(invalid("need ≥ 2 views, a positive resolution and supersampling"));
        }
        if !(self.camera_distance > 1.5) {
            return Err(invalid("cameras must stay outside the head"));
        }
        if self.kind != SceneKind::Static && !(1..self.n_views).contains(&self.anchor_views) {
            return Err(invalid("a moving scene needs 1 ≤ anchor views < views"));
        }
        Ok(())
    }
}

const HEAD_RADII: [f64; 3] = [0.5, 0.62, 0.48];
const RINGS: usize = 32;
const SEGMENTS: usize = 64;
const HEAD_ATLAS: usize = 256;
const BACKDROP_Z: f64 = -1.2;
const BACKDROP_HALF: f64 = 6.0;
const BACKDROP_CELLS: usize = 16;

/// Scene geometry, textures and cameras.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    /// Whole head (all triangles), at rest.
    pub head: MeshFit,
    /// Subset of head triangles forming the frontal face.
    pub face_faces: Vec<[usize; 3]>,
    pub head_atlas: TextureAtlas<f64>,
    pub backdrop: MeshFit,
    pub backdrop_atlas: TextureAtlas<f64>,
    pub intrinsics: Intrinsics,
    pub near: f64,
    pub far: f64,
    poses: Vec<(Rigid<f64>, f64)>,
}

fn gauss(d2: f64, s2: f64) -> f64 {
    (-d2 / (2.0 * s2)).exp()
}

fn mix(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] * (1.0 - w) + b[k] * w)
}

/// Head color at longitude `phi` (0 faces +z) and colatitude `theta`.
struct HeadTexture {
    skin: [f64; 3],
    hair: [f64; 3],
    eye: [(f64, f64); 2],
    mouth: (f64, f64),
    lip: [f64; 3],
}

impl HeadTexture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut j = |s: f64| rng.random_range(-s..s);
        Self {
            skin: [0.82 + j(0.05), 0.62 + j(0.05), 0.52 + j(0.05)],
            hair: [0.28 + j(0.05), 0.18 + j(0.04), 0.1 + j(0.03)],
            eye: [(-0.38 + j(0.03), 1.32 + j(0.03)), (0.38 + j(0.03), 1.32 + j(0.03))],
            mouth: (j(0.03), 1.98 + j(0.03)),
            lip: [0.72 + j(0.05), 0.25 + j(0.05), 0.28 + j(0.05)],
        }
    }

    fn color(&self, phi: f64, theta: f64) -> [f64; 3] {
        let shade = 0.06 * (3.0 * phi).cos() * (2.0 * theta).sin();
        let mut c = self.skin.map(|v| v + shade);
        // hairline and back of the head
        let hair = 1.0 / (1.0 + (-(0.75 - theta) * 14.0).exp()) + 1.0 / (1.0 + (-(phi.abs() - 1.75) * 10.0).exp());
        c = mix(c, self.hair, hair.min(1.0));
        for &(ep, et) in &self.eye {
            let d2 = (phi - ep).powi(2) + 1.6 * (theta - et).powi(2);
            c = mix(c, [0.95, 0.95, 0.92], gauss(d2, 0.012));
            c = mix(c, [0.12, 0.1, 0.12], gauss(d2, 0.003));
            let brow = (phi - ep).powi(2) * 0.6 + 4.0 * (theta - et + 0.2).powi(2);
            c = mix(c, self.hair, 0.8 * gauss(brow, 0.008));
        }
        let (mp, mt) = self.mouth;
        let m2 = (phi - mp).powi(2) * 0.5 + 5.0 * (theta - mt).powi(2);
        c = mix(c, self.lip, gauss(m2, 0.01));
        let nose = phi.powi(2) * 4.0 + (theta - 1.65).powi(2);
        c = c.map(|v| v - 0.08 * gauss(nose, 0.01));
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

fn backdrop_color(u: f64, v: f64, seed_phase: f64) -> [f64; 3] {
    use std::f64::consts::TAU;
    let a = (TAU * (2.0 * u + seed_phase)).sin() * (TAU * 1.5 * v).cos();
    let b = (TAU * (1.2 * u - 0.8 * v)).sin();
    [
        (0.45 + 0.18 * a + 0.15 * u).clamp(0.0, 1.0),
        (0.5 + 0.12 * b + 0.1 * v).clamp(0.0, 1.0),
        (0.55 - 0.15 * a + 0.1 * b).clamp(0.0, 1.0),
    ]
}

fn fill_atlas(size: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> TextureAtlas<f64> {
    let mut a = TextureAtlas::empty(size).expect("power of two");
    for r in 0..size {
        for c in 0..size {
            let rgb = f((c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
            for k in 0..3 {
                a.pixels[[r, c, k]] = rgb[k];
            }
            a.mask[[r, c]] = 1.0;
            a.weight[[r, c]] = 1.0;
        }
    }
    a
}

fn lat_long(u: f64, v: f64) -> (f64, f64) {
    (
        std::f64::consts::TAU * u - std::f64::consts::PI,
        std::f64::consts::PI * v,
    )
}

impl SynthScene {
    pub fn new(spec: SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let tex = HeadTexture::random(&mut rng);
        let phase: f64 = rng.random_range(0.0..1.0);

        let mut vertices = Vec::new();
        let mut uv = Vec::new();
        for i in 0..=RINGS {
            for j in 0..=SEGMENTS {
                let (u, v) = (j as f64 / SEGMENTS as f64, i as f64 / RINGS as f64);
                let (phi, theta) = lat_long(u, v);
                vertices.push([
                    HEAD_RADII[0] * theta.sin() * phi.sin(),
                    HEAD_RADII[1] * theta.cos(),
                    HEAD_RADII[2] * theta.sin() * phi.cos(),
                ]);
                uv.push([u, v]);
            }
        }
        let id = |i: usize, j: usize| i * (SEGMENTS + 1) + j;
        let mut faces = Vec::new();
        let mut face_faces = Vec::new();
        for i in 0..RINGS {
            for j in 0..SEGMENTS {
                let mut tris = Vec::new();
                if i > 0 {
                    tris.push([id(i, j), id(i + 1, j), id(i, j + 1)]);
                }
                if i + 1 < RINGS {
                    tris.push([id(i + 1, j), id(i + 1, j + 1), id(i, j + 1)]);
                }
                let (phi, theta) = lat_long((j as f64 + 0.5) / SEGMENTS as f64, (i as f64 + 0.5) / RINGS as f64);
                let frontal = phi.abs() <= 1.45 && (0.6..=2.5).contains(&theta);
                for t in tris {
                    faces.push(t);
                    if frontal {
                        face_faces.push(t);
                    }
                }
            }
        }
        let head = MeshFit {
            vertices,
            faces,
            uv,
            views: vec![],
        };
        let head_atlas = fill_atlas(HEAD_ATLAS, |u, v| {
            let (phi, theta) = lat_long(u, v);
            tex.color(phi, theta)
        });
        // tessellated so that only cells far off-screen can reach behind a camera
        let (n, h) = (BACKDROP_CELLS, BACKDROP_HALF);
        let mut bverts = Vec::new();
        let mut buv = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                let (u, v) = (j as f64 / n as f64, i as f64 / n as f64);
                bverts.push([-h + 2.0 * h * u, h - 2.0 * h * v, BACKDROP_Z]);
                buv.push([u, v]);
            }
        }
        let bid = |i: usize, j: usize| i * (n + 1) + j;
        let bfaces = (0..n)
            .flat_map(|i| {
                (0..n).flat_map(move |j| {
                    [
                        [bid(i, j), bid(i + 1, j), bid(i, j + 1)],
                        [bid(i + 1, j), bid(i + 1, j + 1), bid(i, j + 1)],
                    ]
                })
            })
            .collect();
        let backdrop = MeshFit {
            vertices: bverts,
            faces: bfaces,
            uv: buv,
            views: vec![],
        };
        let backdrop_atlas = fill_atlas(64, |u, v| backdrop_color(u, v, phase));

        let res = spec.resolution as f64;
        let intrinsics = Intrinsics {
            fx: 1.1 * res,
            fy: 1.1 * res,
            cx: res / 2.0,
            cy: res / 2.0,
            width: spec.resolution,
            height: spec.resolution,
        };
        let n = spec.n_views;
        let k = spec.anchor_views;
        let golden = 0.618_033_988_749_895;
        let poses = (0..n)
            .map(|i| {
                let (frac, time) = match spec.kind {
                    SceneKind::Static => (i as f64 / (n - 1) as f64, 0.0),
                    _ if i < k => (if k == 1 { 0.5 } else { i as f64 / (k - 1) as f64 }, 0.0),
                    _ => ((0.5 + i as f64 * golden).fract(), (i + 1 - k) as f64 / (n - k) as f64),
                };
                let az = (frac - 0.5) * spec.arc_degrees.to_radians();
                let el = 0.12 * (1.3 * i as f64).sin();
                let d = spec.camera_distance;
                let eye = Vec3::new(d * az.sin() * el.cos(), d * el.sin(), d * az.cos() * el.cos());
                (Rigid::look_at(eye, Vec3::zero(), Vec3::new(0.0, 1.0, 0.0)), time)
            })
            .collect();
        Ok(Self {
            spec,
            head,
            face_faces,
            head_atlas,
            backdrop,
            backdrop_atlas,
            intrinsics,
            near: spec.camera_distance - 1.5,
            far: spec.camera_distance + 3.5,
            poses,
        })
    }

    /// Offset of a rest-pose head point at time `t`.
    pub fn displacement(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        match self.spec.kind {
            SceneKind::Static => [0.0; 3],
            SceneKind::Rigid => self.spec.displacement.map(|d| d * t),
            SceneKind::Deforming => {
                let g = gauss(p[0].powi(2) / 0.4 + (p[1] + 0.42).powi(2), 0.04);
                let front = (p[2] / HEAD_RADII[2]).max(0.0);
                [0.0, -0.12 * t * g * front, 0.06 * t * g * front]
            }
        }
    }

    pub fn head_positions(&self, t: f64) -> Vec<[f64; 3]> {
        self.head
            .vertices
            .iter()
            .map(|p| {
                let d = self.displacement(*p, t);
                [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
            })
            .collect()
    }

    pub fn camera(&self, index: usize) -> Camera<f64> {
        let (c2w, time) = self.poses[index];
        let k = &self.intrinsics;
        Camera {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            c2w,
            near: self.near,
            far: self.far,
            time,
        }
    }

    pub fn time(&self, index: usize) -> f64 {
        self.poses[index].1
    }

    /// Ground-truth image at `camera`, with the head posed at `t`.
    pub fn render(&self, camera: &Camera<f64>, t: f64) -> Result<Array3<f64>> {
        let head = MeshFit {
            vertices: self.head_positions(t),
            ..self.head.clone()
        };
        self.render_with(&head, camera)
    }

    /// Renders a given head mesh over the backdrop.
    pub fn render_with(&self, head: &MeshFit, camera: &Camera<f64>) -> Result<Array3<f64>> {
        let ss = self.spec.supersample;
        let big = Camera {
            fx: camera.fx * ss as f64,
            fy: camera.fy * ss as f64,
            cx: camera.cx * ss as f64,
            cy: camera.cy * ss as f64,
            width: camera.width * ss,
            height: camera.height * ss,
            ..*camera
        };
        let fg = rasterize_face(head, None, &self.head_atlas, &big)?;
        let bg = rasterize_face(&self.backdrop, None, &self.backdrop_atlas, &big)?;
        let (h, w) = (camera.height, camera.width);
        let mut out = Array3::zeros((h, w, 3));
        let norm = 1.0 / (ss * ss) as f64;
        for r in 0..h * ss {
            for c in 0..w * ss {
                let use_fg = fg.mask[[r, c]] && (!bg.mask[[r, c]] || fg.depth[[r, c]] <= bg.depth[[r, c]]);
                let src = if use_fg { &fg.image } else { &bg.image };
                for k in 0..3 {
                    out[[r / ss, c / ss, k]] += src[[r, c, k]] * norm;
                }
            }
        }
        Ok(out)
    }

    /// The frontal face as a fitted mesh with one view per frame.
    pub fn face_fit(&self, ids: &[String]) -> MeshFit {
        let base = MeshFit {
            vertices: self.head.vertices.clone(),
            faces: self.face_faces.clone(),
            uv: self.head.uv.clone(),
            views: vec![],
        };
        let views = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let posed = (self.spec.kind != SceneKind::Static).then(|| self.head_positions(self.time(i)));
                base.project_view(id, posed, &self.camera(i))
            })
            .collect();
        MeshFit { views, ..base }
    }

    pub fn frame_ids(&self) -> Vec<String> {
        (0..self.spec.n_views).map(|i| format!("frame_{i:04}")).collect()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let frames = self
            .frame_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| FrameEntry {
                image: format!("images/{id}.png"),
                id,
                time: self.time(i),
                c2w: self.poses[i].0 .0,
                split: Split::Train,
            })
            .collect();
        split(
            &Manifest {
                schema_version: MANIFEST_SCHEMA,
                intrinsics: self.intrinsics,
                near: self.near,
                far: self.far,
                test_fraction: None,
                frames,
            },
            TEST_FRACTION,
        )
    }
}

/// Paths written by [`generate_synthetic`], relative to its output folder.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MESHFIT_FILE: &str = "meshfit.json";
pub const GT_ATLAS_STEM: &str = "gt_atlas";

/// Renders every frame and writes the manifest, images, the ground-truth
/// face fit and atlas to `out_dir`.
pub fn generate_synthetic(spec: SynthSpec, out_dir: &Path) -> Result<(SynthScene, Manifest)> {
    let scene = SynthScene::new(spec)?;
    let manifest = scene.manifest()?;
    use rayon::prelude::*;
    (0..spec.n_views).into_par_iter().try_for_each(|i| {
        let img = scene.render(&scene.camera(i), scene.time(i))?;
        save_rgb(&out_dir.join(&manifest.frames[i].image), img.view())
    })?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    scene.face_fit(&scene.frame_ids()).save(&out_dir.join(MESHFIT_FILE))?;
    scene.head_atlas.save(out_dir, GT_ATLAS_STEM)?;
    Ok((scene, manifest))
}
