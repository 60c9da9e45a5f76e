//! Stage orchestration: radiance field, face texture, fusion training and
//! test-view evaluation, with a content-hash guard per stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dataset::{manifest_root, write_atomic, Manifest, Split};
use crate::error::{invalid, io_err, Error, Result};
use crate::face_texture::{extract_texture, overlay_paste, rasterize_face, stitch, MeshFit, TextureAtlas};
use crate::field::{FieldConfig, RadianceField};
use crate::fusion::{
    fuse, load_pairs, save_pairs, train_fusion, FusionPair, FusionState, FusionTrainConfig, Generator,
};
use crate::grid::{make_grid, GridOptions};
use crate::imaging::save_rgb;
use crate::linalg::Vec3;
use crate::metrics::{evaluate_set, MetricPlugin};
use crate::render::render_image;
use crate::trainer::{train, NerfState, TrainConfig};

pub const CONFIG_SCHEMA: u32 = 1;
pub const ATLAS_STEM: &str = "atlas";
/// Labels of the comparison grid, left to right.
pub const GRID_LABELS: [&str; 5] = ["NeRF", "3DMM", "Paste", "Fused", "GT"];
/// Output variants scored against ground truth.
pub const SCORED_VARIANTS: [&str; 3] = ["nerf", "paste", "fused"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub profile: Profile,
    pub field: FieldConfig,
    pub nerf: TrainConfig,
    pub fusion: FusionTrainConfig,
    pub atlas_size: usize,
    /// Frames the atlas is extracted from; empty picks three automatically.
    #[serde(default)]
    pub texture_views: Vec<String>,
    /// Feed a copy of the radiance-field render in place of the face render.
    #[serde(default)]
    pub without_3dmm: bool,
    #[serde(default)]
    pub blur_metrics: bool,
    pub checkpoint_every: u64,
    pub render_chunk: usize,
    #[serde(default)]
    pub grid: GridOptions,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA,
            profile: Profile::Desk,
            field: FieldConfig::desk(),
            nerf: TrainConfig::desk(),
            fusion: FusionTrainConfig::desk(),
            atlas_size: 256,
            texture_views: vec![],
            without_3dmm: false,
            blur_metrics: false,
            checkpoint_every: 1000,
            render_chunk: 1024,
            grid: GridOptions::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            field: FieldConfig::full(),
            nerf: TrainConfig::full(),
            fusion: FusionTrainConfig::full(),
            atlas_size: 1024,
            checkpoint_every: 10_000,
            ..Self::desk()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(invalid(format!("unsupported config schema {}", self.schema_version)));
        }
        self.field.validate()?;
        self.nerf.validate()?;
        self.fusion.validate()?;
        if !self.atlas_size.is_power_of_two() {
            return Err(invalid("atlas_size must be a power of two"));
        }
        if self.render_chunk == 0 {
            return Err(invalid("render_chunk must be ≥ 1"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let c: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(
            path,
            serde_json::to_string_pretty(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    TrainNerf,
    /// Per-view extraction followed by stitching into one atlas.
    ExtractTexture,
    BuildPairs,
    TrainFusion,
    Render,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainNerf,
        Stage::ExtractTexture,
        Stage::BuildPairs,
        Stage::TrainFusion,
        Stage::Render,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainNerf => "train-nerf",
            Stage::ExtractTexture => "extract-texture",
            Stage::BuildPairs => "build-pairs",
            Stage::TrainFusion => "train-fusion",
            Stage::Render => "render",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Where each stage keeps its artifacts under the output folder.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn nerf_checkpoint(&self) -> PathBuf {
        self.root.join("nerf/field.ckpt")
    }
    pub fn partial_dir(&self) -> PathBuf {
        self.root.join("texture/partial")
    }
    pub fn atlas_dir(&self) -> PathBuf {
        self.root.join("texture")
    }
    pub fn atlas_png(&self) -> PathBuf {
        self.atlas_dir().join(format!("{ATLAS_STEM}.png"))
    }
    pub fn pairs_dir(&self) -> PathBuf {
        self.root.join("pairs")
    }
    pub fn fusion_checkpoint(&self) -> PathBuf {
        self.root.join("fusion/fusion.ckpt")
    }
    /// Test-view images of one variant: nerf, face, paste, fused or gt.
    pub fn variant_dir(&self, variant: &str) -> PathBuf {
        self.root.join("test").join(variant)
    }
    pub fn grid_dir(&self) -> PathBuf {
        self.root.join("grid")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join("stages").join(format!("{}.json", stage.name()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineInputs {
    pub manifest: PathBuf,
    pub meshfit: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Inputs unchanged since the last completed run.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: String,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub stages: Vec<(Stage, StageOutcome)>,
    pub scores: Vec<VariantScore>,
}

impl PipelineReport {
    pub fn score(&self, variant: &str) -> Option<&VariantScore> {
        self.scores.iter().find(|s| s.variant == variant)
    }
}

/// Converts a failure into one naming `stage` and the artifact involved.
fn tagged<V>(stage: Stage, path: &Path, r: Result<V>) -> Result<V> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name().into(),
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })
}

/// Fails unless `path` exists; the error names the stage producing it.
fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Stage {
            stage: producer.name().into(),
            path: path.to_path_buf(),
            message: format!("missing artifact; run `{}` first", producer.name()),
        })
    }
}

fn hash_path(h: &mut Sha256, path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            hash_path(h, &e)?;
        }
    } else {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        h.update(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

/// SHA-256 over the stage settings and every input file, as hex.
fn inputs_digest(settings: &impl Serialize, inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(settings).expect("settings serialize"));
    for p in inputs {
        hash_path(&mut h, p)?;
    }
    let mut hex = String::with_capacity(64);
    for b in h.finalize().iter() {
        write!(hex, "{b:02x}").expect("string write");
    }
    Ok(hex)
}

#[derive(Serialize, Deserialize)]
struct Stamp {
    stage: String,
    digest: String,
}

fn stamp_matches(layout: &Layout, stage: Stage, digest: &str, outputs: &[PathBuf]) -> bool {
    let Ok(text) = std::fs::read_to_string(layout.stamp(stage)) else {
        return false;
    };
    let current = serde_json::from_str::<Stamp>(&text).is_ok_and(|s| s.digest == digest);
    current && outputs.iter().all(|p| p.exists())
}

fn write_stamp(layout: &Layout, stage: Stage, digest: &str) -> Result<()> {
    let stamp = Stamp {
        stage: stage.name().into(),
        digest: digest.into(),
    };
    write_atomic(
        &layout.stamp(stage),
        serde_json::to_string(&stamp).expect("stamp").as_bytes(),
    )
}

/// Manifest, mesh fits and images, loaded once per run.
struct Context<'a> {
    manifest: Manifest,
    root: PathBuf,
    mesh: MeshFit,
    config: &'a PipelineConfig,
    layout: Layout,
}

impl Context<'_> {
    fn image_paths(&self, split: Option<Split>) -> Vec<PathBuf> {
        self.manifest
            .frames
            .iter()
            .filter(|f| split.is_none_or(|s| f.split == s))
            .map(|f| self.root.join(&f.image))
            .collect()
    }

    fn load_field(&self) -> Result<RadianceField<f32>> {
        let path = self.layout.nerf_checkpoint();
        require(&path, Stage::TrainNerf)?;
        let ck = tagged(Stage::TrainNerf, &path, Checkpoint::load(&path))?;
        Ok(tagged(Stage::TrainNerf, &path, NerfState::<f32>::from_checkpoint(&ck))?.field)
    }

    fn load_atlas(&self) -> Result<TextureAtlas<f32>> {
        let path = self.layout.atlas_png();
        require(&path, Stage::ExtractTexture)?;
        tagged(
            Stage::ExtractTexture,
            &path,
            TextureAtlas::load(&self.layout.atlas_dir(), ATLAS_STEM),
        )
    }

    fn render_nerf(&self, field: &RadianceField<f32>, index: usize) -> Result<Array3<f32>> {
        let cam = self.manifest.camera(index);
        Ok(render_image(
            field,
            &cam,
            self.config.nerf.n_samples,
            false,
            0,
            self.config.render_chunk,
        )?
        .rgb)
    }
}

/// Picks up to three training views spread across the camera arc: the two
/// extremes and the one closest to the middle.
pub fn pick_texture_views(manifest: &Manifest, mesh: &MeshFit) -> Vec<String> {
    let candidates: Vec<usize> = manifest
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| mesh.view_index(&manifest.frames[i].id).is_some())
        .collect();
    if candidates.len() <= 3 {
        return candidates.iter().map(|&i| manifest.frames[i].id.clone()).collect();
    }
    let n = mesh.vertices.len().max(1) as f64;
    let centroid = mesh.vertices.iter().fold(Vec3::zero(), |a, p| a + Vec3(*p) * (1.0 / n));
    let dirs: Vec<Vec3<f64>> = candidates
        .iter()
        .map(|&i| (manifest.camera::<f64>(i).center() - centroid).normalized())
        .collect();
    let reference = dirs.iter().fold(Vec3::zero(), |a, &d| a + d).normalized();
    let up = manifest
        .camera::<f64>(candidates[0])
        .c2w
        .rotate(Vec3::new(0.0, -1.0, 0.0));
    let angles: Vec<f64> = dirs
        .iter()
        .map(|d| reference.cross(d).dot(&up).atan2(reference.dot(d)))
        .collect();
    let by = |f: &dyn Fn(f64) -> f64| {
        (0..candidates.len())
            .min_by(|&a, &b| f(angles[a]).total_cmp(&f(angles[b])))
            .expect("non-empty")
    };
    let mut chosen = vec![by(&|a| a), by(&|a| a.abs()), by(&|a| -a)];
    chosen.dedup();
    chosen
        .into_iter()
        .map(|k| manifest.frames[candidates[k]].id.clone())
        .collect()
}

/// Radiance-field and face renders for every training frame with a fit.
/// Frames without one are skipped with a warning.
pub fn build_training_pairs(
    field: &RadianceField<f32>,
    manifest: &Manifest,
    root: &Path,
    mesh: &MeshFit,
    atlas: &TextureAtlas<f32>,
    n_samples: usize,
    without_3dmm: bool,
) -> Result<Vec<FusionPair<f32>>> {
    let mut pairs = Vec::new();
    for i in manifest.indices(Split::Train) {
        let frame = &manifest.frames[i];
        let Some(view) = mesh.view_index(&frame.id) else {
            warn!("frame `{}` has no mesh fit; skipped", frame.id);
            continue;
        };
        let cam = manifest.camera::<f32>(i);
        let nerf = render_image(field, &cam, n_samples, false, 0, 1024)?.rgb;
        let face = if without_3dmm {
            nerf.clone()
        } else {
            rasterize_face(mesh, Some(view), atlas, &cam)?.image
        };
        let gt: Array3<f32> = manifest.load_image(root, i)?;
        pairs.push(FusionPair::from_unit(&frame.id, nerf.view(), face.view(), gt.view())?);
    }
    Ok(pairs)
}

/// Second input of the generator: the face render, or with the "w/o 3DMM"
/// ablation a copy of the radiance-field render.
pub fn fusion_face_input<'a>(
    nerf: ArrayView3<'a, f32>,
    face: ArrayView3<'a, f32>,
    without_3dmm: bool,
) -> ArrayView3<'a, f32> {
    if without_3dmm {
        nerf
    } else {
        face
    }
}

fn stage_train_nerf(cx: &Context, digest: &str) -> Result<()> {
    let path = cx.layout.nerf_checkpoint();
    let frames = cx.manifest.training_frames::<f32>(&cx.root, Split::Train)?;
    let resumed = path
        .exists()
        .then(|| Checkpoint::load(&path))
        .transpose()?
        .and_then(|ck| {
            let same = ck.get("inputs").is_ok_and(|d| d == digest);
            same.then(|| NerfState::<f32>::from_checkpoint(&ck))
                .transpose()
                .ok()
                .flatten()
        });
    let mut state = match resumed {
        Some(s) => {
            info!("resuming radiance field at iteration {}", s.iteration);
            s
        }
        None => NerfState::new(
            cx.config.field,
            cx.config.nerf,
            cx.manifest.near as f32,
            cx.manifest.far as f32,
        )?,
    };
    let save = |s: &NerfState<f32>| {
        let mut ck = s.to_checkpoint();
        ck.set("inputs", digest);
        ck.save(&path)
    };
    train(&mut state, &frames, cx.config.checkpoint_every, save)?;
    save(&state)
}

fn stage_extract_texture(cx: &Context) -> Result<()> {
    let views = if cx.config.texture_views.is_empty() {
        pick_texture_views(&cx.manifest, &cx.mesh)
    } else {
        cx.config.texture_views.clone()
    };
    if views.is_empty() {
        return Err(invalid("no training frame has a mesh fit"));
    }
    info!("extracting texture from {views:?}");
    let partials = views
        .par_iter()
        .map(|id| {
            let i = cx
                .manifest
                .index_of(id)
                .ok_or_else(|| invalid(format!("unknown frame `{id}`")))?;
            let v = cx
                .mesh
                .view_index(id)
                .ok_or_else(|| invalid(format!("no mesh fit for `{id}`")))?;
            let img: Array3<f32> = cx.manifest.load_image(&cx.root, i)?;
            let (atlas, stats) = extract_texture(img.view(), &cx.mesh, v, cx.config.atlas_size)?;
            info!("view `{id}`: {stats:?}");
            atlas.save(&cx.layout.partial_dir(), id)?;
            Ok(atlas)
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(&partials)?.save(&cx.layout.atlas_dir(), ATLAS_STEM)
}

fn stage_build_pairs(cx: &Context) -> Result<()> {
    let field = cx.load_field()?;
    let atlas = cx.load_atlas()?;
    let pairs = build_training_pairs(
        &field,
        &cx.manifest,
        &cx.root,
        &cx.mesh,
        &atlas,
        cx.config.nerf.n_samples,
        cx.config.without_3dmm,
    )?;
    if pairs.is_empty() {
        return Err(invalid("no training pairs could be built"));
    }
    let dir = cx.layout.pairs_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    save_pairs(&dir, &pairs)
}

fn stage_train_fusion(cx: &Context, digest: &str) -> Result<()> {
    let dir = cx.layout.pairs_dir();
    require(&dir, Stage::BuildPairs)?;
    let pairs = tagged(Stage::BuildPairs, &dir, load_pairs::<f32>(&dir))?;
    let path = cx.layout.fusion_checkpoint();
    let resumed = path
        .exists()
        .then(|| Checkpoint::load(&path))
        .transpose()?
        .and_then(|ck| {
            let same = ck.get("inputs").is_ok_and(|d| d == digest);
            same.then(|| FusionState::<f32>::from_checkpoint(&ck))
                .transpose()
                .ok()
                .flatten()
        });
    let mut state = match resumed {
        Some(s) => s,
        None => FusionState::new(cx.config.fusion)?,
    };
    let save = |s: &FusionState<f32>| {
        let mut ck = s.to_checkpoint();
        ck.set("inputs", digest);
        ck.save(&path)
    };
    let stop = state.config.iterations;
    train_fusion(&mut state, &pairs, stop, cx.config.checkpoint_every, &mut |s| save(s))?;
    save(&state)
}

fn stage_render(cx: &Context) -> Result<()> {
    let field = cx.load_field()?;
    let atlas = cx.load_atlas()?;
    let gpath = cx.layout.fusion_checkpoint();
    require(&gpath, Stage::TrainFusion)?;
    let ck = tagged(Stage::TrainFusion, &gpath, Checkpoint::load(&gpath))?;
    let gen: Generator<f32> = tagged(Stage::TrainFusion, &gpath, FusionState::generator_from_checkpoint(&ck))?;
    for i in cx.manifest.indices(Split::Test) {
        let frame = &cx.manifest.frames[i];
        let Some(view) = cx.mesh.view_index(&frame.id) else {
            warn!("test frame `{}` has no mesh fit; skipped", frame.id);
            continue;
        };
        let cam = cx.manifest.camera::<f32>(i);
        let nerf = cx.render_nerf(&field, i)?;
        let face = rasterize_face(&cx.mesh, Some(view), &atlas, &cam)?;
        let paste = overlay_paste(nerf.view(), &face)?;
        let fused = fuse(
            &gen,
            nerf.view(),
            fusion_face_input(nerf.view(), face.image.view(), cx.config.without_3dmm),
        )?;
        let gt: Array3<f32> = cx.manifest.load_image(&cx.root, i)?;
        let name = format!("{}.png", frame.id);
        let images = [&nerf, &face.image, &paste, &fused, &gt];
        for (variant, img) in ["nerf", "face", "paste", "fused", "gt"].into_iter().zip(images) {
            save_rgb(&cx.layout.variant_dir(variant).join(&name), img.view())?;
        }
        let tiles: Vec<(&str, ArrayView3<f32>)> = GRID_LABELS.into_iter().zip(images.map(|im| im.view())).collect();
        let grid = make_grid(&tiles, cx.config.grid)?;
        save_rgb(&cx.layout.grid_dir().join(&name), grid.image.view())?;
    }
    Ok(())
}

fn stage_evaluate(cx: &Context, plugins: &[&dyn MetricPlugin]) -> Result<Vec<VariantScore>> {
    let gt = cx.layout.variant_dir("gt");
    require(&gt, Stage::Render)?;
    let mut scores = Vec::new();
    for variant in SCORED_VARIANTS {
        let dir = cx.layout.variant_dir(variant);
        require(&dir, Stage::Render)?;
        let table = evaluate_set(&dir, &gt, plugins, cx.config.blur_metrics)?;
        table.write_csv(&cx.layout.eval_dir().join(format!("{variant}.csv")))?;
        let mean = table.mean().ok_or_else(|| invalid("no test frames were rendered"))?;
        info!("{variant}: PSNR {:.2} dB, SSIM {:.4}", mean.psnr, mean.ssim);
        scores.push(VariantScore {
            variant: variant.into(),
            frames: table.rows.len(),
            psnr: mean.psnr,
            ssim: mean.ssim,
        });
    }
    let summary = serde_json::to_string_pretty(&scores).expect("scores serialize");
    write_atomic(&cx.layout.eval_dir().join("summary.json"), summary.as_bytes())?;
    Ok(scores)
}

fn read_scores(layout: &Layout) -> Result<Vec<VariantScore>> {
    let path = layout.eval_dir().join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Runs `stages` in order. A stage whose inputs and settings hash to the
/// value recorded at its last completion is skipped.
pub fn run_stages(
    inputs: &PipelineInputs,
    out_dir: &Path,
    config: &PipelineConfig,
    stages: &[Stage],
    plugins: &[&dyn MetricPlugin],
) -> Result<PipelineReport> {
    config.validate()?;
    let manifest = tagged(Stage::TrainNerf, &inputs.manifest, Manifest::load(&inputs.manifest))?;
    let root = manifest_root(&inputs.manifest);
    let mesh = tagged(Stage::ExtractTexture, &inputs.meshfit, MeshFit::load(&inputs.meshfit))?;
    let cx = Context {
        manifest,
        root,
        mesh,
        config,
        layout: Layout::new(out_dir),
    };
    let lay = &cx.layout;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut report = PipelineReport::default();
    for stage in stages {
        let c = config;
        let (settings, files, outputs): (serde_json::Value, Vec<PathBuf>, Vec<PathBuf>) = match stage {
            Stage::TrainNerf => (
                serde_json::json!([c.field, c.nerf]),
                [vec![inputs.manifest.clone()], cx.image_paths(Some(Split::Train))].concat(),
                vec![lay.nerf_checkpoint()],
            ),
            Stage::ExtractTexture => (
                serde_json::json!([c.atlas_size, c.texture_views]),
                [
                    vec![inputs.manifest.clone(), inputs.meshfit.clone()],
                    cx.image_paths(Some(Split::Train)),
                ]
                .concat(),
                vec![lay.atlas_png()],
            ),
            Stage::BuildPairs => {
                require(&lay.nerf_checkpoint(), Stage::TrainNerf)?;
                require(&lay.atlas_png(), Stage::ExtractTexture)?;
                (
                    serde_json::json!([c.nerf.n_samples, c.without_3dmm]),
                    [
                        vec![
                            inputs.manifest.clone(),
                            inputs.meshfit.clone(),
                            lay.nerf_checkpoint(),
                            lay.atlas_dir(),
                        ],
                        cx.image_paths(Some(Split::Train)),
                    ]
                    .concat(),
                    vec![lay.pairs_dir()],
                )
            }
            Stage::TrainFusion => {
                require(&lay.pairs_dir(), Stage::BuildPairs)?;
                (
                    serde_json::json!([c.fusion]),
                    vec![lay.pairs_dir()],
                    vec![lay.fusion_checkpoint()],
                )
            }
            Stage::Render => {
                require(&lay.nerf_checkpoint(), Stage::TrainNerf)?;
                require(&lay.atlas_png(), Stage::ExtractTexture)?;
                require(&lay.fusion_checkpoint(), Stage::TrainFusion)?;
                (
                    serde_json::json!([c.nerf.n_samples, c.without_3dmm, c.grid]),
                    [
                        vec![
                            inputs.manifest.clone(),
                            inputs.meshfit.clone(),
                            lay.nerf_checkpoint(),
                            lay.atlas_dir(),
                            lay.fusion_checkpoint(),
                        ],
                        cx.image_paths(Some(Split::Test)),
                    ]
                    .concat(),
                    vec![lay.variant_dir("fused"), lay.grid_dir()],
                )
            }
            Stage::Evaluate => {
                require(&lay.variant_dir("gt"), Stage::Render)?;
                let names: Vec<&str> = plugins.iter().map(|p| p.name()).collect();
                (
                    serde_json::json!([c.blur_metrics, names]),
                    vec![lay.root.join("test")],
                    vec![lay.eval_dir().join("summary.json")],
                )
            }
        };
        let digest = tagged(stage, &lay.root, inputs_digest(&settings, &files))?;
        if stamp_matches(lay, stage, &digest, &outputs) {
            info!("stage `{}` is up to date", stage.name());
            report.stages.push((stage, StageOutcome::Skipped));
            if stage == Stage::Evaluate {
                report.scores = tagged(stage, &lay.eval_dir(), read_scores(lay))?;
            }
            continue;
        }
        info!("stage `{}`", stage.name());
        let at = outputs.first().cloned().unwrap_or_else(|| lay.root.clone());
        match stage {
            Stage::TrainNerf => tagged(stage, &at, stage_train_nerf(&cx, &digest))?,
            Stage::ExtractTexture => tagged(stage, &at, stage_extract_texture(&cx))?,
            Stage::BuildPairs => tagged(stage, &at, stage_build_pairs(&cx))?,
            Stage::TrainFusion => tagged(stage, &at, stage_train_fusion(&cx, &digest))?,
            Stage::Render => tagged(stage, &at, stage_render(&cx))?,
            Stage::Evaluate => report.scores = tagged(stage, &at, stage_evaluate(&cx, plugins))?,
        }
        tagged(stage, &at, write_stamp(lay, stage, &digest))?;
        report.stages.push((stage, StageOutcome::Ran));
    }
    Ok(report)
}

/// Every stage, in order.
pub fn run_pipeline(
    inputs: &PipelineInputs,
    out_dir: &Path,
    config: &PipelineConfig,
    plugins: &[&dyn MetricPlugin],
) -> Result<PipelineReport> {
    run_stages(inputs, out_dir, config, &Stage::ALL, plugins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionNetConfig;
    use crate::synthetic::{generate_synthetic, SceneKind, SynthSpec, MANIFEST_FILE, MESHFIT_FILE};

    fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::desk();
        c.field.depth = 2;
        c.field.width = 16;
        c.field.skip_layer = 1;
        c.nerf.iterations = 30;
        c.nerf.batch_rays = 64;
        c.nerf.n_samples = 8;
        c.fusion.net = FusionNetConfig {
            gen_width: 4,
            disc_width: 4,
            res_blocks: 1,
            init_std: 0.02,
        };
        c.fusion.iterations = 2;
        c.atlas_size = 64;
        c.checkpoint_every = 0;
        c
    }

    fn dataset(dir: &Path) -> PipelineInputs {
        let spec = SynthSpec {
            supersample: 1,
            ..SynthSpec::new(SceneKind::Deforming, 8, 48, 3)
        };
        generate_synthetic(spec, dir).unwrap();
        PipelineInputs {
            manifest: dir.join(MANIFEST_FILE),
            meshfit: dir.join(MESHFIT_FILE),
        }
    }

    #[test]
    fn runs_end_to_end_then_skips_unchanged_stages() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let inputs = dataset(data.path());
        let config = tiny_config();
        let report = run_pipeline(&inputs, out.path(), &config, &[]).unwrap();
        assert!(report.stages.iter().all(|(_, o)| *o == StageOutcome::Ran));
        let lay = Layout::new(out.path());
        let grids: Vec<_> = std::fs::read_dir(lay.grid_dir()).unwrap().collect();
        assert_eq!(grids.len(), 1);
        assert_eq!(report.scores.len(), 3);

        let ck = lay.nerf_checkpoint();
        let before = std::fs::metadata(&ck).unwrap().modified().unwrap();
        let again = run_pipeline(&inputs, out.path(), &config, &[]).unwrap();
        assert!(again.stages.iter().all(|(_, o)| *o == StageOutcome::Skipped));
        assert_eq!(std::fs::metadata(&ck).unwrap().modified().unwrap(), before);
        assert_eq!(again.scores, report.scores);

        // changing a fusion setting reruns fusion and everything downstream only
        let mut changed = config.clone();
        changed.fusion.iterations = 3;
        let third = run_pipeline(&inputs, out.path(), &changed, &[]).unwrap();
        let ran: Vec<Stage> = third
            .stages
            .iter()
            .filter(|(_, o)| *o == StageOutcome::Ran)
            .map(|(s, _)| *s)
            .collect();
        assert_eq!(ran[0], Stage::TrainFusion);
        assert!(!ran.contains(&Stage::TrainNerf) && !ran.contains(&Stage::BuildPairs));
    }

    #[test]
    fn missing_atlas_names_texture_stage() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let inputs = dataset(data.path());
        let config = tiny_config();
        run_stages(&inputs, out.path(), &config, &[Stage::TrainNerf], &[]).unwrap();
        let err = run_stages(&inputs, out.path(), &config, &[Stage::BuildPairs], &[]).unwrap_err();
        match err {
            Error::Stage { stage, path, .. } => {
                assert_eq!(stage, "extract-texture");
                assert!(path.ends_with("texture/atlas.png"));
            }
            e => panic!("unexpected {e}"),
        }
        let render = run_stages(&inputs, out.path(), &config, &[Stage::Render], &[]).unwrap_err();
        assert!(
            render.to_string().starts_with("stage `extract-texture` failed"),
            "{render}"
        );
    }

    #[test]
    fn without_3dmm_duplicates_nerf_channels() {
        let nerf = Array3::from_shape_fn((48, 48, 3), |(r, c, k)| ((r + 2 * c + k) % 7) as f32 / 6.0);
        let face = Array3::<f32>::zeros((48, 48, 3));
        let x = fusion_face_input(nerf.view(), face.view(), true);
        let pair = FusionPair::from_unit("a", nerf.view(), x, nerf.view()).unwrap();
        let cond = pair.cond();
        assert_eq!(cond.shape(), &[6, 48, 48]);
        assert_eq!(
            cond.slice(ndarray::s![0..3, .., ..]),
            cond.slice(ndarray::s![3..6, .., ..])
        );
        assert_eq!(fusion_face_input(nerf.view(), face.view(), false), face.view());
    }

    #[test]
    fn pairs_skip_frames_without_fits() {
        let data = tempfile::tempdir().unwrap();
        let inputs = dataset(data.path());
        let manifest = Manifest::load(&inputs.manifest).unwrap();
        let mut mesh = MeshFit::load(&inputs.meshfit).unwrap();
        let field = RadianceField::<f32>::init(
            FieldConfig {
                depth: 2,
                width: 8,
                skip_layer: 1,
                ..FieldConfig::desk()
            },
            0,
        )
        .unwrap();
        let atlas = TextureAtlas::<f32>::empty(64).unwrap();
        let train = manifest.indices(Split::Train);
        let all = build_training_pairs(&field, &manifest, data.path(), &mesh, &atlas, 4, false).unwrap();
        assert_eq!(all.len(), train.len());
        let dropped = manifest.frames[train[0]].id.clone();
        mesh.views.retain(|v| v.view_id != dropped);
        let fewer = build_training_pairs(&field, &manifest, data.path(), &mesh, &atlas, 4, false).unwrap();
        assert_eq!(fewer.len(), train.len() - 1);
        assert!(fewer.iter().all(|p| p.id != dropped));
        // empty atlas: the face input is black, i.e. −1 after normalization
        assert!(all[0].face.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn texture_views_span_the_arc() {
        let data = tempfile::tempdir().unwrap();
        let inputs = dataset(data.path());
        let manifest = Manifest::load(&inputs.manifest).unwrap();
        let mesh = MeshFit::load(&inputs.meshfit).unwrap();
        let views = pick_texture_views(&manifest, &mesh);
        assert_eq!(views.len(), 3);
        let x: Vec<f64> = views
            .iter()
            .map(|id| manifest.camera::<f64>(manifest.index_of(id).unwrap()).center().x())
            .collect();
        let train_x: Vec<f64> = manifest
            .indices(Split::Train)
            .into_iter()
            .map(|i| manifest.camera::<f64>(i).center().x())
            .collect();
        let lo = train_x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = train_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (vlo, vhi) = (
            x.iter().cloned().fold(f64::INFINITY, f64::min),
            x.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        assert!(
            (vlo - lo).abs() < 1e-9 && (vhi - hi).abs() < 1e-9,
            "{x:?} vs {lo}..{hi}"
        );
    }

    #[test]
    fn config_round_trips_and_rejects_other_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.json");
        for c in [PipelineConfig::desk(), PipelineConfig::full()] {
            c.save(&p).unwrap();
            assert_eq!(PipelineConfig::load(&p).unwrap(), c);
        }
        let mut c = PipelineConfig::desk();
        c.schema_version = 7;
        c.save(&p).unwrap();
        assert!(PipelineConfig::load(&p).is_err());
        assert_eq!(Stage::from_name("extract-texture"), Some(Stage::ExtractTexture));
    }
}
