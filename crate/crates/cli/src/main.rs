use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fusedview::checkpoint::Checkpoint;
use fusedview::dataset::{ingest, manifest_root, split, IngestOptions, Manifest, Split, TEST_FRACTION};
use fusedview::face_texture::{extract_texture, rasterize_face, stitch, MeshFit, TextureAtlas};
use fusedview::fusion::{fuse, load_pairs, save_pairs, train_fusion, FusionState, FusionTrainConfig};
use fusedview::grid::{make_grid, GridOptions, ZoomBox};
use fusedview::imaging::{load_rgb, save_mask, save_rgb};
use fusedview::metrics::{evaluate_set, ExternalMetric, MetricPlugin};
use fusedview::pipeline::{build_training_pairs, run_stages, PipelineConfig, PipelineInputs, Profile, Stage};
use fusedview::render::render_image;
use fusedview::synthetic::{generate_synthetic, SceneKind, SynthSpec};
use fusedview::trainer::{train, NerfState};
use ndarray::{Array2, Array3};

#[derive(Parser)]
#[command(
    name = "fusedview",
    version,
    about = "Radiance-field and face-texture fusion for novel views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Static,
    Rigid,
    Deforming,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Subsample, crop and resize captured frames into a dataset.
    Ingest {
        #[arg(long)]
        raw: PathBuf,
        /// JSON with shared intrinsics and one c2w per image (a manifest works too).
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = TEST_FRACTION)]
        test_fraction: f64,
    },
    /// Re-tag the train/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = TEST_FRACTION)]
        fraction: f64,
        /// Defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic head scene with every ground-truth artifact.
    Synth {
        #[arg(long, value_enum, default_value = "static")]
        kind: KindArg,
        #[arg(long, default_value_t = 36)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the time-conditioned radiance field.
    TrainNerf {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
        /// Continue from `<out>/field.ckpt` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Render frames of a manifest from a radiance-field checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Extract a partial UV atlas from one posed frame.
    ExtractTexture {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        meshfit: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        size: usize,
    },
    /// Merge partial atlases into one.
    Stitch {
        /// Atlas stems as `<dir>/<stem>` (without `.png`).
        #[arg(required = true)]
        partials: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "atlas")]
        stem: String,
    },
    /// Rasterize the textured face mesh for one frame's camera.
    RenderFace {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        meshfit: PathBuf,
        /// Atlas stem as `<dir>/<stem>`.
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        frame: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Render (radiance field, face) inputs for every training frame.
    BuildPairs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        meshfit: PathBuf,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        without_3dmm: bool,
    },
    /// Train the fusion generator and discriminator.
    TrainFusion {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
        #[arg(long)]
        resume: bool,
    },
    /// Fuse one radiance-field render with its face render.
    Fuse {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        nerf: PathBuf,
        #[arg(long)]
        face: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR / SSIM (and plugins) of every image present in both folders.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also score the prediction after a 3×3 Gaussian blur.
        #[arg(long)]
        blur: bool,
        /// Program printing a LPIPS distance for `<pred.png> <gt.png>`.
        #[arg(long)]
        lpips: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run every stage (or the chosen ones) with a content-hash guard.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        meshfit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        profile: ProfileArg,
        /// Restrict to these stages, e.g. `--stage train-fusion --stage render`.
        #[arg(long)]
        stage: Vec<String>,
        #[arg(long)]
        without_3dmm: bool,
        #[arg(long)]
        lpips: Option<PathBuf>,
        /// Write the effective configuration here and exit.
        #[arg(long)]
        write_config: Option<PathBuf>,
    },
    /// Tile labeled images side by side with optional zoom insets.
    Grid {
        /// `label=path.png`, one per tile.
        #[arg(required = true)]
        images: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// `x,y,w,h` in pixels.
        #[arg(long)]
        zoom: Option<String>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long)]
        columns: Option<usize>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Split { .. } => "split",
            Command::Synth { .. } => "synth",
            Command::TrainNerf { .. } => "train-nerf",
            Command::Render { .. } => "render",
            Command::ExtractTexture { .. } => "extract-texture",
            Command::Stitch { .. } => "stitch",
            Command::RenderFace { .. } => "render-face",
            Command::BuildPairs { .. } => "build-pairs",
            Command::TrainFusion { .. } => "train-fusion",
            Command::Fuse { .. } => "fuse",
            Command::Evaluate { .. } => "evaluate",
            Command::Pipeline { .. } => "pipeline",
            Command::Grid { .. } => "grid",
        }
    }
}

fn split_stem(p: &Path) -> Result<(PathBuf, String)> {
    let stem = p
        .file_name()
        .ok_or_else(|| anyhow!("`{}` does not name an atlas", p.display()))?
        .to_string_lossy()
        .trim_end_matches(".png")
        .to_string();
    let dir = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((dir, stem))
}

fn load_atlas(p: &Path) -> Result<TextureAtlas<f32>> {
    let (dir, stem) = split_stem(p)?;
    TextureAtlas::load(&dir, &stem).with_context(|| format!("loading atlas {}", p.display()))
}

fn frame_index(manifest: &Manifest, id: &str) -> Result<usize> {
    manifest
        .index_of(id)
        .ok_or_else(|| anyhow!("frame `{id}` is not in the manifest"))
}

fn view_index(mesh: &MeshFit, id: &str) -> Result<usize> {
    mesh.view_index(id)
        .ok_or_else(|| anyhow!("no mesh fit for frame `{id}`"))
}

fn lpips_plugin(program: Option<PathBuf>) -> Option<ExternalMetric> {
    program.map(|program| ExternalMetric {
        name: "lpips".into(),
        program,
    })
}

fn parse_zoom(s: &str) -> Result<ZoomBox> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("zoom `{s}` is not x,y,w,h"))?;
    let [x, y, w, h] = v[..] else {
        bail!("zoom `{s}` is not x,y,w,h");
    };
    Ok(ZoomBox { x, y, w, h })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            raw,
            cameras,
            out,
            stride,
            size,
            test_fraction,
        } => {
            let m = ingest(
                &raw,
                &cameras,
                &out,
                IngestOptions {
                    stride,
                    target: size,
                    test_fraction,
                },
            )?;
            info!(
                "{} frames, {} for testing",
                m.frames.len(),
                m.indices(Split::Test).len()
            );
        }
        Command::Split {
            manifest,
            fraction,
            out,
        } => {
            let m = split(&Manifest::load(&manifest)?, fraction)?;
            m.save(out.as_deref().unwrap_or(&manifest))?;
            info!(
                "{} of {} frames tagged test",
                m.indices(Split::Test).len(),
                m.frames.len()
            );
        }
        Command::Synth {
            kind,
            views,
            resolution,
            seed,
            out,
        } => {
            let kind = match kind {
                KindArg::Static => SceneKind::Static,
                KindArg::Rigid => SceneKind::Rigid,
                KindArg::Deforming => SceneKind::Deforming,
            };
            generate_synthetic(SynthSpec::new(kind, views, resolution, seed), &out)?;
            info!("wrote {}", out.display());
        }
        Command::TrainNerf {
            manifest,
            out,
            profile,
            iterations,
            checkpoint_every,
            resume,
        } => {
            let m = Manifest::load(&manifest)?;
            let frames = m.training_frames::<f32>(&manifest_root(&manifest), Split::Train)?;
            let cfg = PipelineConfig::for_profile(profile.into());
            let mut train_cfg = cfg.nerf;
            if let Some(n) = iterations {
                train_cfg.iterations = n;
            }
            let path = out.join("field.ckpt");
            let mut state = if resume && path.exists() {
                let mut s = NerfState::<f32>::from_checkpoint(&Checkpoint::load(&path)?)?;
                s.train.iterations = train_cfg.iterations;
                info!("resuming at iteration {}", s.iteration);
                s
            } else {
                NerfState::new(cfg.field, train_cfg, m.near as f32, m.far as f32)?
            };
            let save = |s: &NerfState<f32>| s.to_checkpoint().save(&path);
            train(&mut state, &frames, checkpoint_every, save)?;
            save(&state)?;
            info!("wrote {}", path.display());
        }
        Command::Render {
            checkpoint,
            manifest,
            out,
            split,
            samples,
        } => {
            let state = NerfState::<f32>::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let m = Manifest::load(&manifest)?;
            let idx: Vec<usize> = match split {
                SplitArg::Train => m.indices(Split::Train),
                SplitArg::Test => m.indices(Split::Test),
                SplitArg::All => (0..m.frames.len()).collect(),
            };
            let n = samples.unwrap_or(state.train.n_samples);
            for i in idx {
                let img = render_image(&state.field, &m.camera(i), n, false, 0, 1024)?;
                save_rgb(&out.join(format!("{}.png", m.frames[i].id)), img.rgb.view())?;
            }
        }
        Command::ExtractTexture {
            manifest,
            meshfit,
            frame,
            out,
            size,
        } => {
            let m = Manifest::load(&manifest)?;
            let mesh = MeshFit::load(&meshfit)?;
            let img: Array3<f32> = m.load_image(&manifest_root(&manifest), frame_index(&m, &frame)?)?;
            let (atlas, stats) = extract_texture(img.view(), &mesh, view_index(&mesh, &frame)?, size)?;
            atlas.save(&out, &frame)?;
            info!("{stats:?}; {} texels", atlas.coverage());
        }
        Command::Stitch { partials, out, stem } => {
            let atlases = partials.iter().map(|p| load_atlas(p)).collect::<Result<Vec<_>>>()?;
            stitch(&atlases)?.save(&out, &stem)?;
        }
        Command::RenderFace {
            manifest,
            meshfit,
            atlas,
            frame,
            out,
            mask,
        } => {
            let m = Manifest::load(&manifest)?;
            let mesh = MeshFit::load(&meshfit)?;
            let atlas = load_atlas(&atlas)?;
            let cam = m.camera::<f32>(frame_index(&m, &frame)?);
            let face = rasterize_face(&mesh, Some(view_index(&mesh, &frame)?), &atlas, &cam)?;
            save_rgb(&out, face.image.view())?;
            if let Some(p) = mask {
                let mask: Array2<f32> = face.mask.mapv(|b| if b { 1.0 } else { 0.0 });
                save_mask(&p, &mask)?;
            }
        }
        Command::BuildPairs {
            checkpoint,
            manifest,
            meshfit,
            atlas,
            out,
            without_3dmm,
        } => {
            let state = NerfState::<f32>::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let m = Manifest::load(&manifest)?;
            let mesh = MeshFit::load(&meshfit)?;
            let atlas = load_atlas(&atlas)?;
            let pairs = build_training_pairs(
                &state.field,
                &m,
                &manifest_root(&manifest),
                &mesh,
                &atlas,
                state.train.n_samples,
                without_3dmm,
            )?;
            save_pairs(&out, &pairs)?;
            info!("{} pairs", pairs.len());
        }
        Command::TrainFusion {
            pairs,
            out,
            profile,
            iterations,
            checkpoint_every,
            resume,
        } => {
            let pairs = load_pairs::<f32>(&pairs)?;
            let mut cfg: FusionTrainConfig = PipelineConfig::for_profile(profile.into()).fusion;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            let path = out.join("fusion.ckpt");
            let mut state = if resume && path.exists() {
                FusionState::<f32>::from_checkpoint(&Checkpoint::load(&path)?)?
            } else {
                FusionState::new(cfg)?
            };
            let save = |s: &FusionState<f32>| s.to_checkpoint().save(&path);
            train_fusion(&mut state, &pairs, cfg.iterations, checkpoint_every, &mut |s| save(s))?;
            save(&state)?;
        }
        Command::Fuse { gen, nerf, face, out } => {
            let g = FusionState::<f32>::generator_from_checkpoint(&Checkpoint::load(&gen)?)?;
            let nerf: Array3<f32> = load_rgb(&nerf)?;
            let face: Array3<f32> = load_rgb(&face)?;
            save_rgb(&out, fuse(&g, nerf.view(), face.view())?.view())?;
        }
        Command::Evaluate {
            pred,
            gt,
            blur,
            lpips,
            csv,
        } => {
            let plugin = lpips_plugin(lpips);
            let plugins: Vec<&dyn MetricPlugin> = plugin.iter().map(|p| p as &dyn MetricPlugin).collect();
            let table = evaluate_set(&pred, &gt, &plugins, blur)?;
            if let Some(p) = csv {
                table.write_csv(&p)?;
            }
            let mean = table.mean().ok_or_else(|| anyhow!("no matching images"))?;
            println!(
                "images {} psnr {:.3} ssim {:.4}",
                table.rows.len(),
                mean.psnr,
                mean.ssim
            );
            if let Some((p, s)) = mean.blurred {
                println!("blurred psnr {p:.3} ssim {s:.4}");
            }
            for (name, v) in table.plugin_names.iter().zip(&mean.plugins) {
                println!("{name} {v:.4}");
            }
        }
        Command::Pipeline {
            manifest,
            meshfit,
            out,
            config,
            profile,
            stage,
            without_3dmm,
            lpips,
            write_config,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::for_profile(profile.into()),
            };
            cfg.without_3dmm |= without_3dmm;
            if let Some(p) = write_config {
                cfg.save(&p)?;
                return Ok(());
            }
            let stages = if stage.is_empty() {
                Stage::ALL.to_vec()
            } else {
                stage
                    .iter()
                    .map(|s| Stage::from_name(s).ok_or_else(|| anyhow!("unknown stage `{s}`")))
                    .collect::<Result<_>>()?
            };
            let plugin = lpips_plugin(lpips);
            let plugins: Vec<&dyn MetricPlugin> = plugin.iter().map(|p| p as &dyn MetricPlugin).collect();
            let report = run_stages(&PipelineInputs { manifest, meshfit }, &out, &cfg, &stages, &plugins)?;
            for (s, outcome) in &report.stages {
                println!("{:<16} {outcome:?}", s.name());
            }
            for s in &report.scores {
                println!(
                    "{:<6} frames {} psnr {:.3} ssim {:.4}",
                    s.variant, s.frames, s.psnr, s.ssim
                );
            }
        }
        Command::Grid {
            images,
            out,
            zoom,
            scale,
            columns,
        } => {
            let mut loaded = Vec::new();
            for spec in &images {
                let (label, path) = spec
                    .split_once('=')
                    .ok_or_else(|| anyhow!("`{spec}` is not label=path"))?;
                loaded.push((label.to_string(), load_rgb::<f32>(Path::new(path))?));
            }
            let tiles: Vec<(&str, _)> = loaded.iter().map(|(l, im)| (l.as_str(), im.view())).collect();
            let options = GridOptions {
                zoom: zoom.as_deref().map(parse_zoom).transpose()?,
                zoom_scale: scale,
                columns,
            };
            save_rgb(&out, make_grid(&tiles, options)?.image.view())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = cli.command.stage();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let text = format!("{e:#}");
            if text.starts_with("stage `") {
                eprintln!("error: {text}");
            } else {
                eprintln!("error: stage `{stage}`: {text}");
            }
            ExitCode::FAILURE
        }
    }
}
