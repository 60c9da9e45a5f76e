//! Radiance field optimization: ray batches, the per-ray L2 loss, Adam steps
//! with exponential learning-rate decay, and resumable checkpoints.

use log::info;
use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::field::{FieldConfig, RadianceField};
use crate::geometry::{Camera, Ray};
use crate::nn::{Adam, AdamConfig, ExponentialDecay, ParamStore};
use crate::render::{composite_backward, composite_rows, pixel_seed, place_samples, RayRadiance};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub iterations: u64,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub batch_mode: BatchMode,
}

impl TrainConfig {
    /// 800k iterations of 500 rays.
    pub const fn full() -> Self {
        Self {
            lr_init: 5e-4,
            lr_final: 5e-5,
            iterations: 800_000,
            batch_rays: 500,
            n_samples: 64,
            seed: 0,
            batch_mode: BatchMode::Uniform,
        }
    }

    /// 20k iterations sized for 64×64 frames on a CPU.
    pub const fn desk() -> Self {
        Self {
            lr_init: 5e-3,
            lr_final: 5e-4,
            iterations: 20_000,
            batch_rays: 128,
            n_samples: 32,
            seed: 0,
            batch_mode: BatchMode::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init >= self.lr_final && self.lr_final > 0.0) {
            return Err(invalid("learning rates must satisfy lr_init ≥ lr_final > 0"));
        }
        if self.batch_rays == 0 {
            return Err(invalid("batch_rays must be ≥ 1"));
        }
        if self.n_samples < 2 {
            return Err(invalid("n_samples must be ≥ 2"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ExponentialDecay {
        ExponentialDecay {
            init: self.lr_init,
            last: self.lr_final,
            total: self.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Independent uniform draws over every (frame, pixel) pair.
    Uniform,
    /// Seeded permutation per epoch; every pixel once per epoch.
    Exhaustive,
}

/// Training-split frames with their cameras; images are `H × W × 3` in [0, 1].
#[derive(Debug, Clone)]
pub struct TrainingFrames<T> {
    pub cameras: Vec<Camera<T>>,
    pub images: Vec<Array3<T>>,
}

impl<T: Real> TrainingFrames<T> {
    pub fn pixel_count(&self) -> usize {
        self.images.iter().map(|im| im.shape()[0] * im.shape()[1]).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, usize, usize) {
        for (f, im) in self.images.iter().enumerate() {
            let n = im.shape()[0] * im.shape()[1];
            if index < n {
                return (f, index / im.shape()[1], index % im.shape()[1]);
            }
            index -= n;
        }
        unreachable!("pixel index within total")
    }
}

/// One training ray with its ground-truth color and where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySample<T> {
    pub ray: Ray<T>,
    pub target: [T; 3],
    pub frame: usize,
    pub pixel: (usize, usize),
}

pub fn sample_ray_batch<T: Real>(
    frames: &TrainingFrames<T>,
    batch_rays: usize,
    mode: BatchMode,
    seed: u64,
    iteration: u64,
) -> Result<Vec<RaySample<T>>> {
    let total = frames.pixel_count();
    if frames.images.is_empty() || total == 0 {
        return Err(invalid("training split is empty"));
    }
    let indices: Vec<usize> = match mode {
        BatchMode::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed, iteration));
            (0..batch_rays).map(|_| rng.random_range(0..total)).collect()
        }
        BatchMode::Exhaustive => {
            let start = iteration as usize * batch_rays;
            let mut perm_epoch = usize::MAX;
            let mut perm: Vec<usize> = Vec::new();
            (start..start + batch_rays)
                .map(|pos| {
                    let epoch = pos / total;
                    if epoch != perm_epoch {
                        perm = (0..total).collect();
                        let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed ^ 0xE90C, epoch as u64));
                        perm.shuffle(&mut rng);
                        perm_epoch = epoch;
                    }
                    perm[pos % total]
                })
                .collect()
        }
    };
    indices
        .into_iter()
        .map(|idx| {
            let (f, r, c) = frames.locate(idx);
            let cam = &frames.cameras[f];
            let half = T::lit(0.5);
            let ray = cam.ray_through(T::from_usize_lossy(c) + half, T::from_usize_lossy(r) + half);
            let im = &frames.images[f];
            Ok(RaySample {
                ray,
                target: [im[[r, c, 0]], im[[r, c, 1]], im[[r, c, 2]]],
                frame: f,
                pixel: (r, c),
            })
        })
        .collect()
}

/// Mean over the batch of the squared color error.
pub fn ray_loss<T: Real>(pred: &[RayRadiance<T>], target: &[[T; 3]]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let sum: T = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..3).map(|k| (p.color[k] - t[k]) * (p.color[k] - t[k])).sum::<T>())
        .sum();
    Ok(sum / T::from_usize_lossy(pred.len()))
}

/// Loss and parameter gradients for one batch; the gradient store is
/// overwritten.
pub fn loss_and_grads<T: Real>(
    field: &RadianceField<T>,
    batch: &[RaySample<T>],
    near: T,
    far: T,
    n_samples: usize,
    jitter_seed: Option<u64>,
    grads: &mut ParamStore<T>,
) -> Result<(T, Vec<RayRadiance<T>>)> {
    grads.fill_zero();
    let rays: Vec<Ray<T>> = batch.iter().map(|b| b.ray).collect();
    let seeds: Vec<u64> = (0..rays.len())
        .map(|i| pixel_seed(jitter_seed.unwrap_or(0), i as u64))
        .collect();
    let samples = place_samples(&rays, &seeds, near, far, n_samples, jitter_seed.is_some())?;
    let (out, tape) = field.forward(samples.points.view(), samples.dirs.view(), samples.times.view(), true);
    let tape = tape.expect("tape requested");
    let pred = composite_rows(&samples, out.sigma.view(), out.color.view(), far);
    let targets: Vec<[T; 3]> = batch.iter().map(|b| b.target).collect();
    let loss = ray_loss(&pred, &targets)?;

    let total = rays.len() * n_samples;
    let mut d_sigma = Array1::zeros(total);
    let mut d_color = Array2::zeros((total, 3));
    let scale = T::lit(2.0) / T::from_usize_lossy(rays.len());
    let mut ds = vec![T::zero(); n_samples];
    let mut dc = vec![[T::zero(); 3]; n_samples];
    for (r, (p, t)) in pred.iter().zip(&targets).enumerate() {
        let g = [
            scale * (p.color[0] - t[0]),
            scale * (p.color[1] - t[1]),
            scale * (p.color[2] - t[2]),
        ];
        let range = r * n_samples..(r + 1) * n_samples;
        let sg: Vec<T> = out.sigma.slice(ndarray::s![range.clone()]).to_vec();
        let cols: Vec<[T; 3]> = range
            .clone()
            .map(|i| [out.color[[i, 0]], out.color[[i, 1]], out.color[[i, 2]]])
            .collect();
        composite_backward(&sg, &cols, &samples.deltas[range.clone()], g, &mut ds, &mut dc);
        for (k, i) in range.enumerate() {
            d_sigma[i] = ds[k];
            for c in 0..3 {
                d_color[[i, c]] = dc[k][c];
            }
        }
    }
    field.backward(&tape, d_sigma.view(), d_color.view(), grads);
    Ok((loss, pred))
}

/// Optimizer state that fully determines the continuation of training.
#[derive(Debug, Clone)]
pub struct NerfState<T> {
    pub field: RadianceField<T>,
    pub adam: Adam<T>,
    pub train: TrainConfig,
    pub iteration: u64,
    pub near: T,
    pub far: T,
}

impl<T: Real> NerfState<T> {
    pub fn new(config: FieldConfig, train: TrainConfig, near: T, far: T) -> Result<Self> {
        train.validate()?;
        let field = RadianceField::init(config, train.seed)?;
        let adam = Adam::new(&field.params, AdamConfig::default());
        Ok(Self {
            field,
            adam,
            train,
            iteration: 0,
            near,
            far,
        })
    }

    pub fn lr(&self) -> f64 {
        self.train.schedule().at(self.iteration)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("nerf");
        ck.set("iteration", self.iteration);
        ck.set("adam_step", self.adam.step);
        ck.set("near", self.near.to_f64_lossy());
        ck.set("far", self.far.to_f64_lossy());
        ck.set_json("field_config", &self.field.config);
        ck.set_json("train_config", &self.train);
        ck.set_json("adam_config", &self.adam.config);
        ck.put_store("param", &self.field.params);
        ck.put_store("adam.m", &self.adam.m);
        ck.put_store("adam.v", &self.adam.v);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "nerf" {
            return Err(Error::Checkpoint(format!(
                "expected a nerf checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: FieldConfig = ck.get_json("field_config")?;
        let train: TrainConfig = ck.get_json("train_config")?;
        let adam_config: AdamConfig = ck.get_json("adam_config")?;
        let template = RadianceField::<T>::init(config, 0)?;
        let params = ck.take_store("param", &template.params)?;
        let field = RadianceField::from_params(config, params)?;
        let adam = Adam {
            config: adam_config,
            m: ck.take_store("adam.m", &template.params)?,
            v: ck.take_store("adam.v", &template.params)?,
            step: ck.get_parsed("adam_step")?,
        };
        Ok(Self {
            field,
            adam,
            train,
            iteration: ck.get_parsed("iteration")?,
            near: T::lit(ck.get_parsed("near")?),
            far: T::lit(ck.get_parsed("far")?),
        })
    }
}

/// One Adam step on a batch. Returns the batch loss.
pub fn train_step<T: Real>(
    state: &mut NerfState<T>,
    batch: &[RaySample<T>],
    lr: f64,
    grads: &mut ParamStore<T>,
) -> Result<T> {
    if !state.field.params.all_finite() {
        return Err(invalid("parameters are not finite"));
    }
    let jitter = pixel_seed(state.train.seed ^ 0x5A17, state.iteration);
    let (loss, _) = loss_and_grads(
        &state.field,
        batch,
        state.near,
        state.far,
        state.train.n_samples,
        Some(jitter),
        grads,
    )?;
    if !loss.is_finite() || !grads.all_finite() {
        let frames: Vec<usize> = batch.iter().map(|b| b.frame).take(8).collect();
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            detail: format!("loss {loss}; batch seed {} frames {frames:?}…", state.train.seed),
        });
    }
    state.adam.update(&mut state.field.params, grads, lr);
    state.iteration += 1;
    Ok(loss)
}

/// Runs until `state.train.iterations`, invoking `on_checkpoint` every
/// `checkpoint_every` iterations (0 disables it).
pub fn train<T: Real>(
    state: &mut NerfState<T>,
    frames: &TrainingFrames<T>,
    checkpoint_every: u64,
    mut on_checkpoint: impl FnMut(&NerfState<T>) -> Result<()>,
) -> Result<()> {
    train_until(
        state,
        frames,
        state.train.iterations,
        checkpoint_every,
        &mut on_checkpoint,
    )
}

/// Trains up to (not including) iteration `stop`.
pub fn train_until<T: Real>(
    state: &mut NerfState<T>,
    frames: &TrainingFrames<T>,
    stop: u64,
    checkpoint_every: u64,
    on_checkpoint: &mut dyn FnMut(&NerfState<T>) -> Result<()>,
) -> Result<()> {
    let mut grads = state.field.params.zeros_like();
    let mut running = 0.0;
    while state.iteration < stop.min(state.train.iterations) {
        let batch = sample_ray_batch(
            frames,
            state.train.batch_rays,
            state.train.batch_mode,
            state.train.seed,
            state.iteration,
        )?;
        let lr = state.lr();
        let loss = train_step(state, &batch, lr, &mut grads)?;
        running += loss.to_f64_lossy();
        if state.iteration.is_multiple_of(500) {
            info!(
                "nerf iter {} loss {:.5} lr {:.2e}",
                state.iteration,
                running / 500.0,
                lr
            );
            running = 0.0;
        }
        if checkpoint_every > 0 && state.iteration.is_multiple_of(checkpoint_every) {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rigid;

    fn frames(n: usize, size: usize) -> TrainingFrames<f64> {
        let cam = Camera {
            fx: size as f64,
            fy: size as f64,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            c2w: Rigid::identity(),
            near: 1.0,
            far: 3.0,
            time: 0.0,
        };
        TrainingFrames {
            cameras: vec![cam; n],
            images: (0..n)
                .map(|f| Array3::from_shape_fn((size, size, 3), |(r, c, k)| ((r + c + k + f) % 3) as f64 / 2.0))
                .collect(),
        }
    }

    #[test]
    fn exhaustive_small_case_covers_each_pixel_once() {
        let fr = frames(1, 2);
        let b = sample_ray_batch(&fr, 4, BatchMode::Exhaustive, 3, 0).unwrap();
        let mut px: Vec<_> = b.iter().map(|s| s.pixel).collect();
        px.sort();
        assert_eq!(px, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn batches_are_deterministic() {
        let fr = frames(2, 4);
        let a = sample_ray_batch(&fr, 16, BatchMode::Uniform, 3, 7).unwrap();
        let b = sample_ray_batch(&fr, 16, BatchMode::Uniform, 3, 7).unwrap();
        let c = sample_ray_batch(&fr, 16, BatchMode::Uniform, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_draws_balance_frames() {
        // 10k draws over two equal frames: count ~ Binomial(10000, 1/2), σ = 50
        let fr = frames(2, 4);
        let mut first = 0usize;
        for it in 0..100 {
            first += sample_ray_batch(&fr, 100, BatchMode::Uniform, 1, it)
                .unwrap()
                .iter()
                .filter(|s| s.frame == 0)
                .count();
        }
        assert!((first as f64 - 5000.0).abs() < 150.0, "{first}");
    }

    #[test]
    fn empty_split_rejected() {
        let fr = TrainingFrames::<f64> {
            cameras: vec![],
            images: vec![],
        };
        assert!(sample_ray_batch(&fr, 4, BatchMode::Uniform, 0, 0).is_err());
    }

    fn rr(c: [f64; 3]) -> RayRadiance<f64> {
        RayRadiance {
            color: c,
            transmittance_out: 0.0,
            expected_depth: 0.0,
        }
    }

    #[test]
    fn loss_cases() {
        assert_eq!(ray_loss(&[rr([0.2, 0.3, 0.4])], &[[0.2, 0.3, 0.4]]).unwrap(), 0.0);
        assert_eq!(ray_loss(&[rr([0.0; 3])], &[[1.0; 3]]).unwrap(), 3.0);
        let l = ray_loss(&[rr([0.5, 0.0, 0.0]), rr([0.0; 3])], &[[0.0; 3], [0.0; 3]]).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
        assert!(ray_loss(&[rr([0.0; 3])], &[]).is_err());
    }

    #[test]
    fn full_schedule_endpoints() {
        let s = TrainConfig::full().schedule();
        assert_eq!(s.at(0), 0.0005);
        assert!((s.at(800_000) - 0.00005).abs() < 1e-15);
    }
}
