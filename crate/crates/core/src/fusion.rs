//! Fusion network: an encoder / residual / decoder generator that maps the
//! channel-concatenated radiance-field render and face render to the final
//! image, a two-scale patch discriminator, and their adversarial training.

use std::path::Path;

use log::info;
use ndarray::{concatenate, s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, io_err, Error, Result};
use crate::imaging::{load_rgb, save_rgb};
use crate::nn::conv::{avg_pool2, avg_pool2_backward, ConvGeom};
use crate::nn::seq::{self, conv_layer, conv_transpose_layer, Cache, ConvInit, Layer};
use crate::nn::{Adam, AdamConfig, ExponentialDecay, ParamStore};
use crate::render::pixel_seed;
use crate::scalar::{log_sigmoid, sigmoid};
use crate::Real;

/// Channels of the conditioning input (radiance-field render ‖ face render).
pub const COND_CHANNELS: usize = 6;
const DOWNSAMPLING: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionNetConfig {
    /// Width of the first generator stage; doubles per downsampling stage.
    pub gen_width: usize,
    /// Width of the first discriminator stage.
    pub disc_width: usize,
    pub res_blocks: usize,
    pub init_std: f64,
}

impl FusionNetConfig {
    pub const fn full() -> Self {
        Self {
            gen_width: 32,
            disc_width: 64,
            res_blocks: 4,
            init_std: 0.02,
        }
    }

    /// Half the full widths.
    pub const fn desk() -> Self {
        Self {
            gen_width: 16,
            disc_width: 32,
            res_blocks: 4,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_width == 0 || self.disc_width == 0 {
            return Err(invalid("network widths must be ≥ 1"));
        }
        if !(self.init_std > 0.0) {
            return Err(invalid("init_std must be positive"));
        }
        Ok(())
    }
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLING) || !w.is_multiple_of(DOWNSAMPLING) {
        return Err(invalid(format!(
            "spatial size {h}×{w} must be a positive multiple of {DOWNSAMPLING}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: FusionNetConfig,
    pub params: ParamStore<T>,
    layers: Vec<Layer>,
}

impl<T: Real> Generator<T> {
    pub fn init(config: FusionNetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Same topology with the output convolution zeroed (output ≡ 0).
    pub fn init_zero_output(config: FusionNetConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: FusionNetConfig, seed: u64, zero_last: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let init = ConvInit::Normal { std: config.init_std };
        let w = config.gen_width;
        let mut layers = vec![
            conv_layer(
                &mut p,
                "gen.enc.0",
                COND_CHANNELS,
                w,
                ConvGeom::new(7, 1, 3),
                init,
                &mut rng,
            ),
            Layer::InstanceNorm,
            Layer::Relu,
        ];
        for i in 0..4 {
            let (cin, cout) = (w << i, w << (i + 1));
            let name = format!("gen.enc.{}", i + 1);
            layers.push(conv_layer(
                &mut p,
                &name,
                cin,
                cout,
                ConvGeom::new(3, 2, 1),
                init,
                &mut rng,
            ));
            layers.extend([Layer::InstanceNorm, Layer::Relu]);
        }
        let deep = w << 4;
        for b in 0..config.res_blocks {
            let body = vec![
                conv_layer(
                    &mut p,
                    &format!("gen.res.{b}.0"),
                    deep,
                    deep,
                    ConvGeom::new(3, 1, 1),
                    init,
                    &mut rng,
                ),
                Layer::InstanceNorm,
                Layer::Relu,
                conv_layer(
                    &mut p,
                    &format!("gen.res.{b}.1"),
                    deep,
                    deep,
                    ConvGeom::new(3, 1, 1),
                    init,
                    &mut rng,
                ),
                Layer::InstanceNorm,
            ];
            layers.push(Layer::Residual(body));
        }
        for i in 0..4 {
            let (cin, cout) = (w << (4 - i), w << (3 - i));
            let name = format!("gen.dec.{i}");
            layers.push(conv_transpose_layer(
                &mut p,
                &name,
                cin,
                cout,
                ConvGeom::new(3, 2, 1),
                1,
                init,
                &mut rng,
            ));
            layers.extend([Layer::InstanceNorm, Layer::Relu]);
        }
        let last = if zero_last { ConvInit::Zeros } else { init };
        layers.push(conv_layer(
            &mut p,
            "gen.out",
            w,
            3,
            ConvGeom::new(7, 1, 3),
            last,
            &mut rng,
        ));
        layers.push(Layer::Tanh);
        Ok(Self {
            config,
            params: p,
            layers,
        })
    }

    pub fn from_params(config: FusionNetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut g = Self::init(config, 0)?;
        if !g.params.same_layout(&params) {
            return Err(Error::Checkpoint("generator parameter layout differs".into()));
        }
        g.params = params;
        Ok(g)
    }

    /// `N × 6 × H × W` → `N × 3 × H × W` in (−1, 1).
    pub fn forward(&self, x: ArrayView4<T>) -> Result<Array4<T>> {
        check_cond(x)?;
        Ok(seq::forward(&self.layers, &self.params, seq::view_input(x), None))
    }

    fn forward_cached(&self, x: ArrayView4<T>) -> Result<(Array4<T>, Vec<Cache<T>>)> {
        check_cond(x)?;
        let mut caches = Vec::new();
        let y = seq::forward(&self.layers, &self.params, seq::view_input(x), Some(&mut caches));
        Ok((y, caches))
    }

    fn backward(&self, caches: &[Cache<T>], dy: Array4<T>, grads: &mut ParamStore<T>) {
        seq::backward(&self.layers, &self.params, grads, caches, dy, false);
    }

    /// Gradient of `Σ dy ⊙ G(x)` with respect to the parameters (accumulated
    /// into `grads`), returning `G(x)`.
    pub fn vjp(&self, x: ArrayView4<T>, dy: ArrayView4<T>, grads: &mut ParamStore<T>) -> Result<Array4<T>> {
        let (y, caches) = self.forward_cached(x)?;
        if y.dim() != dy.dim() {
            return Err(Error::ShapeMismatch("output gradient shape".into()));
        }
        self.backward(&caches, dy.to_owned(), grads);
        Ok(y)
    }
}

fn check_cond<T: Real>(x: ArrayView4<T>) -> Result<()> {
    if x.shape()[1] != COND_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "conditioning has {} channels, expected {COND_CHANNELS}",
            x.shape()[1]
        )));
    }
    check_size(x.shape()[2], x.shape()[3])
}

/// Two patch discriminators: one on full-resolution inputs and one on 2×
/// average-pooled inputs.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: FusionNetConfig,
    pub params: ParamStore<T>,
    scales: [Vec<Layer>; 2],
}

/// Logit maps per scale (`N × 1 × h × w`).
pub type Logits<T> = [Array4<T>; 2];

pub struct DiscTape<T> {
    caches: [Vec<Cache<T>>; 2],
    hw: (usize, usize),
}

impl<T: Real> Discriminator<T> {
    pub fn init(config: FusionNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C);
        let mut p = ParamStore::new();
        let init = ConvInit::Normal { std: config.init_std };
        let w = config.disc_width;
        let scales = [0, 1].map(|sc| {
            let name = |i: usize| format!("disc.scale{sc}.{i}");
            let k4 = |stride| ConvGeom::new(4, stride, 1);
            vec![
                conv_layer(&mut p, &name(0), 3 + COND_CHANNELS, w, k4(2), init, &mut rng),
                Layer::LeakyRelu(0.2),
                conv_layer(&mut p, &name(1), w, 2 * w, k4(2), init, &mut rng),
                Layer::InstanceNorm,
                Layer::LeakyRelu(0.2),
                conv_layer(&mut p, &name(2), 2 * w, 4 * w, k4(2), init, &mut rng),
                Layer::InstanceNorm,
                Layer::LeakyRelu(0.2),
                conv_layer(&mut p, &name(3), 4 * w, 8 * w, k4(1), init, &mut rng),
                Layer::InstanceNorm,
                Layer::LeakyRelu(0.2),
                conv_layer(&mut p, &name(4), 8 * w, 1, k4(1), init, &mut rng),
            ]
        });
        Ok(Self {
            config,
            params: p,
            scales,
        })
    }

    pub fn from_params(config: FusionNetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut d = Self::init(config, 0)?;
        if !d.params.same_layout(&params) {
            return Err(Error::Checkpoint("discriminator parameter layout differs".into()));
        }
        d.params = params;
        Ok(d)
    }

    /// Logit-map sizes at both scales for an `h × w` input.
    pub fn patch_shapes(&self, h: usize, w: usize) -> Option<[(usize, usize); 2]> {
        Some([
            seq::output_hw(&self.scales[0], h, w)?,
            seq::output_hw(&self.scales[1], h / 2, w / 2)?,
        ])
    }

    fn run(
        &self,
        candidate: ArrayView4<T>,
        cond: ArrayView4<T>,
        keep: bool,
    ) -> Result<(Logits<T>, Option<DiscTape<T>>)> {
        if candidate.shape()[1] != 3 || candidate.shape()[0] != cond.shape()[0] {
            return Err(Error::ShapeMismatch("candidate must be N × 3 × H × W".into()));
        }
        check_cond(cond)?;
        if candidate.shape()[2..] != cond.shape()[2..] {
            return Err(Error::ShapeMismatch("candidate and conditioning sizes differ".into()));
        }
        if self.patch_shapes(cond.shape()[2], cond.shape()[3]).is_none() {
            return Err(invalid(format!(
                "discriminator input {}×{} is too small for the half-scale branch (min 48)",
                cond.shape()[2],
                cond.shape()[3]
            )));
        }
        let full = concatenate![Axis(1), candidate, cond];
        let half = avg_pool2(full.view());
        let mut caches: [Vec<Cache<T>>; 2] = [Vec::new(), Vec::new()];
        let [c0, c1] = &mut caches;
        let l0 = seq::forward(&self.scales[0], &self.params, full, keep.then_some(c0));
        let l1 = seq::forward(&self.scales[1], &self.params, half, keep.then_some(c1));
        let hw = (candidate.shape()[2], candidate.shape()[3]);
        Ok(([l0, l1], keep.then_some(DiscTape { caches, hw })))
    }

    pub fn forward(&self, candidate: ArrayView4<T>, cond: ArrayView4<T>) -> Result<Logits<T>> {
        Ok(self.run(candidate, cond, false)?.0)
    }

    pub fn forward_taped(&self, candidate: ArrayView4<T>, cond: ArrayView4<T>) -> Result<(Logits<T>, DiscTape<T>)> {
        let (l, t) = self.run(candidate, cond, true)?;
        Ok((l, t.expect("tape kept")))
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns
    /// the gradient with respect to the candidate image.
    pub fn backward(&self, tape: &DiscTape<T>, d_logits: &Logits<T>, grads: Option<&mut ParamStore<T>>) -> Array4<T> {
        let mut scratch;
        let grads = match grads {
            Some(g) => g,
            None => {
                scratch = self.params.zeros_like();
                &mut scratch
            }
        };
        let d0 = seq::backward(
            &self.scales[0],
            &self.params,
            grads,
            &tape.caches[0],
            d_logits[0].clone(),
            true,
        )
        .expect("dx requested");
        let d1 = seq::backward(
            &self.scales[1],
            &self.params,
            grads,
            &tape.caches[1],
            d_logits[1].clone(),
            true,
        )
        .expect("dx requested");
        let d_full = d0 + avg_pool2_backward(d1.view(), tape.hw.0, tape.hw.1);
        d_full.slice(s![.., ..3, .., ..]).to_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialLoss {
    /// Binary cross-entropy on logits, non-saturating for the generator.
    Bce,
    /// Least squares against targets 1 (real) and 0 (fake).
    LeastSquares,
}

/// Discriminator objective split into its real and fake expectations, each
/// averaged over patches and then over scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscLoss<T> {
    pub real: T,
    pub fake: T,
}

impl<T: Real> DiscLoss<T> {
    pub fn total(&self) -> T {
        self.real + self.fake
    }
}

fn per_patch<T: Real>(logits: &Logits<T>, f: impl Fn(T) -> (T, T)) -> (T, Logits<T>) {
    let mut total = T::zero();
    let grads = [0, 1].map(|s| {
        let n = T::from_usize_lossy(logits[s].len());
        let scale = T::lit(0.5) / n;
        let mut sum = T::zero();
        let g = logits[s].mapv(|v| {
            let (l, d) = f(v);
            sum += l;
            d * scale
        });
        total += sum * scale;
        g
    });
    (total, grads)
}

/// `−log σ(a)` and its derivative.
fn bce_real<T: Real>(a: T) -> (T, T) {
    (-log_sigmoid(a), sigmoid(a) - T::one())
}

/// `−log(1 − σ(a))` and its derivative.
fn bce_fake<T: Real>(a: T) -> (T, T) {
    (-log_sigmoid(-a), sigmoid(a))
}

/// Discriminator loss and gradients with respect to both logit sets.
pub fn disc_loss<T: Real>(
    real: &Logits<T>,
    fake: &Logits<T>,
    kind: AdversarialLoss,
) -> (DiscLoss<T>, Logits<T>, Logits<T>) {
    let (r, dr, f, df) = match kind {
        AdversarialLoss::Bce => {
            let (r, dr) = per_patch(real, bce_real);
            let (f, df) = per_patch(fake, bce_fake);
            (r, dr, f, df)
        }
        AdversarialLoss::LeastSquares => {
            let one = T::one();
            let two = T::lit(2.0);
            let (r, dr) = per_patch(real, |a| ((a - one) * (a - one), two * (a - one)));
            let (f, df) = per_patch(fake, |a| (a * a, two * a));
            (r, dr, f, df)
        }
    };
    (DiscLoss { real: r, fake: f }, dr, df)
}

/// Adversarial part of the generator loss and its logit gradient.
pub fn gen_adv_loss<T: Real>(fake: &Logits<T>, kind: AdversarialLoss) -> (T, Logits<T>) {
    match kind {
        AdversarialLoss::Bce => per_patch(fake, bce_real),
        AdversarialLoss::LeastSquares => {
            let one = T::one();
            let two = T::lit(2.0);
            per_patch(fake, |a| ((a - one) * (a - one), two * (a - one)))
        }
    }
}

/// Mean squared error over all elements and its gradient.
pub fn l2_loss<T: Real>(pred: ArrayView4<T>, target: ArrayView4<T>) -> (T, Array4<T>) {
    let n = T::from_usize_lossy(pred.len());
    let diff = &pred - &target;
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let two = T::lit(2.0);
    (loss, diff.mapv(|d| two * d / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionLosses<T> {
    pub gen: T,
    pub gen_adv: T,
    pub gen_l2: T,
    pub disc: DiscLoss<T>,
}

/// Both objectives for one batch, without updating anything.
pub fn fusion_losses<T: Real>(
    gen: &Generator<T>,
    disc: &Discriminator<T>,
    batch: &FusionBatch<T>,
    lambda_l2: f64,
    kind: AdversarialLoss,
) -> Result<FusionLosses<T>> {
    if !(lambda_l2 >= 0.0) {
        return Err(invalid("λ₂ must be ≥ 0"));
    }
    let fake = gen.forward(batch.cond.view())?;
    let real_logits = disc.forward(batch.gt.view(), batch.cond.view())?;
    let fake_logits = disc.forward(fake.view(), batch.cond.view())?;
    let (d, _, _) = disc_loss(&real_logits, &fake_logits, kind);
    let (adv, _) = gen_adv_loss(&fake_logits, kind);
    let (l2, _) = l2_loss(fake.view(), batch.gt.view());
    Ok(FusionLosses {
        gen: adv + T::lit(lambda_l2) * l2,
        gen_adv: adv,
        gen_l2: l2,
        disc: d,
    })
}

/// One training example, every image `3 × H × W` in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPair<T> {
    pub id: String,
    pub nerf: Array3<T>,
    /// −1 outside the face mask (black before normalization).
    pub face: Array3<T>,
    pub gt: Array3<T>,
}

pub fn normalize<T: Real>(rgb: ArrayView3<T>) -> Array3<T> {
    let two = T::lit(2.0);
    rgb.permuted_axes([2, 0, 1]).mapv(|v| v * two - T::one())
}

pub fn denormalize<T: Real>(chw: ArrayView3<T>) -> Array3<T> {
    let half = T::lit(0.5);
    chw.permuted_axes([1, 2, 0])
        .mapv(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
}

impl<T: Real> FusionPair<T> {
    /// From `H × W × 3` images in [0, 1].
    pub fn from_unit(id: &str, nerf: ArrayView3<T>, face: ArrayView3<T>, gt: ArrayView3<T>) -> Result<Self> {
        if nerf.dim() != face.dim() || nerf.dim() != gt.dim() || nerf.shape()[2] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "pair `{id}`: {:?} / {:?} / {:?}",
                nerf.dim(),
                face.dim(),
                gt.dim()
            )));
        }
        Ok(Self {
            id: id.to_string(),
            nerf: normalize(nerf),
            face: normalize(face),
            gt: normalize(gt),
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.gt.shape()[1], self.gt.shape()[2])
    }

    pub fn cond(&self) -> Array3<T> {
        concatenate![Axis(0), self.nerf, self.face]
    }
}

/// Writes `<id>_nerf.png`, `<id>_face.png`, `<id>_gt.png` per pair.
pub fn save_pairs<T: Real>(dir: &Path, pairs: &[FusionPair<T>]) -> Result<()> {
    for p in pairs {
        for (tag, img) in [("nerf", &p.nerf), ("face", &p.face), ("gt", &p.gt)] {
            save_rgb(&dir.join(format!("{}_{tag}.png", p.id)), denormalize(img.view()).view())?;
        }
    }
    Ok(())
}

pub fn load_pairs<T: Real>(dir: &Path) -> Result<Vec<FusionPair<T>>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_string_lossy()
                .strip_suffix("_gt.png")
                .map(str::to_string)
        })
        .collect();
    ids.sort();
    ids.iter()
        .map(|id| {
            let load = |tag: &str| load_rgb::<T>(&dir.join(format!("{id}_{tag}.png")));
            FusionPair::from_unit(id, load("nerf")?.view(), load("face")?.view(), load("gt")?.view())
        })
        .collect()
}

/// Stacked batch tensors.
pub struct FusionBatch<T> {
    pub cond: Array4<T>,
    pub gt: Array4<T>,
}

impl<T: Real> FusionBatch<T> {
    pub fn stack(pairs: &[&FusionPair<T>]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| invalid("empty batch"))?;
        let (h, w) = first.hw();
        if pairs.iter().any(|p| p.hw() != (h, w)) {
            return Err(Error::ShapeMismatch("pairs differ in resolution".into()));
        }
        let conds: Vec<_> = pairs.iter().map(|p| p.cond().insert_axis(Axis(0))).collect();
        let gts: Vec<_> = pairs.iter().map(|p| p.gt.clone().insert_axis(Axis(0))).collect();
        let cond_views: Vec<_> = conds.iter().map(|a| a.view()).collect();
        let gt_views: Vec<_> = gts.iter().map(|a| a.view()).collect();
        Ok(Self {
            cond: concatenate(Axis(0), &cond_views).expect("same shapes"),
            gt: concatenate(Axis(0), &gt_views).expect("same shapes"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainConfig {
    pub net: FusionNetConfig,
    pub lr_init: f64,
    pub lr_final: f64,
    pub iterations: u64,
    pub batch: usize,
    pub lambda_l2: f64,
    pub adversarial: AdversarialLoss,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl FusionTrainConfig {
    pub fn full() -> Self {
        Self {
            net: FusionNetConfig::full(),
            lr_init: 2e-4,
            lr_final: 2e-7,
            iterations: 60_000,
            batch: 8,
            lambda_l2: 1.0,
            adversarial: AdversarialLoss::Bce,
            adam: AdamConfig {
                beta1: 0.5,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }

    /// Half-width networks, 2000 iterations of two-pair batches. With λ₂ = 1
    /// the adversarial term dominates at higher rates or faster decay.
    pub fn desk() -> Self {
        Self {
            net: FusionNetConfig::desk(),
            lr_init: 2e-4,
            lr_final: 1e-4,
            iterations: 2000,
            batch: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr_init >= self.lr_final && self.lr_final > 0.0) {
            return Err(invalid("learning rates must satisfy lr_init ≥ lr_final > 0"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be ≥ 1"));
        }
        if !(self.lambda_l2 >= 0.0) {
            return Err(invalid("λ₂ must be ≥ 0"));
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

#[derive(Debug, Clone)]
pub struct FusionState<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub gen_adam: Adam<T>,
    pub disc_adam: Adam<T>,
    pub config: FusionTrainConfig,
    pub iteration: u64,
}

impl<T: Real> FusionState<T> {
    pub fn new(config: FusionTrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::init(config.net, config.seed)?;
        let disc = Discriminator::init(config.net, config.seed)?;
        Ok(Self {
            gen_adam: Adam::new(&gen.params, config.adam),
            disc_adam: Adam::new(&disc.params, config.adam),
            gen,
            disc,
            config,
            iteration: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("fusion");
        ck.set("iteration", self.iteration);
        ck.set("gen_adam_step", self.gen_adam.step);
        ck.set("disc_adam_step", self.disc_adam.step);
        ck.set_json("train_config", &self.config);
        ck.put_store("gen", &self.gen.params);
        ck.put_store("disc", &self.disc.params);
        ck.put_store("gen_adam.m", &self.gen_adam.m);
        ck.put_store("gen_adam.v", &self.gen_adam.v);
        ck.put_store("disc_adam.m", &self.disc_adam.m);
        ck.put_store("disc_adam.v", &self.disc_adam.v);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "fusion" {
            return Err(Error::Checkpoint(format!(
                "expected a fusion checkpoint, found `{}`",
                ck.kind
            )));
        }
        let config: FusionTrainConfig = ck.get_json("train_config")?;
        let fresh = Self::new(config)?;
        let gen = Generator::from_params(config.net, ck.take_store("gen", &fresh.gen.params)?)?;
        let disc = Discriminator::from_params(config.net, ck.take_store("disc", &fresh.disc.params)?)?;
        Ok(Self {
            gen_adam: Adam {
                config: config.adam,
                m: ck.take_store("gen_adam.m", &gen.params)?,
                v: ck.take_store("gen_adam.v", &gen.params)?,
                step: ck.get_parsed("gen_adam_step")?,
            },
            disc_adam: Adam {
                config: config.adam,
                m: ck.take_store("disc_adam.m", &disc.params)?,
                v: ck.take_store("disc_adam.v", &disc.params)?,
                step: ck.get_parsed("disc_adam_step")?,
            },
            gen,
            disc,
            config,
            iteration: ck.get_parsed("iteration")?,
        })
    }

    /// Generator only, for inference from a fusion checkpoint.
    pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<Generator<T>> {
        let config: FusionTrainConfig = ck.get_json("train_config")?;
        let template = Generator::<T>::init(config.net, 0)?;
        Generator::from_params(config.net, ck.take_store("gen", &template.params)?)
    }
}

/// Pair indices of the batch at `iteration`: a seeded shuffle, truncated to
/// `batch` (all pairs when `batch` exceeds the set).
pub fn batch_indices(n_pairs: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(pixel_seed(seed ^ 0xF05E, iteration));
    idx.shuffle(&mut rng);
    idx.truncate(batch.min(n_pairs));
    idx
}

/// One discriminator step followed by one generator step.
pub fn fusion_step<T: Real>(state: &mut FusionState<T>, batch: &FusionBatch<T>) -> Result<FusionLosses<T>> {
    let cfg = state.config;
    let lr = cfg.schedule().at(state.iteration);
    let (fake, g_caches) = state.gen.forward_cached(batch.cond.view())?;

    let mut d_grads = state.disc.params.zeros_like();
    let (real_logits, real_tape) = state.disc.forward_taped(batch.gt.view(), batch.cond.view())?;
    let (fake_logits, fake_tape) = state.disc.forward_taped(fake.view(), batch.cond.view())?;
    let (d_loss, d_real, d_fake) = disc_loss(&real_logits, &fake_logits, cfg.adversarial);
    state.disc.backward(&real_tape, &d_real, Some(&mut d_grads));
    state.disc.backward(&fake_tape, &d_fake, Some(&mut d_grads));

    let (fake_logits, tape) = state.disc.forward_taped(fake.view(), batch.cond.view())?;
    let (adv, d_adv) = gen_adv_loss(&fake_logits, cfg.adversarial);
    let (l2, d_l2) = l2_loss(fake.view(), batch.gt.view());
    let d_fake_img = state.disc.backward(&tape, &d_adv, None) + d_l2 * T::lit(cfg.lambda_l2);
    let mut g_grads = state.gen.params.zeros_like();
    state.gen.backward(&g_caches, d_fake_img, &mut g_grads);

    let losses = FusionLosses {
        gen: adv + T::lit(cfg.lambda_l2) * l2,
        gen_adv: adv,
        gen_l2: l2,
        disc: d_loss,
    };
    let finite = losses.gen.is_finite() && losses.disc.total().is_finite();
    if !finite || !g_grads.all_finite() || !d_grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            detail: format!("generator {} discriminator {}", losses.gen, losses.disc.total()),
        });
    }
    state.disc_adam.update(&mut state.disc.params, &d_grads, lr);
    state.gen_adam.update(&mut state.gen.params, &g_grads, lr);
    state.iteration += 1;
    Ok(losses)
}

/// Trains up to (not including) iteration `stop`, calling `on_checkpoint`
/// every `checkpoint_every` iterations (0 disables it).
pub fn train_fusion<T: Real>(
    state: &mut FusionState<T>,
    pairs: &[FusionPair<T>],
    stop: u64,
    checkpoint_every: u64,
    on_checkpoint: &mut dyn FnMut(&FusionState<T>) -> Result<()>,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let (h, w) = pairs[0].hw();
    check_size(h, w)?;
    let mut running = 0.0;
    while state.iteration < stop.min(state.config.iterations) {
        let idx = batch_indices(pairs.len(), state.config.batch, state.config.seed, state.iteration);
        let chosen: Vec<&FusionPair<T>> = idx.iter().map(|&i| &pairs[i]).collect();
        let batch = FusionBatch::stack(&chosen)?;
        let losses = fusion_step(state, &batch)?;
        running += losses.gen_l2.to_f64_lossy();
        if state.iteration.is_multiple_of(100) {
            info!(
                "fusion iter {} l2 {:.5} adv {:.4} disc {:.4}",
                state.iteration,
                running / 100.0,
                losses.gen_adv,
                losses.disc.total()
            );
            running = 0.0;
        }
        if checkpoint_every > 0 && state.iteration.is_multiple_of(checkpoint_every) {
            on_checkpoint(state)?;
        }
    }
    Ok(())
}

/// Runs the generator on one (radiance-field render, face render) pair given
/// as `H × W × 3` images in [0, 1]; returns the fused image in [0, 1].
pub fn fuse<T: Real>(gen: &Generator<T>, nerf: ArrayView3<T>, face: ArrayView3<T>) -> Result<Array3<T>> {
    if nerf.dim() != face.dim() {
        return Err(Error::ShapeMismatch("renders differ in size".into()));
    }
    let cond = concatenate![Axis(0), normalize(nerf), normalize(face)].insert_axis(Axis(0));
    let out = gen.forward(cond.view())?;
    Ok(denormalize(out.index_axis(Axis(0), 0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> FusionNetConfig {
        FusionNetConfig {
            gen_width: 2,
            disc_width: 2,
            res_blocks: 1,
            init_std: 0.02,
        }
    }

    fn input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn generator_preserves_size_and_range() {
        let g = Generator::<f64>::init(tiny(), 1).unwrap();
        let x = input(2, 6, 32, 48, 2);
        let y = g.forward(x.view()).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 48]);
        assert!(y.iter().all(|v| v.abs() < 1.0));
        assert_eq!(y, g.forward(x.view()).unwrap());
    }

    #[test]
    fn zero_output_layer_gives_zero_image() {
        let g = Generator::<f64>::init_zero_output(tiny(), 1).unwrap();
        let y = g.forward(input(1, 6, 16, 16, 3).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_sizes_and_channels() {
        let g = Generator::<f64>::init(tiny(), 1).unwrap();
        assert!(g.forward(input(1, 6, 24, 16, 0).view()).is_err());
        assert!(g.forward(input(1, 5, 16, 16, 0).view()).is_err());
    }

    #[test]
    fn full_layer_shapes() {
        let g = Generator::<f32>::init(FusionNetConfig::full(), 0).unwrap();
        let w = g.params.get(g.params.find("gen.enc.0.weight").unwrap());
        assert_eq!(w.shape, vec![32, 6, 7, 7]);
        let deepest = g.params.get(g.params.find("gen.res.3.1.weight").unwrap());
        assert_eq!(deepest.shape, vec![512, 512, 3, 3]);
        let d = Discriminator::<f32>::init(FusionNetConfig::full(), 0).unwrap();
        let first = d.params.get(d.params.find("disc.scale0.0.weight").unwrap());
        assert_eq!(first.shape, vec![64, 9, 4, 4]);
        assert_eq!(d.patch_shapes(512, 512), Some([(62, 62), (30, 30)]));
        assert_eq!(d.patch_shapes(64, 64), Some([(6, 6), (2, 2)]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn patch_shape_formula(a in 3usize..6, b in 3usize..6) {
            let (h, w) = (16 * a, 16 * b);
            let d = Discriminator::<f64>::init(tiny(), 0).unwrap();
            let logits = d.forward(input(1, 3, h, w, 1).view(), input(1, 6, h, w, 2).view()).unwrap();
            prop_assert_eq!(logits[0].shape(), &[1, 1, h / 8 - 2, w / 8 - 2]);
            prop_assert_eq!(logits[1].shape(), &[1, 1, h / 16 - 2, w / 16 - 2]);
        }
    }

    #[test]
    fn zero_discriminator_gives_zero_logits() {
        let mut d = Discriminator::<f64>::init(tiny(), 0).unwrap();
        for t in d.params.tensors_mut() {
            t.data.fill(0.0);
        }
        let l = d
            .forward(input(1, 3, 48, 48, 1).view(), input(1, 6, 48, 48, 2).view())
            .unwrap();
        assert!(d
            .forward(input(1, 3, 32, 32, 1).view(), input(1, 6, 32, 32, 2).view())
            .is_err());
        assert!(l.iter().all(|m| m.iter().all(|&v| v == 0.0)));
    }

    fn const_logits(v: f64) -> Logits<f64> {
        [Array4::from_elem((1, 1, 3, 3), v), Array4::from_elem((1, 1, 2, 2), v)]
    }

    #[test]
    fn zero_logit_losses_are_log_two() {
        let ln2 = std::f64::consts::LN_2;
        let (d, _, _) = disc_loss(&const_logits(0.0), &const_logits(0.0), AdversarialLoss::Bce);
        assert!((d.real - ln2).abs() < 1e-15 && (d.fake - ln2).abs() < 1e-15);
        let (g, _) = gen_adv_loss(&const_logits(0.0), AdversarialLoss::Bce);
        assert!((g - ln2).abs() < 1e-15);
        let same = input(1, 3, 4, 4, 9);
        assert_eq!(l2_loss(same.view(), same.view()).0, 0.0);
    }

    #[test]
    fn swapping_real_and_fake_swaps_expectations() {
        let a = [input(1, 1, 3, 3, 1), input(1, 1, 2, 2, 2)];
        let b = [input(1, 1, 3, 3, 3), input(1, 1, 2, 2, 4)];
        let neg = |l: &Logits<f64>| [l[0].mapv(|v| -v), l[1].mapv(|v| -v)];
        let (x, _, _) = disc_loss(&a, &b, AdversarialLoss::Bce);
        let (y, _, _) = disc_loss(&neg(&b), &neg(&a), AdversarialLoss::Bce);
        assert_eq!((x.real, x.fake), (y.fake, y.real));
    }

    #[test]
    fn loss_gradients_match_differences() {
        let a = [input(1, 1, 3, 3, 5).mapv(|v| 3.0 * v), input(1, 1, 2, 2, 6)];
        let b = [input(1, 1, 3, 3, 7), input(1, 1, 2, 2, 8).mapv(|v| 2.0 * v)];
        for kind in [AdversarialLoss::Bce, AdversarialLoss::LeastSquares] {
            let (_, dr, df) = disc_loss(&a, &b, kind);
            let (_, dg) = gen_adv_loss(&b, kind);
            let h = 1e-6;
            for s in 0..2 {
                for i in 0..a[s].len() {
                    let bump = |l: &Logits<f64>, e: f64| {
                        let mut l = l.clone();
                        let v = l[s].as_slice_mut().unwrap();
                        v[i] += e;
                        l
                    };
                    let fd_r = (disc_loss(&bump(&a, h), &b, kind).0.total()
                        - disc_loss(&bump(&a, -h), &b, kind).0.total())
                        / (2.0 * h);
                    let fd_f = (disc_loss(&a, &bump(&b, h), kind).0.total()
                        - disc_loss(&a, &bump(&b, -h), kind).0.total())
                        / (2.0 * h);
                    let fd_g = (gen_adv_loss(&bump(&b, h), kind).0 - gen_adv_loss(&bump(&b, -h), kind).0) / (2.0 * h);
                    assert!((fd_r - dr[s].as_slice().unwrap()[i]).abs() < 1e-8);
                    assert!((fd_f - df[s].as_slice().unwrap()[i]).abs() < 1e-8);
                    assert!((fd_g - dg[s].as_slice().unwrap()[i]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn discriminator_input_gradient_matches_differences() {
        let d = Discriminator::<f64>::init(tiny(), 4).unwrap();
        let cand = input(1, 3, 48, 48, 1);
        let cond = input(1, 6, 48, 48, 2);
        let (l, tape) = d.forward_taped(cand.view(), cond.view()).unwrap();
        let weights = [
            input(1, 1, l[0].shape()[2], l[0].shape()[3], 3),
            input(1, 1, l[1].shape()[2], l[1].shape()[3], 4),
        ];
        let obj = |c: &Array4<f64>| {
            let l = d.forward(c.view(), cond.view()).unwrap();
            (&l[0] * &weights[0]).sum() + (&l[1] * &weights[1]).sum()
        };
        let dc = d.backward(&tape, &weights, None);
        for (i, &(ch, y, x)) in [(0usize, 3usize, 4usize), (2, 17, 30), (1, 0, 0), (0, 47, 47)]
            .iter()
            .enumerate()
        {
            let h = 1e-5;
            let mut p = cand.clone();
            p[[0, ch, y, x]] += h;
            let mut m = cand.clone();
            m[[0, ch, y, x]] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            let an = dc[[0, ch, y, x]];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "probe {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn normalization_endpoints_and_face_background() {
        let img = Array3::from_shape_fn((2, 2, 3), |(r, c, _)| if r == c { 1.0 } else { 0.0 });
        let n = normalize(img.view());
        assert_eq!(n[[0, 0, 0]], 1.0);
        assert_eq!(n[[0, 0, 1]], -1.0);
        assert_eq!(denormalize(n.view()), img);
        let face = Array3::<f64>::zeros((2, 2, 3));
        let p = FusionPair::from_unit("x", img.view(), face.view(), img.view()).unwrap();
        assert!(p.face.iter().all(|&v| v == -1.0));
        assert_eq!(p.cond().shape(), &[6, 2, 2]);
    }

    #[test]
    fn batch_indices_are_seeded_subsets() {
        let a = batch_indices(8, 3, 1, 5);
        assert_eq!(a, batch_indices(8, 3, 1, 5));
        assert_eq!(a.len(), 3);
        let mut all = batch_indices(8, 20, 1, 5);
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    fn pairs(n: usize, hw: usize) -> Vec<FusionPair<f32>> {
        (0..n)
            .map(|i| {
                let img = |k: usize| {
                    Array3::from_shape_fn((hw, hw, 3), |(r, c, ch)| {
                        (((r * 7 + c * 3 + ch * 5 + i * 11 + k) % 17) as f32) * 15.0 / 255.0
                    })
                };
                FusionPair::from_unit(&format!("p{i}"), img(0).view(), img(1).view(), img(2).view()).unwrap()
            })
            .collect()
    }

    fn tiny_train() -> FusionTrainConfig {
        FusionTrainConfig {
            net: tiny(),
            iterations: 6,
            batch: 2,
            ..FusionTrainConfig::desk()
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = pairs(3, 48);
        let mut straight = FusionState::<f32>::new(tiny_train()).unwrap();
        train_fusion(&mut straight, &data, u64::MAX, 0, &mut |_| Ok(())).unwrap();
        let mut first = FusionState::<f32>::new(tiny_train()).unwrap();
        train_fusion(&mut first, &data, 3, 0, &mut |_| Ok(())).unwrap();
        let mut bytes = Vec::new();
        first.to_checkpoint().write_to(&mut bytes).unwrap();
        let ck = Checkpoint::read_from(bytes.as_slice()).unwrap();
        let mut resumed = FusionState::<f32>::from_checkpoint(&ck).unwrap();
        train_fusion(&mut resumed, &data, u64::MAX, 0, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.iteration, 6);
        assert_eq!(resumed.gen.params, straight.gen.params);
        assert_eq!(resumed.disc.params, straight.disc.params);
    }

    #[test]
    fn discriminator_alone_learns() {
        // fixed generator, D updated only: the D loss must fall
        let data = pairs(4, 48);
        let mut st = FusionState::<f32>::new(FusionTrainConfig {
            net: FusionNetConfig {
                gen_width: 4,
                disc_width: 4,
                res_blocks: 1,
                init_std: 0.02,
            },
            lr_init: 2e-4,
            lr_final: 2e-4,
            iterations: 200,
            batch: 4,
            ..FusionTrainConfig::desk()
        })
        .unwrap();
        let refs: Vec<_> = data.iter().collect();
        let batch = FusionBatch::stack(&refs).unwrap();
        let fake = st.gen.forward(batch.cond.view()).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = st.disc.params.zeros_like();
            let (rl, rt) = st.disc.forward_taped(batch.gt.view(), batch.cond.view()).unwrap();
            let (fl, ft) = st.disc.forward_taped(fake.view(), batch.cond.view()).unwrap();
            let (l, dr, df) = disc_loss(&rl, &fl, AdversarialLoss::Bce);
            st.disc.backward(&rt, &dr, Some(&mut g));
            st.disc.backward(&ft, &df, Some(&mut g));
            st.disc_adam.update(&mut st.disc.params, &g, 2e-4);
            losses.push(l.total());
        }
        let head: f32 = losses[..20].iter().sum::<f32>() / 20.0;
        let tail: f32 = losses[180..].iter().sum::<f32>() / 20.0;
        assert!(tail < head * 0.8, "{head} → {tail}");
    }

    #[test]
    fn pair_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = pairs(2, 16);
        save_pairs(dir.path(), &data).unwrap();
        let back = load_pairs::<f32>(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].id, "p1");
        let err = back[1]
            .gt
            .iter()
            .zip(data[1].gt.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(err < 1e-6, "{err}");
    }
}
