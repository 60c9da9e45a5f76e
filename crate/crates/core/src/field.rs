//! Time-conditioned radiance field: a canonical network `(x, d) ↦ (σ, c)` and
//! a deformation network `(x, t) ↦ Δx`, composed as `F(x, d, t) =
//! canonical(x + Δx(x, t), d)`.
//!
//! Both networks are ReLU MLPs that re-inject the encoded position at
//! `skip_layer`. The canonical network predicts density from the trunk and
//! color from a view-dependent branch, so the view direction never reaches
//! σ. The deformation is hard-gated to zero at `t = 0`, which anchors the
//! canonical space at the first frame.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_rows, encode_rows_backward, EncodingSpec};
use crate::error::{invalid, Result};
use crate::linalg::Vec3;
use crate::nn::dense::{relu_backward_inplace, relu_inplace, Dense, Init};
use crate::nn::ParamStore;
use crate::scalar::sigmoid;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub depth: usize,
    pub width: usize,
    pub skip_layer: usize,
    pub enc_x: EncodingSpec,
    pub enc_d: EncodingSpec,
    pub enc_t: EncodingSpec,
}

impl FieldConfig {
    /// 8 × 256 trunks with the position re-injected at layer 5.
    pub const fn full() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip_layer: 5,
            enc_x: EncodingSpec::new(10, true),
            enc_d: EncodingSpec::new(4, true),
            enc_t: EncodingSpec::new(10, true),
        }
    }

    /// Small trunks for 64×64 scenes on a CPU.
    pub const fn desk() -> Self {
        Self {
            depth: 4,
            width: 64,
            skip_layer: 2,
            enc_x: EncodingSpec::new(6, true),
            enc_d: EncodingSpec::new(2, true),
            enc_t: EncodingSpec::new(4, true),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(invalid(format!("field depth must be ≥ 2, got {}", self.depth)));
        }
        if self.skip_layer >= self.depth {
            return Err(invalid(format!(
                "skip layer {} must be below depth {}",
                self.skip_layer, self.depth
            )));
        }
        if self.width < 2 {
            return Err(invalid("field width must be ≥ 2"));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        self.enc_x.output_dim(3)
    }

    pub fn dir_dim(&self) -> usize {
        self.enc_d.output_dim(3)
    }

    pub fn time_dim(&self) -> usize {
        self.enc_t.output_dim(1)
    }

    pub fn view_width(&self) -> usize {
        (self.width / 2).max(1)
    }
}

/// ReLU trunk with one skip re-injection of `skip_input`.
#[derive(Debug, Clone)]
struct Trunk {
    layers: Vec<Dense>,
    skip_layer: usize,
}

struct TrunkTape<T> {
    /// Input of every layer.
    inputs: Vec<Array2<T>>,
    /// Final post-ReLU activation.
    out: Array2<T>,
}

impl Trunk {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &FieldConfig,
        in_dim: usize,
        skip_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..config.depth)
            .map(|i| {
                let fan_in = match i {
                    0 => in_dim,
                    i if i == config.skip_layer => config.width + skip_dim,
                    _ => config.width,
                };
                Dense::register(
                    store,
                    &format!("{prefix}.trunk.{i}"),
                    fan_in,
                    config.width,
                    Init::FanInUniform,
                    rng,
                )
            })
            .collect();
        Self {
            layers,
            skip_layer: config.skip_layer,
        }
    }

    fn forward<T: Real>(&self, store: &ParamStore<T>, input: ArrayView2<T>, skip: ArrayView2<T>) -> TrunkTape<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            if i == self.skip_layer && i > 0 {
                h = concatenate![Axis(1), skip, h];
            }
            let mut next = layer.forward(store, h.view());
            relu_inplace(&mut next);
            inputs.push(h);
            h = next;
        }
        TrunkTape { inputs, out: h }
    }

    /// Returns gradients with respect to `(input, skip)` when requested.
    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        tape: &TrunkTape<T>,
        d_out: Array2<T>,
        need_inputs: bool,
    ) -> Option<(Array2<T>, Array2<T>)> {
        let mut g = d_out;
        let mut out = tape.out.clone();
        let mut d_skip = None;
        for i in (0..self.layers.len()).rev() {
            relu_backward_inplace(&mut g, &out);
            let x = &tape.inputs[i];
            let want = need_inputs || i > 0;
            let dx = self.layers[i].backward(store, grads, x.view(), g.view(), want);
            let Some(mut dx) = dx else { break };
            if i == self.skip_layer && i > 0 {
                let sd = x.ncols() - self.layers[i - 1].out_dim;
                d_skip = Some(dx.slice(s![.., ..sd]).to_owned());
                dx = dx.slice(s![.., sd..]).to_owned();
                out = x.slice(s![.., sd..]).to_owned();
            } else if i > 0 {
                out = x.clone();
            }
            g = dx;
        }
        need_inputs.then(|| {
            let skip = d_skip.unwrap_or_else(|| Array2::zeros((g.nrows(), 0)));
            (g, skip)
        })
    }
}

#[derive(Debug, Clone)]
struct CanonicalNet {
    trunk: Trunk,
    alpha: Dense,
    feature: Dense,
    view: Dense,
    rgb: Dense,
}

#[derive(Debug, Clone)]
struct DeformationNet {
    trunk: Trunk,
    out: Dense,
}

/// Per-sample density and color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput<T> {
    pub sigma: T,
    pub color: [T; 3],
}

/// Batched field values: `sigma` (P), `color` (P × 3).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch<T> {
    pub sigma: Array1<T>,
    pub color: Array2<T>,
}

/// Anything that maps sample positions, directions and times to density and
/// color. Implemented by [`RadianceField`] and by analytic test media.
pub trait Field<T: Real>: Sync {
    fn query(&self, x: ArrayView2<T>, d: ArrayView2<T>, t: ArrayView1<T>) -> FieldBatch<T>;
}

/// Everything needed to backpropagate through one batched evaluation.
pub struct FieldTape<T> {
    moving: Vec<usize>,
    deform: Option<(Array2<T>, TrunkTape<T>)>,
    warped: Array2<T>,
    canon: TrunkTape<T>,
    alpha_raw: Array2<T>,
    view_in: Array2<T>,
    view_out: Array2<T>,
    color: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct RadianceField<T> {
    pub config: FieldConfig,
    pub params: ParamStore<T>,
    canonical: CanonicalNet,
    deformation: DeformationNet,
}

fn register_layout<T: Real>(
    config: &FieldConfig,
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
) -> (CanonicalNet, DeformationNet) {
    let px = config.pos_dim();
    let canonical = CanonicalNet {
        trunk: Trunk::register(store, "canonical", config, px, px, rng),
        alpha: Dense::register(store, "canonical.alpha", config.width, 1, Init::FanInUniform, rng),
        feature: Dense::register(
            store,
            "canonical.feature",
            config.width,
            config.width,
            Init::FanInUniform,
            rng,
        ),
        view: Dense::register(
            store,
            "canonical.view",
            config.width + config.dir_dim(),
            config.view_width(),
            Init::FanInUniform,
            rng,
        ),
        rgb: Dense::register(store, "canonical.rgb", config.view_width(), 3, Init::FanInUniform, rng),
    };
    let deformation = DeformationNet {
        trunk: Trunk::register(store, "deformation", config, px + config.time_dim(), px, rng),
        out: Dense::register(store, "deformation.out", config.width, 3, Init::Zeros, rng),
    };
    (canonical, deformation)
}

impl<T: Real> RadianceField<T> {
    /// Fan-in-scaled uniform weights; the deformation output layer starts at
    /// zero. Deterministic for a given seed.
    pub fn init(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (canonical, deformation) = register_layout(&config, &mut store, &mut rng);
        Ok(Self {
            config,
            params: store,
            canonical,
            deformation,
        })
    }

    /// Rebinds a loaded parameter store; names and shapes must match `config`.
    pub fn from_params(config: FieldConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::init(config, 0)?;
        if !template.params.same_layout(&params) {
            return Err(invalid("parameter layout does not match field config"));
        }
        Ok(Self { params, ..template })
    }

    pub fn cast<U: Real>(&self) -> RadianceField<U> {
        RadianceField {
            config: self.config,
            params: self.params.cast(),
            canonical: self.canonical.clone(),
            deformation: self.deformation.clone(),
        }
    }

    /// First-layer input widths of the canonical trunk and the view branch.
    pub fn input_widths(&self) -> (usize, usize) {
        (self.canonical.trunk.layers[0].in_dim, self.canonical.view.in_dim)
    }

    /// `Δx` for each row; rows with `t = 0` are exactly zero.
    pub fn deformation_batch(&self, x: ArrayView2<T>, t: ArrayView1<T>) -> Array2<T> {
        let moving: Vec<usize> = (0..t.len()).filter(|&i| t[i] != T::zero()).collect();
        let mut dx = Array2::zeros((x.nrows(), 3));
        if moving.is_empty() {
            return dx;
        }
        let (out, _, _) = self.deform_rows(x, t, &moving);
        for (k, &i) in moving.iter().enumerate() {
            dx.row_mut(i).assign(&out.row(k));
        }
        dx
    }

    fn deform_rows(&self, x: ArrayView2<T>, t: ArrayView1<T>, rows: &[usize]) -> (Array2<T>, Array2<T>, TrunkTape<T>) {
        let xs = x.select(Axis(0), rows);
        let ts = Array2::from_shape_fn((rows.len(), 1), |(k, _)| t[rows[k]]);
        let gx = encode_rows(xs.view(), self.config.enc_x);
        let gt = encode_rows(ts.view(), self.config.enc_t);
        let input = concatenate![Axis(1), gx, gt];
        let tape = self.deformation.trunk.forward(&self.params, input.view(), gx.view());
        let out = self.deformation.out.forward(&self.params, tape.out.view());
        (out, xs, tape)
    }

    /// Batched evaluation, optionally keeping a tape for [`Self::backward`].
    pub fn forward(
        &self,
        x: ArrayView2<T>,
        d: ArrayView2<T>,
        t: ArrayView1<T>,
        keep_tape: bool,
    ) -> (FieldBatch<T>, Option<FieldTape<T>>) {
        let p = &self.params;
        let net = &self.canonical;
        let moving: Vec<usize> = (0..t.len()).filter(|&i| t[i] != T::zero()).collect();
        let mut warped = x.to_owned();
        let mut deform = None;
        if !moving.is_empty() {
            let (out, _, tape) = self.deform_rows(x, t, &moving);
            for (k, &i) in moving.iter().enumerate() {
                let mut row = warped.row_mut(i);
                row += &out.row(k);
            }
            deform = keep_tape.then_some((out, tape));
        }
        let gx = encode_rows(warped.view(), self.config.enc_x);
        let trunk = net.trunk.forward(p, gx.view(), gx.view());
        let alpha_raw = net.alpha.forward(p, trunk.out.view());
        let feature = net.feature.forward(p, trunk.out.view());
        let gd = encode_rows(d, self.config.enc_d);
        let view_in = concatenate![Axis(1), feature, gd];
        let mut view_out = net.view.forward(p, view_in.view());
        relu_inplace(&mut view_out);
        let mut color = net.rgb.forward(p, view_out.view());
        color.mapv_inplace(sigmoid);
        let sigma = alpha_raw.column(0).mapv(|v| v.max(T::zero()));
        let batch = FieldBatch {
            sigma,
            color: color.clone(),
        };
        let tape = keep_tape.then(|| FieldTape {
            moving,
            deform,
            warped,
            canon: trunk,
            alpha_raw,
            view_in,
            view_out,
            color,
        });
        (batch, tape)
    }

    /// Accumulates parameter gradients of a scalar loss given its gradients
    /// with respect to σ (P) and color (P × 3).
    pub fn backward(
        &self,
        tape: &FieldTape<T>,
        d_sigma: ArrayView1<T>,
        d_color: ArrayView2<T>,
        grads: &mut ParamStore<T>,
    ) {
        let p = &self.params;
        let net = &self.canonical;
        let mut d_rgb = d_color.to_owned();
        ndarray::Zip::from(&mut d_rgb)
            .and(&tape.color)
            .for_each(|g, &c| *g *= c * (T::one() - c));
        let mut d_view = net
            .rgb
            .backward(p, grads, tape.view_out.view(), d_rgb.view(), true)
            .expect("dx requested");
        relu_backward_inplace(&mut d_view, &tape.view_out);
        let d_view_in = net
            .view
            .backward(p, grads, tape.view_in.view(), d_view.view(), true)
            .expect("dx requested");
        let d_feature = d_view_in.slice(s![.., ..self.config.width]).to_owned();
        let mut d_h = net
            .feature
            .backward(p, grads, tape.canon.out.view(), d_feature.view(), true)
            .expect("dx requested");
        let d_alpha = Array2::from_shape_fn((d_sigma.len(), 1), |(i, _)| {
            if tape.alpha_raw[[i, 0]] > T::zero() {
                d_sigma[i]
            } else {
                T::zero()
            }
        });
        d_h += &net
            .alpha
            .backward(p, grads, tape.canon.out.view(), d_alpha.view(), true)
            .expect("dx requested");
        let need_x = tape.deform.is_some();
        let trunk_grads = net.trunk.backward(p, grads, &tape.canon, d_h, need_x);
        let (Some((d_in, d_skip)), Some((_, dtape))) = (trunk_grads, tape.deform.as_ref()) else {
            return;
        };
        let mut d_gx = d_in;
        if d_skip.ncols() > 0 {
            d_gx += &d_skip;
        }
        let d_warped = encode_rows_backward(tape.warped.view(), self.config.enc_x, d_gx.view());
        let d_delta = d_warped.select(Axis(0), &tape.moving);
        let dnet = &self.deformation;
        let d_trunk = dnet
            .out
            .backward(p, grads, dtape.out.view(), d_delta.view(), true)
            .expect("dx requested");
        dnet.trunk.backward(p, grads, dtape, d_trunk, false);
    }

    fn check_point(x: &Vec3<T>, t: T) -> Result<()> {
        if !x.is_finite() || !t.is_finite() {
            return Err(invalid("non-finite field input"));
        }
        if t < T::zero() || t > T::one() {
            return Err(invalid(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn deformation_eval(&self, x: Vec3<T>, t: T) -> Result<Vec3<T>> {
        Self::check_point(&x, t)?;
        let xs = Array2::from_shape_vec((1, 3), x.0.to_vec()).expect("1×3");
        let out = self.deformation_batch(xs.view(), ndarray::aview1(&[t]));
        Ok(Vec3::new(out[[0, 0]], out[[0, 1]], out[[0, 2]]))
    }

    pub fn canonical_eval(&self, x: Vec3<T>, d: Vec3<T>) -> Result<FieldOutput<T>> {
        self.field_eval(x, d, T::zero())
    }

    pub fn field_eval(&self, x: Vec3<T>, d: Vec3<T>, t: T) -> Result<FieldOutput<T>> {
        Self::check_point(&x, t)?;
        if !d.is_finite() {
            return Err(invalid("non-finite view direction"));
        }
        if (d.norm() - T::one()).abs() > T::lit(1e-4) {
            return Err(invalid("view direction must be unit length"));
        }
        let xs = Array2::from_shape_vec((1, 3), x.0.to_vec()).expect("1×3");
        let ds = Array2::from_shape_vec((1, 3), d.0.to_vec()).expect("1×3");
        let (b, _) = self.forward(xs.view(), ds.view(), ndarray::aview1(&[t]), false);
        Ok(FieldOutput {
            sigma: b.sigma[0],
            color: [b.color[[0, 0]], b.color[[0, 1]], b.color[[0, 2]]],
        })
    }
}

impl<T: Real> Field<T> for RadianceField<T> {
    fn query(&self, x: ArrayView2<T>, d: ArrayView2<T>, t: ArrayView1<T>) -> FieldBatch<T> {
        self.forward(x, d, t, false).0
    }
}
