//! Sequential convolutional stacks with residual sub-blocks and reverse-mode
//! gradients.

use ndarray::{Array4, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::{self, ConvGeom};
use super::store::{ParamStore, TensorId};
use crate::Real;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeom,
    },
    ConvTranspose {
        weight: TensorId,
        bias: TensorId,
        geom: ConvGeom,
        out_pad: usize,
    },
    InstanceNorm,
    Relu,
    LeakyRelu(f64),
    Tanh,
    /// `x + body(x)`.
    Residual(Vec<Layer>),
}

/// How convolution weights are drawn at registration.
#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    Normal { std: f64 },
    Zeros,
}

fn draw<T: Real, R: Rng>(n: usize, init: ConvInit, rng: &mut R) -> Vec<T> {
    match init {
        ConvInit::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| T::lit(dist.sample(rng))).collect()
        }
        ConvInit::Zeros => vec![T::zero(); n],
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_layer<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    geom: ConvGeom,
    init: ConvInit,
    rng: &mut R,
) -> Layer {
    let k = geom.kernel;
    let w = draw(cout * cin * k * k, init, rng);
    let weight = store.add(format!("{name}.weight"), &[cout, cin, k, k], w);
    let bias = store.add(format!("{name}.bias"), &[cout], vec![T::zero(); cout]);
    Layer::Conv { weight, bias, geom }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_layer<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    geom: ConvGeom,
    out_pad: usize,
    init: ConvInit,
    rng: &mut R,
) -> Layer {
    let k = geom.kernel;
    let w = draw(cin * cout * k * k, init, rng);
    let weight = store.add(format!("{name}.weight"), &[cin, cout, k, k], w);
    let bias = store.add(format!("{name}.bias"), &[cout], vec![T::zero(); cout]);
    Layer::ConvTranspose {
        weight,
        bias,
        geom,
        out_pad,
    }
}

/// What a layer keeps from its forward pass.
pub enum Cache<T> {
    Input(Array4<T>),
    Output(Array4<T>),
    Norm { y: Array4<T>, inv_std: Vec<T> },
    Residual(Vec<Cache<T>>),
}

pub fn forward<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    x: Array4<T>,
    mut caches: Option<&mut Vec<Cache<T>>>,
) -> Array4<T> {
    let mut h = x;
    for layer in layers {
        let (next, cache) = forward_one(layer, store, h, caches.is_some());
        if let (Some(c), Some(entry)) = (caches.as_deref_mut(), cache) {
            c.push(entry);
        }
        h = next;
    }
    h
}

fn forward_one<T: Real>(
    layer: &Layer,
    store: &ParamStore<T>,
    x: Array4<T>,
    keep: bool,
) -> (Array4<T>, Option<Cache<T>>) {
    match layer {
        Layer::Conv { weight, bias, geom } => {
            let y = conv::conv2d(x.view(), store.view4(*weight), &store.get(*bias).data, *geom);
            (y, keep.then_some(Cache::Input(x)))
        }
        Layer::ConvTranspose {
            weight,
            bias,
            geom,
            out_pad,
        } => {
            let y = conv::conv_transpose2d(x.view(), store.view4(*weight), &store.get(*bias).data, *geom, *out_pad);
            (y, keep.then_some(Cache::Input(x)))
        }
        Layer::InstanceNorm => {
            let (y, inv_std) = conv::instance_norm(x.view());
            let cache = keep.then(|| Cache::Norm { y: y.clone(), inv_std });
            (y, cache)
        }
        Layer::Relu => {
            let mut y = x;
            y.mapv_inplace(|v| v.max(T::zero()));
            let cache = keep.then(|| Cache::Output(y.clone()));
            (y, cache)
        }
        Layer::LeakyRelu(slope) => {
            let a = T::lit(*slope);
            let y = x.mapv(|v| if v > T::zero() { v } else { a * v });
            (y, keep.then_some(Cache::Input(x)))
        }
        Layer::Tanh => {
            let y = x.mapv(|v| v.tanh());
            let cache = keep.then(|| Cache::Output(y.clone()));
            (y, cache)
        }
        Layer::Residual(body) => {
            let mut inner = Vec::new();
            let fx = forward(body, store, x.clone(), keep.then_some(&mut inner));
            (x + fx, keep.then_some(Cache::Residual(inner)))
        }
    }
}

/// Backpropagates `dy` through `layers`, accumulating into `grads`.
/// Returns `∂L/∂x` when `need_dx` is set.
pub fn backward<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    caches: &[Cache<T>],
    dy: Array4<T>,
    need_dx: bool,
) -> Option<Array4<T>> {
    let mut g = dy;
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let want = need_dx || i > 0;
        {
            let next = backward_one(layer, store, grads, cache, g, want)?;
            g = next
        }
    }
    Some(g)
}

fn accumulate<T: Real>(grads: &mut ParamStore<T>, id: TensorId, values: &[T]) {
    for (a, &b) in grads.data_mut(id).iter_mut().zip(values) {
        *a += b;
    }
}

fn backward_one<T: Real>(
    layer: &Layer,
    store: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    cache: &Cache<T>,
    dy: Array4<T>,
    need_dx: bool,
) -> Option<Array4<T>> {
    match (layer, cache) {
        (Layer::Conv { weight, bias, geom }, Cache::Input(x)) => {
            let r = conv::conv2d_backward(x.view(), store.view4(*weight), *geom, dy.view(), need_dx);
            accumulate(grads, *weight, r.dweight.as_slice().expect("standard layout"));
            accumulate(grads, *bias, &r.dbias);
            r.dx
        }
        (Layer::ConvTranspose { weight, bias, geom, .. }, Cache::Input(x)) => {
            let r = conv::conv_transpose2d_backward(x.view(), store.view4(*weight), *geom, dy.view(), need_dx);
            accumulate(grads, *weight, r.dweight.as_slice().expect("standard layout"));
            accumulate(grads, *bias, &r.dbias);
            r.dx
        }
        (Layer::InstanceNorm, Cache::Norm { y, inv_std }) => Some(conv::instance_norm_backward(y, inv_std, dy.view())),
        (Layer::Relu, Cache::Output(y)) => {
            let mut g = dy;
            ndarray::Zip::from(&mut g).and(y).for_each(|g, &o| {
                if o <= T::zero() {
                    *g = T::zero();
                }
            });
            Some(g)
        }
        (Layer::LeakyRelu(slope), Cache::Input(x)) => {
            let a = T::lit(*slope);
            let mut g = dy;
            ndarray::Zip::from(&mut g).and(x).for_each(|g, &v| {
                if v <= T::zero() {
                    *g *= a;
                }
            });
            Some(g)
        }
        (Layer::Tanh, Cache::Output(y)) => {
            let mut g = dy;
            ndarray::Zip::from(&mut g)
                .and(y)
                .for_each(|g, &o| *g *= T::one() - o * o);
            Some(g)
        }
        (Layer::Residual(body), Cache::Residual(inner)) => {
            let through = backward(body, store, grads, inner, dy.clone(), true).expect("residual body gradient");
            Some(dy + through)
        }
        _ => panic!("layer/cache mismatch during backward"),
    }
}

/// Output of a stack for an input of the given spatial size, without running it.
pub fn output_hw(layers: &[Layer], mut h: usize, mut w: usize) -> Option<(usize, usize)> {
    for layer in layers {
        match layer {
            Layer::Conv { geom, .. } => {
                h = geom.out_len(h)?;
                w = geom.out_len(w)?;
            }
            Layer::ConvTranspose { geom, out_pad, .. } => {
                h = conv::conv_transpose_out_len(h, *geom, *out_pad);
                w = conv::conv_transpose_out_len(w, *geom, *out_pad);
            }
            Layer::Residual(body) => {
                let (bh, bw) = output_hw(body, h, w)?;
                if (bh, bw) != (h, w) {
                    return None;
                }
            }
            _ => {}
        }
    }
    Some((h, w))
}

pub fn view_input<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    x.as_standard_layout().into_owned()
}
