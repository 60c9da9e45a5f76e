//! Fully connected layer on row-major batches (`batch × features`).

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::store::{ParamStore, TensorId};
use crate::Real;

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: TensorId,
    pub bias: TensorId,
    pub in_dim: usize,
    pub out_dim: usize,
}

pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weight and bias.
    FanInUniform,
    Zeros,
}

impl Dense {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            match init {
                Init::FanInUniform => (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect(),
                Init::Zeros => vec![T::zero(); n],
            }
        };
        let w = draw(in_dim * out_dim);
        let b = draw(out_dim);
        Self {
            weight: store.add(format!("{name}.weight"), &[in_dim, out_dim], w),
            bias: store.add(format!("{name}.bias"), &[out_dim], b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&store.view2(self.weight));
        y += &store.view1(self.bias);
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x` when
    /// requested.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        {
            let mut gw = grads.view2_mut(self.weight);
            ndarray::linalg::general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut gw);
        }
        {
            let mut gb = grads.view1_mut(self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        need_dx.then(|| dy.dot(&store.view2(self.weight).t()))
    }
}

pub(crate) fn relu_inplace<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `dy` where the forward ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Real>(dy: &mut Array2<T>, out: &Array2<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}
