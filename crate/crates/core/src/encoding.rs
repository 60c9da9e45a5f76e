//! Sinusoidal positional encoding.
//!
//! Each input scalar `p` expands to `[p] ++ [sin(2^l π p), cos(2^l π p)]` for
//! `l = 0..L`, scalars laid out one after another.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub num_freqs: usize,
    pub include_raw: bool,
}

impl EncodingSpec {
    pub const fn new(num_freqs: usize, include_raw: bool) -> Self {
        Self { num_freqs, include_raw }
    }

    /// Values emitted per input scalar.
    pub const fn per_scalar(&self) -> usize {
        self.include_raw as usize + 2 * self.num_freqs
    }

    pub const fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * self.per_scalar()
    }
}

pub fn encode<T: Real>(p: &[T], spec: EncodingSpec) -> Vec<T> {
    let mut out = vec![T::zero(); spec.output_dim(p.len())];
    encode_into(p, spec, &mut out);
    out
}

pub fn encode_into<T: Real>(p: &[T], spec: EncodingSpec, out: &mut [T]) {
    debug_assert_eq!(out.len(), spec.output_dim(p.len()));
    let mut k = 0;
    for &v in p {
        if spec.include_raw {
            out[k] = v;
            k += 1;
        }
        let mut freq = T::PI();
        for _ in 0..spec.num_freqs {
            let (s, c) = (freq * v).sin_cos();
            out[k] = s;
            out[k + 1] = c;
            k += 2;
            freq = freq + freq;
        }
    }
}

/// Encodes each row of `points` (rows × dim).
pub fn encode_rows<T: Real>(points: ArrayView2<T>, spec: EncodingSpec) -> Array2<T> {
    let mut out = Array2::zeros((points.nrows(), spec.output_dim(points.ncols())));
    encode_rows_into(points, spec, out.view_mut());
    out
}

pub fn encode_rows_into<T: Real>(points: ArrayView2<T>, spec: EncodingSpec, mut out: ArrayViewMut2<T>) {
    for (p, mut o) in points.rows().into_iter().zip(out.rows_mut()) {
        let p: Vec<T> = p.to_vec();
        encode_into(&p, spec, o.as_slice_mut().expect("contiguous encoding row"));
    }
}

/// Accumulates `∂L/∂p` given `∂L/∂γ(p)` for each row.
pub fn encode_rows_backward<T: Real>(
    points: ArrayView2<T>,
    spec: EncodingSpec,
    grad_encoded: ArrayView2<T>,
) -> Array2<T> {
    let mut grad = Array2::zeros(points.raw_dim());
    for ((p, g), mut gp) in points.rows().into_iter().zip(grad_encoded.rows()).zip(grad.rows_mut()) {
        let mut k = 0;
        for (j, &v) in p.iter().enumerate() {
            let mut acc = T::zero();
            if spec.include_raw {
                acc += g[k];
                k += 1;
            }
            let mut freq = T::PI();
            for _ in 0..spec.num_freqs {
                let (s, c) = (freq * v).sin_cos();
                acc += freq * (c * g[k] - s * g[k + 1]);
                k += 2;
                freq = freq + freq;
            }
            gp[j] = acc;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_input() {
        let out = encode(&[0.0f64], EncodingSpec::new(2, true));
        assert_eq!(out, vec![0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_period() {
        let out = encode(&[0.5f64], EncodingSpec::new(1, true));
        assert_eq!(out[0], 0.5);
        assert!((out[1] - 1.0).abs() < 1e-15);
        assert!(out[2].abs() < 1e-15);
    }

    #[test]
    fn position_width_matches_canonical_input() {
        let out = encode(&[0.1f32, 0.2, 0.3], EncodingSpec::new(10, true));
        assert_eq!(out.len(), 63);
        assert_eq!(EncodingSpec::new(4, true).output_dim(3), 27);
        assert_eq!(EncodingSpec::new(10, true).output_dim(1), 21);
    }

    #[test]
    fn integer_inputs_zero_sines() {
        let spec = EncodingSpec::new(6, false);
        for k in -4..=4 {
            let out = encode(&[k as f64], spec);
            for l in 1..spec.num_freqs {
                assert!(out[2 * l].abs() < 1e-9, "k={k} l={l}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = EncodingSpec::new(4, true);
        let pts = array![[0.13f64, -0.4, 0.77], [0.9, 0.01, -0.3]];
        let weights = encode_rows(pts.view(), spec).mapv(|v| v * 0.5 + 0.1);
        let loss = |p: &Array2<f64>| (encode_rows(p.view(), spec) * &weights).sum();
        let grad = encode_rows_backward(pts.view(), spec, weights.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut a = pts.clone();
                let mut b = pts.clone();
                a[[i, j]] += h;
                b[[i, j]] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - grad[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn output_length(dim in 0usize..6, l in 0usize..12, raw in any::<bool>()) {
            let spec = EncodingSpec::new(l, raw);
            let p = vec![0.3f32; dim];
            prop_assert_eq!(encode(&p, spec).len(), dim * (raw as usize + 2 * l));
        }

        #[test]
        fn band_slope_bounded(p in -2.0f64..2.0, l in 0usize..8) {
            // each band has slope at most 2^l π
            let spec = EncodingSpec::new(l + 1, false);
            let h = 1e-7;
            let a = encode(&[p + h], spec);
            let b = encode(&[p - h], spec);
            let bound = 2f64.powi(l as i32) * std::f64::consts::PI;
            let s = (a[2 * l] - b[2 * l]) / (2.0 * h);
            let c = (a[2 * l + 1] - b[2 * l + 1]) / (2.0 * h);
            prop_assert!(s.abs() <= bound * (1.0 + 1e-3));
            prop_assert!(c.abs() <= bound * (1.0 + 1e-3));
        }
    }
}
