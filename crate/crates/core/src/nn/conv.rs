//! Image-tensor kernels on `N × C × H × W` batches: convolution, transposed
//! convolution, instance normalization, pointwise activations and pooling.
//!
//! Convolutions lower to GEMM through im2col, tiled over output positions so
//! the column buffer stays bounded at large resolutions.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, ArrayViewMut2};

use crate::Real;

/// Upper bound on im2col buffer elements per tile.
const COL_TILE_ELEMS: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }

    /// Output extent of a forward convolution over `input` pixels.
    pub fn out_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

/// Fills `cols` (`C·k·k × (p1-p0)`) with patches of `img` (`C × H × W`, flat)
/// for output positions `p0..p1` of an `oh × ow` grid.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ow: usize,
    p0: usize,
    p1: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let np = p1 - p0;
    let mut row = 0;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let out = &mut cols[row * np..(row + 1) * np];
                for_each_output_row(p0, p1, ow, |oy, ox0, start, len| {
                    let seg = &mut out[start..start + len];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        seg.fill(T::zero());
                        return;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_run(ox0, len, g, kj, w);
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if lo == hi {
                        return;
                    }
                    let ix0 = (ox0 + lo) * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        seg[lo..hi].copy_from_slice(&line[ix0..ix0 + hi - lo]);
                    } else {
                        for (slot, &v) in seg[lo..hi].iter_mut().zip(line[ix0..].iter().step_by(g.stride)) {
                            *slot = v;
                        }
                    }
                });
                row += 1;
            }
        }
    }
}

/// Range `lo..hi` of a run of `len` outputs starting at column `ox0` whose
/// input column for kernel offset `kj` lies inside `0..w`.
#[inline]
fn valid_run(ox0: usize, len: usize, g: ConvGeom, kj: usize, w: usize) -> (usize, usize) {
    let s = g.stride;
    // first output column x with x*s + kj >= pad, and first with x*s + kj >= pad + w
    let first = |bound: usize| if kj >= bound { 0 } else { (bound - kj).div_ceil(s) };
    let lo = first(g.pad).saturating_sub(ox0).min(len);
    let hi = first(g.pad + w).saturating_sub(ox0).min(len).max(lo);
    (lo, hi)
}

/// Splits output positions `p0..p1` of a grid `ow` wide into per-row runs:
/// `(row, first column, offset from p0, length)`.
#[inline]
fn for_each_output_row(p0: usize, p1: usize, ow: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut p = p0;
    while p < p1 {
        let oy = p / ow;
        let end = p1.min((oy + 1) * ow);
        f(oy, p % ow, p - p0, end - p);
        p = end;
    }
}

/// Scatter-adds `cols` back into `img`; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ow: usize,
    p0: usize,
    p1: usize,
    img: &mut [T],
) {
    let k = g.kernel;
    let np = p1 - p0;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * np..(row + 1) * np];
                for_each_output_row(p0, p1, ow, |oy, ox0, start, len| {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        return;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_run(ox0, len, g, kj, w);
                    if lo == hi {
                        return;
                    }
                    let ix0 = (ox0 + lo) * g.stride + kj - g.pad;
                    for (slot, &v) in line[ix0..]
                        .iter_mut()
                        .step_by(g.stride)
                        .zip(&src[start + lo..start + hi])
                    {
                        *slot += v;
                    }
                });
                row += 1;
            }
        }
    }
}

fn tiles(positions: usize, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let step = (COL_TILE_ELEMS / rows.max(1)).clamp(1, positions.max(1));
    (0..positions)
        .step_by(step)
        .map(move |p0| (p0, (p0 + step).min(positions)))
}

fn sample_slice<T: Real>(x: &Array4<T>, n: usize) -> &[T] {
    let per = x.len() / x.shape()[0];
    &x.as_slice().expect("standard layout")[n * per..(n + 1) * per]
}

fn sample_slice_mut<T: Real>(x: &mut Array4<T>, n: usize) -> &mut [T] {
    let per = x.len() / x.shape()[0];
    &mut x.as_slice_mut().expect("standard layout")[n * per..(n + 1) * per]
}

fn standard<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    x.as_standard_layout().into_owned()
}

/// `weight`: `C_out × C_in × k × k`.
pub fn conv2d<T: Real>(x: ArrayView4<T>, weight: ArrayView4<T>, bias: &[T], g: ConvGeom) -> Array4<T> {
    let x = standard(x);
    let (n, c, h, w) = x.dim();
    let (co, ci, k, _) = weight.dim();
    assert_eq!(c, ci, "conv input channels");
    let oh = g.out_len(h).expect("conv input smaller than kernel");
    let ow = g.out_len(w).expect("conv input smaller than kernel");
    let kk = ci * k * k;
    let wmat = weight.as_standard_layout();
    let wmat = wmat.view().into_shape_with_order((co, kk)).expect("weight matrix");
    let mut out = Array4::zeros((n, co, oh, ow));
    let mut cols = Vec::new();
    for b in 0..n {
        let img = sample_slice(&x, b);
        let mut out_mat = out.slice_mut(s![b, .., .., ..]);
        let mut out_mat = out_mat
            .view_mut()
            .into_shape_with_order((co, oh * ow))
            .expect("output matrix");
        for (p0, p1) in tiles(oh * ow, kk) {
            cols.resize(kk * (p1 - p0), T::zero());
            im2col(img, c, h, w, g, ow, p0, p1, &mut cols);
            let cm = ArrayView2::from_shape((kk, p1 - p0), &cols).expect("cols");
            let mut dst = out_mat.slice_mut(s![.., p0..p1]);
            general_mat_mul(T::one(), &wmat, &cm, T::zero(), &mut dst);
        }
        add_bias(&mut out_mat, bias);
    }
    out
}

fn add_bias<T: Real>(out: &mut ArrayViewMut2<T>, bias: &[T]) {
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
}

pub struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dweight: Array4<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    g: ConvGeom,
    dy: ArrayView4<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let x = standard(x);
    let dy = standard(dy);
    let (n, c, h, w) = x.dim();
    let (co, ci, k, _) = weight.dim();
    let (_, _, oh, ow) = dy.dim();
    let kk = ci * k * k;
    let wmat = weight.as_standard_layout();
    let wmat = wmat.view().into_shape_with_order((co, kk)).expect("weight matrix");
    let mut dw = Array2::<T>::zeros((co, kk));
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, c, h, w)));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b in 0..n {
        let img = sample_slice(&x, b);
        let dy_mat = dy.slice(s![b, .., .., ..]);
        let dy_mat = dy_mat.into_shape_with_order((co, oh * ow)).expect("dy matrix");
        for (o, row) in db.iter_mut().zip(dy_mat.rows()) {
            *o += row.sum();
        }
        for (p0, p1) in tiles(oh * ow, kk) {
            let np = p1 - p0;
            cols.resize(kk * np, T::zero());
            im2col(img, c, h, w, g, ow, p0, p1, &mut cols);
            let cm = ArrayView2::from_shape((kk, np), &cols).expect("cols");
            let dyt = dy_mat.slice(s![.., p0..p1]);
            general_mat_mul(T::one(), &dyt, &cm.t(), T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(kk * np, T::zero());
                {
                    let mut dc = ArrayViewMut2::from_shape((kk, np), &mut dcols).expect("dcols");
                    general_mat_mul(T::one(), &wmat.t(), &dyt, T::zero(), &mut dc);
                }
                col2im(&dcols, c, h, w, g, ow, p0, p1, sample_slice_mut(dx, b));
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw.into_shape_with_order((co, ci, k, k)).expect("dweight"),
        dbias: db,
    }
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_len(input: usize, g: ConvGeom, out_pad: usize) -> usize {
    (input - 1) * g.stride + g.kernel + out_pad - 2 * g.pad
}

/// `weight`: `C_in × C_out × k × k`. The adjoint of [`conv2d`] with the same
/// geometry, plus bias.
pub fn conv_transpose2d<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    bias: &[T],
    g: ConvGeom,
    out_pad: usize,
) -> Array4<T> {
    let x = standard(x);
    let (n, c, ih, iw) = x.dim();
    let (ci, co, k, _) = weight.dim();
    assert_eq!(c, ci, "transposed conv input channels");
    let oh = conv_transpose_out_len(ih, g, out_pad);
    let ow = conv_transpose_out_len(iw, g, out_pad);
    let kk = co * k * k;
    let wmat = weight.as_standard_layout();
    let wmat = wmat.view().into_shape_with_order((ci, kk)).expect("weight matrix");
    let mut out = Array4::zeros((n, co, oh, ow));
    let mut cols = Vec::new();
    for b in 0..n {
        let xin = x.slice(s![b, .., .., ..]);
        let xin = xin.into_shape_with_order((ci, ih * iw)).expect("input matrix");
        for (p0, p1) in tiles(ih * iw, kk) {
            let np = p1 - p0;
            cols.clear();
            cols.resize(kk * np, T::zero());
            {
                let mut cm = ArrayViewMut2::from_shape((kk, np), &mut cols).expect("cols");
                general_mat_mul(T::one(), &wmat.t(), &xin.slice(s![.., p0..p1]), T::zero(), &mut cm);
            }
            col2im(&cols, co, oh, ow, g, iw, p0, p1, sample_slice_mut(&mut out, b));
        }
        let mut om = out.slice_mut(s![b, .., .., ..]);
        let mut om = om
            .view_mut()
            .into_shape_with_order((co, oh * ow))
            .expect("output matrix");
        add_bias(&mut om, bias);
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: ArrayView4<T>,
    weight: ArrayView4<T>,
    g: ConvGeom,
    dy: ArrayView4<T>,
    need_dx: bool,
) -> ConvGrads<T> {
    let x = standard(x);
    let dy = standard(dy);
    let (n, _, ih, iw) = x.dim();
    let (ci, co, k, _) = weight.dim();
    let (_, _, oh, ow) = dy.dim();
    let kk = co * k * k;
    let wmat = weight.as_standard_layout();
    let wmat = wmat.view().into_shape_with_order((ci, kk)).expect("weight matrix");
    let mut dw = Array2::<T>::zeros((ci, kk));
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, ci, ih, iw)));
    let mut cols = Vec::new();
    for b in 0..n {
        let dimg = sample_slice(&dy, b);
        for (o, plane) in db.iter_mut().zip(dimg.chunks(oh * ow)) {
            *o += plane.iter().copied().sum::<T>();
        }
        let xin = x.slice(s![b, .., .., ..]);
        let xin = xin.into_shape_with_order((ci, ih * iw)).expect("input matrix");
        for (p0, p1) in tiles(ih * iw, kk) {
            let np = p1 - p0;
            cols.resize(kk * np, T::zero());
            im2col(dimg, co, oh, ow, g, iw, p0, p1, &mut cols);
            let cm = ArrayView2::from_shape((kk, np), &cols).expect("cols");
            general_mat_mul(T::one(), &xin.slice(s![.., p0..p1]), &cm.t(), T::one(), &mut dw);
            if let Some(dx) = dx.as_mut() {
                let mut dxm = dx.slice_mut(s![b, .., .., ..]);
                let mut dxm = dxm.view_mut().into_shape_with_order((ci, ih * iw)).expect("dx matrix");
                let mut dst = dxm.slice_mut(s![.., p0..p1]);
                general_mat_mul(T::one(), &wmat, &cm, T::zero(), &mut dst);
            }
        }
    }
    ConvGrads {
        dx,
        dweight: dw.into_shape_with_order((ci, co, k, k)).expect("dweight"),
        dbias: db,
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization without affine terms. Returns the
/// normalized tensor and the inverse standard deviation of each plane.
pub fn instance_norm<T: Real>(x: ArrayView4<T>) -> (Array4<T>, Vec<T>) {
    let mut y = standard(x);
    let (n, c, h, w) = y.dim();
    let hw = h * w;
    let inv_hw = T::one() / T::from_usize_lossy(hw);
    let eps = T::lit(INSTANCE_NORM_EPS);
    let mut inv = Vec::with_capacity(n * c);
    for plane in y.as_slice_mut().expect("standard layout").chunks_mut(hw) {
        let mean = plane.iter().copied().sum::<T>() * inv_hw;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
        let is = T::one() / (var + eps).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (y, inv)
}

pub fn instance_norm_backward<T: Real>(y: &Array4<T>, inv_std: &[T], dy: ArrayView4<T>) -> Array4<T> {
    let mut dx = standard(dy);
    let (_, _, h, w) = y.dim();
    let hw = h * w;
    let inv_hw = T::one() / T::from_usize_lossy(hw);
    let ys = y.as_slice().expect("standard layout");
    for ((g, yp), &is) in dx
        .as_slice_mut()
        .expect("standard layout")
        .chunks_mut(hw)
        .zip(ys.chunks(hw))
        .zip(inv_std)
    {
        let mean_g = g.iter().copied().sum::<T>() * inv_hw;
        let mean_gy = g.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
        for (gv, &yv) in g.iter_mut().zip(yp) {
            *gv = is * (*gv - mean_g - yv * mean_gy);
        }
    }
    dx
}

/// 2×2 mean pooling with stride 2.
pub fn avg_pool2<T: Real>(x: ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    Array4::from_shape_fn((n, c, oh, ow), |(b, ch, i, j)| {
        (x[[b, ch, 2 * i, 2 * j]]
            + x[[b, ch, 2 * i + 1, 2 * j]]
            + x[[b, ch, 2 * i, 2 * j + 1]]
            + x[[b, ch, 2 * i + 1, 2 * j + 1]])
            * quarter
    })
}

pub fn avg_pool2_backward<T: Real>(dy: ArrayView4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, _, _) = dy.dim();
    let quarter = T::lit(0.25);
    Array4::from_shape_fn((n, c, h, w), |(b, ch, i, j)| {
        if i / 2 < dy.shape()[2] && j / 2 < dy.shape()[3] {
            dy[[b, ch, i / 2, j / 2]] * quarter
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, b: &[f64], g: ConvGeom) -> Array4<f64> {
        let (n, _, h, wd) = x.dim();
        let (co, ci, k, _) = w.dim();
        let oh = g.out_len(h).unwrap();
        let ow = g.out_len(wd).unwrap();
        Array4::from_shape_fn((n, co, oh, ow), |(bi, o, i, j)| {
            let mut acc = b[o];
            for c in 0..ci {
                for ki in 0..k {
                    for kj in 0..k {
                        let y = (i * g.stride + ki) as isize - g.pad as isize;
                        let xx = (j * g.stride + kj) as isize - g.pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += w[[o, c, ki, kj]] * x[[bi, c, y as usize, xx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [ConvGeom::new(3, 1, 1), ConvGeom::new(4, 2, 1), ConvGeom::new(7, 1, 3)] {
            let x = rand4((2, 3, 9, 8), &mut rng);
            let w = rand4((4, 3, g.kernel, g.kernel), &mut rng);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d(x.view(), w.view(), &b, g);
            let slow = naive_conv(&x, &w, &b, g);
            assert_eq!(fast.dim(), slow.dim());
            assert!((&fast - &slow).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom::new(3, 2, 1);
        let x = rand4((1, 3, 8, 8), &mut rng);
        let w = rand4((5, 3, 3, 3), &mut rng);
        let y = rand4((1, 5, 4, 4), &mut rng);
        let cx = conv2d(x.view(), w.view(), &[0.0; 5], g);
        let ty = conv_transpose2d(y.view(), w.view(), &[0.0; 3], g, 1);
        assert_eq!(ty.dim(), (1, 3, 8, 8));
        let lhs: f64 = (&cx * &y).sum();
        let rhs: f64 = (&x * &ty).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn check_grad(f: &dyn Fn(&Array4<f64>) -> f64, x: &Array4<f64>, analytic: &Array4<f64>) {
        let h = 1e-5;
        for idx in [0usize, 7, 19, x.len() - 1] {
            let mut a = x.clone();
            let mut b = x.clone();
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "idx {idx}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom::new(4, 2, 1);
        let x = rand4((2, 2, 6, 6), &mut rng);
        let w = rand4((3, 2, 4, 4), &mut rng);
        let r = rand4((2, 3, 3, 3), &mut rng);
        let b = [0.0; 3];
        let grads = conv2d_backward(x.view(), w.view(), g, r.view(), true);
        check_grad(
            &|xx| (conv2d(xx.view(), w.view(), &b, g) * &r).sum(),
            &x,
            grads.dx.as_ref().unwrap(),
        );
        check_grad(
            &|ww| (conv2d(x.view(), ww.view(), &b, g) * &r).sum(),
            &w,
            &grads.dweight,
        );
        let total: f64 = r
            .sum_axis(ndarray::Axis(0))
            .sum_axis(ndarray::Axis(1))
            .sum_axis(ndarray::Axis(1))[0];
        assert!((grads.dbias[0] - total).abs() < 1e-12);
    }

    #[test]
    fn conv_transpose_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::new(3, 2, 1);
        let x = rand4((2, 3, 3, 3), &mut rng);
        let w = rand4((3, 2, 3, 3), &mut rng);
        let r = rand4((2, 2, 6, 6), &mut rng);
        let b = [0.0; 2];
        let grads = conv_transpose2d_backward(x.view(), w.view(), g, r.view(), true);
        check_grad(
            &|xx| (conv_transpose2d(xx.view(), w.view(), &b, g, 1) * &r).sum(),
            &x,
            grads.dx.as_ref().unwrap(),
        );
        check_grad(
            &|ww| (conv_transpose2d(x.view(), ww.view(), &b, g, 1) * &r).sum(),
            &w,
            &grads.dweight,
        );
    }

    #[test]
    fn instance_norm_statistics_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand4((2, 3, 5, 4), &mut rng).mapv(|v| 3.0 * v + 1.5);
        let (y, inv) = instance_norm(x.view());
        for plane in y.as_slice().unwrap().chunks(20) {
            let m: f64 = plane.iter().sum::<f64>() / 20.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let r = rand4((2, 3, 5, 4), &mut rng);
        let dx = instance_norm_backward(&y, &inv, r.view());
        check_grad(&|xx| (instance_norm(xx.view()).0 * &r).sum(), &x, &dx);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand4((1, 2, 4, 6), &mut rng);
        let y = rand4((1, 2, 2, 3), &mut rng);
        let lhs = (avg_pool2(x.view()) * &y).sum();
        let rhs = (&x * &avg_pool2_backward(y.view(), 4, 6)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
