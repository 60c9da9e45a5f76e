//! Emission–absorption quadrature along rays and whole-image rendering.
//!
//! For samples `i = 1..N` with density `σᵢ`, color `cᵢ` and spacing `δᵢ`:
//! `Tᵢ = exp(-Σ_{j<i} σⱼδⱼ)`, `wᵢ = Tᵢ(1 - exp(-σᵢδᵢ))`, `Ĉ = Σ wᵢcᵢ`.
//! Energy that passes every sample stays black.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::field::Field;
use crate::geometry::{rays_for_pixels, spacings, stratified_sample, Camera, Ray};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayRadiance<T> {
    pub color: [T; 3],
    /// `T_{N+1}`: probability the ray passes every sample.
    pub transmittance_out: T,
    /// Opacity-weighted mean sample depth; `far` when nothing is hit.
    pub expected_depth: T,
}

/// Composites one ray. Expected depth is measured from the first sample.
pub fn composite<T: Real>(sigmas: &[T], colors: &[[T; 3]], deltas: &[T]) -> Result<RayRadiance<T>> {
    let n = sigmas.len();
    if n == 0 || colors.len() != n || deltas.len() != n {
        return Err(invalid(format!(
            "composite needs equal non-empty arrays (σ {}, c {}, δ {})",
            n,
            colors.len(),
            deltas.len()
        )));
    }
    if sigmas.iter().any(|&s| !(s >= T::zero())) {
        return Err(invalid("densities must be non-negative"));
    }
    if deltas.iter().any(|&d| !(d >= T::zero())) {
        return Err(invalid("sample spacings must be non-negative"));
    }
    let mut s = Vec::with_capacity(n);
    let mut acc = T::zero();
    for &d in deltas {
        s.push(acc);
        acc += d;
    }
    Ok(composite_unchecked(sigmas, colors, deltas, &s, acc))
}

/// Sample weights `wᵢ` and transmittances `Tᵢ` (length N+1).
pub fn weights<T: Real>(sigmas: &[T], deltas: &[T]) -> (Vec<T>, Vec<T>) {
    let mut trans = Vec::with_capacity(sigmas.len() + 1);
    let mut w = Vec::with_capacity(sigmas.len());
    let mut optical = T::zero();
    trans.push(T::one());
    for (&sg, &d) in sigmas.iter().zip(deltas) {
        let t_i = (-optical).exp();
        let tau = sg * d;
        w.push(t_i * -(-tau).exp_m1());
        optical += tau;
        trans.push((-optical).exp());
    }
    (w, trans)
}

pub(crate) fn composite_unchecked<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    depths: &[T],
    far: T,
) -> RayRadiance<T> {
    let (w, trans) = weights(sigmas, deltas);
    let mut color = [T::zero(); 3];
    let mut wsum = T::zero();
    let mut dsum = T::zero();
    for ((&wi, c), &s) in w.iter().zip(colors).zip(depths) {
        for k in 0..3 {
            color[k] += wi * c[k];
        }
        wsum += wi;
        dsum += wi * s;
    }
    RayRadiance {
        color,
        transmittance_out: trans[sigmas.len()],
        expected_depth: if wsum > T::zero() { dsum / wsum } else { far },
    }
}

/// Gradients of `⟨g, Ĉ⟩` with respect to each σᵢ and cᵢ.
pub fn composite_backward<T: Real>(
    sigmas: &[T],
    colors: &[[T; 3]],
    deltas: &[T],
    grad_color: [T; 3],
    d_sigma: &mut [T],
    d_colors: &mut [[T; 3]],
) {
    let (w, trans) = weights(sigmas, deltas);
    let n = sigmas.len();
    let dot = |c: &[T; 3]| c[0] * grad_color[0] + c[1] * grad_color[1] + c[2] * grad_color[2];
    // suffix = Σ_{j>i} wⱼ ⟨cⱼ, g⟩
    let mut suffix = T::zero();
    for i in (0..n).rev() {
        let cg = dot(&colors[i]);
        d_sigma[i] = deltas[i] * (trans[i + 1] * cg - suffix);
        for k in 0..3 {
            d_colors[i][k] = w[i] * grad_color[k];
        }
        suffix += w[i] * cg;
    }
}

/// Per-ray sample placement shared by rendering and training.
pub(crate) struct RaySamples<T> {
    pub points: Array2<T>,
    pub dirs: Array2<T>,
    pub times: Array1<T>,
    pub depths: Vec<T>,
    pub deltas: Vec<T>,
    pub n: usize,
}

pub(crate) fn place_samples<T: Real>(
    rays: &[Ray<T>],
    seeds: &[u64],
    near: T,
    far: T,
    n: usize,
    jitter: bool,
) -> Result<RaySamples<T>> {
    let total = rays.len() * n;
    let mut points = Array2::zeros((total, 3));
    let mut dirs = Array2::zeros((total, 3));
    let mut times = Array1::zeros(total);
    let mut depths = Vec::with_capacity(total);
    let mut deltas = Vec::with_capacity(total);
    for (r, (ray, &seed)) in rays.iter().zip(seeds).enumerate() {
        let samples = stratified_sample(near, far, n, jitter, seed)?;
        for (i, &s) in samples.s.iter().enumerate() {
            let row = r * n + i;
            let p = ray.at(s);
            for k in 0..3 {
                points[[row, k]] = p[k];
                dirs[[row, k]] = ray.direction[k];
            }
            times[row] = ray.time;
        }
        depths.extend_from_slice(&samples.s);
        deltas.extend(spacings(&samples.s, far));
    }
    Ok(RaySamples {
        points,
        dirs,
        times,
        depths,
        deltas,
        n,
    })
}

pub(crate) fn composite_rows<T: Real>(
    samples: &RaySamples<T>,
    sigma: ArrayView1<T>,
    color: ArrayView2<T>,
    far: T,
) -> Vec<RayRadiance<T>> {
    let n = samples.n;
    let rays = sigma.len() / n;
    (0..rays)
        .map(|r| {
            let range = r * n..(r + 1) * n;
            let sg: Vec<T> = sigma.slice(ndarray::s![range.clone()]).to_vec();
            let cols: Vec<[T; 3]> = range
                .clone()
                .map(|i| [color[[i, 0]], color[[i, 1]], color[[i, 2]]])
                .collect();
            composite_unchecked(&sg, &cols, &samples.deltas[range.clone()], &samples.depths[range], far)
        })
        .collect()
}

/// Renders a set of rays with one batched field query.
pub fn render_rays<T: Real, F: Field<T> + ?Sized>(
    field: &F,
    rays: &[Ray<T>],
    seeds: &[u64],
    near: T,
    far: T,
    n_samples: usize,
    jitter: bool,
) -> Result<Vec<RayRadiance<T>>> {
    if seeds.len() != rays.len() {
        return Err(invalid("one seed per ray required"));
    }
    if rays.is_empty() {
        return Ok(Vec::new());
    }
    let samples = place_samples(rays, seeds, near, far, n_samples, jitter)?;
    let out = field.query(samples.points.view(), samples.dirs.view(), samples.times.view());
    Ok(composite_rows(&samples, out.sigma.view(), out.color.view(), far))
}

pub fn render_ray<T: Real, F: Field<T> + ?Sized>(
    field: &F,
    ray: &Ray<T>,
    near: T,
    far: T,
    n_samples: usize,
    jitter: bool,
    seed: u64,
) -> Result<RayRadiance<T>> {
    Ok(render_rays(field, std::slice::from_ref(ray), &[seed], near, far, n_samples, jitter)?[0])
}

/// Seed for the jitter of one pixel; independent of chunking and threads.
pub fn pixel_seed(seed: u64, pixel_index: u64) -> u64 {
    let mut z = seed ^ pixel_index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage<T> {
    /// `H × W × 3`, values in [0, 1].
    pub rgb: Array3<T>,
    pub depth: Array2<T>,
    pub transmittance: Array2<T>,
}

pub fn render_image<T: Real, F: Field<T> + ?Sized>(
    field: &F,
    camera: &Camera<T>,
    n_samples: usize,
    jitter: bool,
    seed: u64,
    chunk: usize,
) -> Result<RenderedImage<T>> {
    if chunk == 0 {
        return Err(invalid("chunk size must be at least 1"));
    }
    camera.validate()?;
    let (h, w) = (camera.height, camera.width);
    let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let results: Vec<Result<Vec<RayRadiance<T>>>> = pixels
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, px)| {
            let rays = rays_for_pixels(camera, px)?;
            let seeds: Vec<u64> = (0..px.len())
                .map(|k| pixel_seed(seed, (ci * chunk + k) as u64))
                .collect();
            render_rays(field, &rays, &seeds, camera.near, camera.far, n_samples, jitter)
        })
        .collect();
    let mut rgb = Array3::zeros((h, w, 3));
    let mut depth = Array2::zeros((h, w));
    let mut trans = Array2::zeros((h, w));
    let mut idx = 0;
    for chunk_result in results {
        for rr in chunk_result? {
            let (r, c) = (idx / w, idx % w);
            for k in 0..3 {
                rgb[[r, c, k]] = rr.color[k];
            }
            depth[[r, c]] = rr.expected_depth;
            trans[[r, c]] = rr.transmittance_out;
            idx += 1;
        }
    }
    Ok(RenderedImage {
        rgb,
        depth,
        transmittance: trans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldBatch;
    use crate::linalg::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vacuum_is_black() {
        let r = composite(&[0.0f64; 4], &[[0.3, 0.5, 0.9]; 4], &[0.25; 4]).unwrap();
        assert_eq!(r.color, [0.0; 3]);
        assert_eq!(r.transmittance_out, 1.0);
    }

    #[test]
    fn opaque_sample_returns_its_color() {
        let r = composite(&[20.0f64], &[[0.2, 0.4, 0.6]], &[1.0]).unwrap();
        for (a, b) in r.color.iter().zip([0.2, 0.4, 0.6]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn two_sample_hand_evaluation() {
        let r = composite(&[1.0f64, 20.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[1.0, 1.0]).unwrap();
        let w1 = 1.0 - (-1.0f64).exp();
        let w2 = (-1.0f64).exp() * (1.0 - (-20.0f64).exp());
        assert!((r.color[0] - w1).abs() < 1e-12);
        assert!((r.color[1] - w2).abs() < 1e-12);
        assert!((r.color[0] - 0.63212).abs() < 1e-5);
        assert!((r.color[1] - 0.36788).abs() < 1e-5);
        assert_eq!(r.color[2], 0.0);
    }

    #[test]
    fn negative_inputs_rejected() {
        assert!(composite(&[-1.0f64], &[[0.0; 3]], &[1.0]).is_err());
        assert!(composite(&[1.0f64], &[[0.0; 3]], &[-1.0]).is_err());
        assert!(composite::<f64>(&[], &[], &[]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let col: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let del: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let g = [0.3, -1.2, 0.7];
        let f = |s: &[f64], c: &[[f64; 3]]| {
            let r = composite(s, c, &del).unwrap();
            r.color[0] * g[0] + r.color[1] * g[1] + r.color[2] * g[2]
        };
        let mut ds = vec![0.0; n];
        let mut dc = vec![[0.0; 3]; n];
        composite_backward(&sig, &col, &del, g, &mut ds, &mut dc);
        let h = 1e-6;
        for i in 0..n {
            let mut a = sig.clone();
            let mut b = sig.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a, &col) - f(&b, &col)) / (2.0 * h);
            assert!((fd - ds[i]).abs() < 1e-7, "σ{i}: {fd} vs {}", ds[i]);
            let mut a = col.clone();
            let mut b = col.clone();
            a[i][1] += h;
            b[i][1] -= h;
            let fd = (f(&sig, &a) - f(&sig, &b)) / (2.0 * h);
            assert!((fd - dc[i][1]).abs() < 1e-7);
        }
    }

    struct Vacuum;
    impl Field<f64> for Vacuum {
        fn query(&self, x: ArrayView2<f64>, _: ArrayView2<f64>, _: ArrayView1<f64>) -> FieldBatch<f64> {
            FieldBatch {
                sigma: Array1::zeros(x.nrows()),
                color: Array2::from_elem((x.nrows(), 3), 0.5),
            }
        }
    }

    struct Fog;
    impl Field<f64> for Fog {
        fn query(&self, x: ArrayView2<f64>, _: ArrayView2<f64>, _: ArrayView1<f64>) -> FieldBatch<f64> {
            FieldBatch {
                sigma: x.column(2).mapv(|z| 0.3 + 0.1 * z.sin()),
                color: Array2::from_shape_fn((x.nrows(), 3), |(i, k)| {
                    (0.5 + 0.4 * (x[[i, k]] * 3.0).sin()).clamp(0.0, 1.0)
                }),
            }
        }
    }

    fn cam(size: usize) -> Camera<f64> {
        Camera {
            fx: size as f64,
            fy: size as f64,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
            c2w: crate::linalg::Rigid::identity(),
            near: 0.5,
            far: 3.0,
            time: 0.0,
        }
    }

    #[test]
    fn vacuum_image_is_black() {
        let img = render_image(&Vacuum, &cam(2), 8, false, 0, 3).unwrap();
        assert!(img.rgb.iter().all(|&v| v == 0.0));
        assert!(img.transmittance.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn chunking_does_not_change_pixels() {
        let c = cam(6);
        let a = render_image(&Fog, &c, 16, false, 0, 1).unwrap();
        let b = render_image(&Fog, &c, 16, false, 0, 36).unwrap();
        let d = render_image(&Fog, &c, 16, false, 0, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, d);
        let j1 = render_image(&Fog, &c, 16, true, 9, 1).unwrap();
        let j2 = render_image(&Fog, &c, 16, true, 9, 7).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn image_pixel_equals_single_ray() {
        let c = cam(4);
        let img = render_image(&Fog, &c, 16, true, 5, 3).unwrap();
        let ray = rays_for_pixels(&c, &[(2, 1)]).unwrap()[0];
        let rr = render_ray(&Fog, &ray, c.near, c.far, 16, true, pixel_seed(5, 9)).unwrap();
        assert_eq!(img.rgb[[2, 1, 0]], rr.color[0]);
        assert!(Vec3::new(img.rgb[[2, 1, 0]], 0.0, 0.0).is_finite());
    }
}
