//! Pinhole cameras, ray generation and stratified depth sampling.
//!
//! Convention: right-handed, the camera looks down +z in camera space with
//! image x to the right and image y down. `c2w` maps camera coordinates to
//! world coordinates. Pixel `(row, col)` is addressed at its center
//! `(col + 0.5, row + 0.5)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Rigid, Vec3};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
    pub c2w: Rigid<T>,
    pub near: T,
    pub far: T,
    pub time: T,
}

impl<T: Real> Camera<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(invalid("focal lengths must be positive"));
        }
        if !(self.near > T::zero() && self.near < self.far) {
            return Err(invalid(format!(
                "scene bounds must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if !(self.time >= T::zero() && self.time <= T::one()) {
            return Err(invalid(format!("camera time {} outside [0, 1]", self.time)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be non-zero"));
        }
        if self.c2w.orthonormality_error() > T::lit(1e-6) {
            return Err(invalid("camera rotation is not orthonormal"));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3<T> {
        self.c2w.translation()
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_through(&self, u: T, v: T) -> Ray<T> {
        let dir_cam = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, T::one());
        Ray {
            origin: self.center(),
            direction: self.c2w.rotate(dir_cam).normalized(),
            time: self.time,
        }
    }

    /// Projects a world point to `(u, v, depth)`; depth is the camera-space z.
    pub fn project(&self, p: Vec3<T>) -> (T, T, T) {
        let pc = self.c2w.inverse_rigid().transform_point(p);
        let z = pc.z();
        (self.fx * pc.x() / z + self.cx, self.fy * pc.y() / z + self.cy, z)
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        let c = |v: T| U::lit(v.to_f64_lossy());
        Camera {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            c2w: self.c2w.cast(),
            near: c(self.near),
            far: c(self.far),
            time: c(self.time),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit length.
    pub direction: Vec3<T>,
    pub time: T,
}

impl<T: Real> Ray<T> {
    #[inline]
    pub fn at(&self, s: T) -> Vec3<T> {
        self.origin + self.direction * s
    }
}

pub fn rays_for_pixels<T: Real>(camera: &Camera<T>, pixels: &[(usize, usize)]) -> Result<Vec<Ray<T>>> {
    let half = T::lit(0.5);
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= camera.height || col >= camera.width {
                return Err(invalid(format!(
                    "pixel ({row}, {col}) outside {}x{} image",
                    camera.height, camera.width
                )));
            }
            Ok(camera.ray_through(T::from_usize_lossy(col) + half, T::from_usize_lossy(row) + half))
        })
        .collect()
}

/// Sorted sample depths along a ray and their quadrature spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSamples<T> {
    pub s: Vec<T>,
    /// `delta[i] = s[i+1] - s[i]`; the last entry is `far - s[n-1]`.
    pub delta: Vec<T>,
}

/// One depth per equal bin of `[near, far]`: the bin midpoint, or a uniform
/// draw inside the bin when `jitter` is set.
pub fn stratified_sample<T: Real>(near: T, far: T, n: usize, jitter: bool, rng_seed: u64) -> Result<DepthSamples<T>> {
    if n < 2 {
        return Err(invalid(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(near < far) {
        return Err(invalid(format!("near ({near}) must be below far ({far})")));
    }
    let width = (far - near) / T::from_usize_lossy(n);
    let mut rng = jitter.then(|| ChaCha8Rng::seed_from_u64(rng_seed));
    let s: Vec<T> = (0..n)
        .map(|i| {
            let frac = match rng.as_mut() {
                Some(rng) => T::lit(rng.random::<f64>()),
                None => T::lit(0.5),
            };
            near + width * (T::from_usize_lossy(i) + frac)
        })
        .collect();
    Ok(DepthSamples {
        delta: spacings(&s, far),
        s,
    })
}

pub(crate) fn spacings<T: Real>(s: &[T], far: T) -> Vec<T> {
    let n = s.len();
    (0..n)
        .map(|i| if i + 1 < n { s[i + 1] - s[i] } else { far - s[i] })
        .collect()
}
