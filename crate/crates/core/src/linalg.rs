//! Small fixed-size vectors and rigid transforms.

use std::ops::{Add, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    #[inline]
    pub fn new(x: T, y: T, z: T) -> Self {
        Self([x, y, z])
    }

    #[inline]
    pub fn zero() -> Self {
        Self([T::zero(); 3])
    }

    #[inline]
    pub fn x(&self) -> T {
        self.0[0]
    }
    #[inline]
    pub fn y(&self) -> T {
        self.0[1]
    }
    #[inline]
    pub fn z(&self) -> T {
        self.0[2]
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        Self([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }

    #[inline]
    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n > T::zero() {
            *self * (T::one() / n)
        } else {
            *self
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self([f(self.0[0]), f(self.0[1]), f(self.0[2])])
    }

    pub fn cast<U: Real>(&self) -> Vec3<U> {
        Vec3(self.0.map(|v| U::lit(v.to_f64_lossy())))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline]
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major 4×4 rigid transform (rotation block + translation column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rigid<T>(pub [[T; 4]; 4]);

impl<T: Real> Rigid<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Self(m)
    }

    pub fn from_rotation_translation(r: [[T; 3]; 3], t: Vec3<T>) -> Self {
        let mut m = Self::identity();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = r[i][j];
            }
            m.0[i][3] = t[i];
        }
        m
    }

    /// Camera-to-world pose at `eye` looking at `target`, in the +z-forward,
    /// y-down camera convention.
    pub fn look_at(eye: Vec3<T>, target: Vec3<T>, world_up: Vec3<T>) -> Self {
        let forward = (target - eye).normalized();
        let right = forward.cross(&world_up).normalized();
        let down = forward.cross(&right);
        let r = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::from_rotation_translation(r, eye)
    }

    pub fn rotation(&self) -> [[T; 3]; 3] {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3<T> {
        Vec3::new(self.0[0][3], self.0[1][3], self.0[2][3])
    }

    #[inline]
    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        )
    }

    #[inline]
    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotate(p) + self.translation()
    }

    /// Inverse of a rigid transform: `[Rᵀ | −Rᵀt]`.
    pub fn inverse_rigid(&self) -> Self {
        let r = self.rotation();
        let mut rt = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let inv = Self::from_rotation_translation(rt, Vec3::zero());
        let t = -inv.rotate(self.translation());
        Self::from_rotation_translation(rt, t)
    }

    /// Largest deviation of `R·Rᵀ` from identity.
    pub fn orthonormality_error(&self) -> T {
        let r = self.rotation();
        let mut worst = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc += r[i][k] * r[j][k];
                }
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }

    pub fn compose(&self, o: &Self) -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc += self.0[i][k] * o.0[k][j];
                }
                *v = acc;
            }
        }
        Self(m)
    }

    pub fn cast<U: Real>(&self) -> Rigid<U> {
        Rigid(self.0.map(|row| row.map(|v| U::lit(v.to_f64_lossy()))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_orthonormal_and_faces_target() {
        let pose: Rigid<f64> = Rigid::look_at(Vec3::new(3.0, 0.5, 2.0), Vec3::zero(), Vec3::new(0.0, 1.0, 0.0));
        assert!(pose.orthonormality_error() < 1e-12);
        let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
        let expect = (Vec3::zero() - Vec3::new(3.0, 0.5, 2.0)).normalized();
        assert!((fwd - expect).norm() < 1e-12);
        // seen from +z, world +x is image right and world +y is image up
        let front: Rigid<f64> = Rigid::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zero(), Vec3::new(0.0, 1.0, 0.0));
        assert!((front.rotate(Vec3::new(1.0, 0.0, 0.0)) - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((front.rotate(Vec3::new(0.0, 1.0, 0.0)) - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        let inv: Rigid<f64> = pose.inverse_rigid().compose(&pose);
        assert!((inv.0[0][3]).abs() < 1e-12 && (inv.0[1][1] - 1.0).abs() < 1e-12);
    }
}
