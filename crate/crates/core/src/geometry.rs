//! Small fixed-size 3D types: vectors, rotation matrices and rigid transforms.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]", bound(serialize = "T: Copy + Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> From<[T; 3]> for Vec3<T> {
    fn from([x, y, z]: [T; 3]) -> Self {
        Self { x, y, z }
    }
}

impl<T> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Self::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]))
    }

    pub fn to_f64(self) -> Vec3<f64> {
        Vec3::new(self.x.to_f64_lossy(), self.y.to_f64_lossy(), self.z.to_f64_lossy())
    }

    pub fn to_array(self) -> [T; 3] {
        self.into()
    }

    pub fn get(&self, i: usize) -> T {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }

    pub fn dot(&self, o: &Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(&self, o: &Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(&self) -> Self {
        self.scale(T::one() / self.norm())
    }

    pub fn distance(&self, o: &Self) -> T {
        (*self - *o).norm()
    }

    pub fn is_zero(&self) -> bool {
        self.x == T::zero() && self.y == T::zero() && self.z == T::zero()
    }

    pub fn component_mul(&self, o: &Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    /// Any unit vector orthogonal to `self` (which must be non-zero).
    pub fn any_orthogonal(&self) -> Self {
        let ax = self.x.abs();
        let ay = self.y.abs();
        let az = self.z.abs();
        let helper = if ax <= ay && ax <= az {
            Self::new(T::one(), T::zero(), T::zero())
        } else if ay <= az {
            Self::new(T::zero(), T::one(), T::zero())
        } else {
            Self::new(T::zero(), T::zero(), T::one())
        };
        self.cross(&helper).normalized()
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

/// Row-major 3x3 matrix, used for rotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn rot_x(a: T) -> Self {
        let (s, c) = a.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[o, z, z], [z, c, -s], [z, s, c]])
    }

    pub fn rot_y(a: T) -> Self {
        let (s, c) = a.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[c, z, s], [z, o, z], [-s, z, c]])
    }

    pub fn rot_z(a: T) -> Self {
        let (s, c) = a.sin_cos();
        let (o, z) = (T::one(), T::zero());
        Self::from_rows([[c, -s, z], [s, c, z], [z, z, o]])
    }

    /// Fixed-axis roll/pitch/yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: T, pitch: T, yaw: T) -> Self {
        Self::rot_z(yaw) * Self::rot_y(pitch) * Self::rot_x(roll)
    }

    /// Rodrigues rotation about a unit `axis`.
    pub fn from_axis_angle(axis: &Vec3<T>, angle: T) -> Self {
        let (s, c) = angle.sin_cos();
        let t = T::one() - c;
        let (x, y, z) = (axis.x, axis.y, axis.z);
        Self::from_rows([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self::from_rows([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: &Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut out = [[T::zero(); 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        Self { m: out }
    }
}

/// Rigid transform `x -> rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Transform<T> {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_xyz_rpy(xyz: Vec3<T>, rpy: Vec3<T>) -> Self {
        Self::new(Mat3::from_rpy(rpy.x, rpy.y, rpy.z), xyz)
    }

    pub fn rotation_about(axis: &Vec3<T>, angle: T) -> Self {
        Self::new(Mat3::from_axis_angle(axis, angle), Vec3::zeros())
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.mul_vec(&other.translation) + self.translation,
        }
    }

    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(&self.translation) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: Vec3<f64>, b: Vec3<f64>) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn axis_angle_agrees_with_elementary_rotations() {
        let a = 0.37;
        let x = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        let z = Vec3::new(0.0, 0.0, 1.0);
        let v = Vec3::new(0.3, -1.2, 0.7);
        assert!(close(Mat3::from_axis_angle(&x, a).mul_vec(&v), Mat3::rot_x(a).mul_vec(&v)));
        assert!(close(Mat3::from_axis_angle(&y, a).mul_vec(&v), Mat3::rot_y(a).mul_vec(&v)));
        assert!(close(Mat3::from_axis_angle(&z, a).mul_vec(&v), Mat3::rot_z(a).mul_vec(&v)));
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = Transform::rotation_about(&Vec3::new(0.0, 0.0, 1.0), FRAC_PI_2);
        assert!(close(t.apply(&Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 1.0, 0.0)));
    }

    #[test]
    fn inverse_round_trips() {
        let t = Transform::from_xyz_rpy(Vec3::new(0.1, -0.4, 2.0), Vec3::new(0.3, -1.1, 2.2));
        let p = Vec3::new(-0.5, 0.25, 1.5);
        assert!(close(t.inverse().apply(&t.apply(&p)), p));
        let id = t.compose(&t.inverse());
        assert!(close(id.translation, Vec3::zeros()));
    }

    #[test]
    fn any_orthogonal_is_unit_and_orthogonal() {
        for v in [Vec3::<f64>::new(1.0, 0.0, 0.0), Vec3::new(0.2, -3.0, 0.1), Vec3::new(0.0, 0.0, -2.0)] {
            let o = v.any_orthogonal();
            assert!((o.norm() - 1.0).abs() < 1e-12);
            assert!(o.dot(&v).abs() < 1e-12);
        }
    }
}
