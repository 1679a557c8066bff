use serde::{Deserialize, Serialize};

use super::{add, Point};
use crate::error::{Error, Result};
use crate::tensor::graph::{hamilton, rot_from_quat};
use crate::tensor::Real;

/// Quaternion stored as (w, x, y, z).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: Real,
    pub x: Real,
    pub y: Real,
    pub z: Real,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: Real, x: Real, y: Real, z: Real) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_slice(v: &[Real]) -> Result<Self> {
        match v {
            [w, x, y, z] => Ok(Self::new(*w, *x, *y, *z)),
            _ => Err(Error::shape("Quaternion::from_slice", &[4], &[v.len()])),
        }
    }

    pub fn to_array(self) -> [Real; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Point, angle: Real) -> Result<Self> {
        let n = super::norm(&axis);
        if !(n > 0.0) || !angle.is_finite() {
            return Err(Error::invalid("axis-angle rotation needs a non-zero axis"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n))
    }

    pub fn norm(self) -> Real {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quaternion) -> Real {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// `q / (|q| + 1e-8)`.
    pub fn normalized(self) -> Self {
        let n = self.norm() + 1e-8;
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Sign representative with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    /// Hamilton product `self * rhs`.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Quaternion) -> Self {
        let [w, x, y, z] = hamilton(&self.to_array(), &rhs.to_array());
        Self::new(w, x, y, z)
    }

    /// Row-major rotation matrix of the (assumed unit) quaternion.
    pub fn to_matrix(self) -> [[Real; 3]; 3] {
        let r = rot_from_quat(self.w, self.x, self.y, self.z);
        [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]
    }

    /// Unit quaternion (w >= 0) of a rotation matrix. Errors if `m` deviates
    /// from orthonormal with determinant +1 by more than `tol`.
    pub fn from_matrix(m: &[[Real; 3]; 3], tol: Real) -> Result<Self> {
        let mut worst: Real = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: Real = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        worst = worst.max((det - 1.0).abs());
        if !(worst <= tol) {
            return Err(Error::invalid(format!(
                "rotation matrix is not orthonormal (deviation {worst:e})"
            )));
        }
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            Self::new(
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            Self::new(
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        let n = q.norm();
        Ok(Self::new(q.w / n, q.x / n, q.y / n, q.z / n).canonical())
    }

    pub fn rotate(self, p: &Point) -> Point {
        let r = self.to_matrix();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Rotation angle in degrees between two unit quaternions.
    pub fn angle_deg(self, o: Quaternion) -> Real {
        2.0 * self.dot(o).abs().min(1.0).acos().to_degrees()
    }
}

/// Rigid motion `p -> R(q) p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub q: Quaternion,
    pub t: Point,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        q: Quaternion::IDENTITY,
        t: [0.0; 3],
    };

    pub fn new(q: Quaternion, t: Point) -> Self {
        Self { q, t }
    }

    pub fn apply(&self, p: &Point) -> Result<Point> {
        super::pose_apply(self, p)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            q: self.q.mul(other.q),
            t: add(&self.q.rotate(&other.t), &self.t),
        }
    }

    pub fn inverse(&self) -> Pose {
        let qi = self.q.conjugate();
        let t = qi.rotate(&self.t);
        Pose {
            q: qi,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    /// Homogeneous 4 x 4 matrix, row-major.
    pub fn to_matrix(&self) -> [[Real; 4]; 4] {
        let r = self.q.to_matrix();
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = self.t[i];
        }
        m[3][3] = 1.0;
        m
    }

    /// Inverse of [`Pose::to_matrix`]; the rotation block is validated with
    /// tolerance `tol`.
    pub fn from_matrix(m: &[[Real; 4]; 4], tol: Real) -> Result<Pose> {
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Ok(Pose {
            q: Quaternion::from_matrix(&r, tol)?,
            t: [m[0][3], m[1][3], m[2][3]],
        })
    }
}
