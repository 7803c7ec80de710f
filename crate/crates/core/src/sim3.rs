//! Similarity transforms `p ↦ s·R·p + t`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3Transform {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Rotates and scales a direction without translating it.
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.scale * (self.rotation * v)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
            scale: 1.0 / self.scale,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
            scale: self.scale * other.scale,
        }
    }

    /// True when `RᵀR = I` within `tol`, `det R > 0` and the scale is positive.
    pub fn is_valid(&self, tol: f64) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        err <= tol && self.rotation.determinant() > 0.0 && self.scale > 0.0 && self.scale.is_finite()
    }

    pub fn to_record(&self) -> Sim3Record {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        Sim3Record {
            rotation: r,
            translation: [self.translation.x, self.translation.y, self.translation.z],
            scale: self.scale,
        }
    }

    pub fn from_record(r: &Sim3Record) -> Self {
        Self {
            rotation: Mat3::from_row_slice(&r.rotation),
            translation: Vec3::from(r.translation),
            scale: r.scale,
        }
    }
}

/// Serialized form: row-major rotation, translation, scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Record {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub scale: f64,
}

/// Rotation angle of `a⁻¹·b` in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    let skew = Vec3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    (skew.norm() / 2.0).atan2(c)
}

/// Rotation by `angle` radians about a (not necessarily unit) axis.
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
}

/// Uniformly distributed random rotation.
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Mat3 {
    use rand_distr::{Distribution, StandardNormal};
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
            break;
        }
    }
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_and_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Sim3Transform::new(random_rotation(&mut rng), Vec3::new(0.3, -1.0, 2.0), 1.7);
        let p = Vec3::new(0.1, 0.2, -0.3);
        assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-12);
        let id = a.compose(&a.inverse());
        assert!((id.apply(&p) - p).norm() < 1e-12);
        assert!(a.is_valid(1e-9));
    }

    #[test]
    fn angle_between_small_rotations() {
        let r = axis_angle(Vec3::new(1.0, 2.0, 3.0), 1e-8);
        let ang = rotation_angle_between(&Mat3::identity(), &r);
        assert!((ang - 1e-8).abs() < 1e-15);
        let r = axis_angle(Vec3::z(), 2.0);
        assert!((rotation_angle_between(&Mat3::identity(), &r) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn record_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Sim3Transform::new(random_rotation(&mut rng), Vec3::new(1.0, 2.0, 3.0), 0.5);
        assert_eq!(Sim3Transform::from_record(&a.to_record()), a);
    }
}
