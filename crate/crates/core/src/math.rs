//! Small rigid-body helpers shared by the body model, the canonical map and the renderer.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to their series expansion.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotation matrix for an axis-angle vector (radians).
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta = axis_angle.norm();
    let k = axis_angle.cross_matrix();
    let (a, b) = if theta < SMALL_ANGLE {
        // sin(t)/t ~ 1 - t^2/6, (1 - cos t)/t^2 ~ 1/2 - t^2/24
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    Mat3::identity() + k * a + k * k * b
}

/// Inverse of [`rodrigues`] for proper rotation matrices.
pub fn axis_angle(rotation: &Mat3) -> Vec3 {
    Rotation3::from_matrix_unchecked(*rotation).scaled_axis()
}

/// Rotation-plus-translation map `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Rigid {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Rigid {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Largest absolute entry of `RᵀR - I`, plus the determinant.
pub fn orthonormality_error(r: &Mat3) -> (f64, f64) {
    let e = (r.transpose() * r - Mat3::identity()).abs().max();
    (e, r.determinant())
}

#[inline]
pub fn to_vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

#[inline]
pub fn to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        let y = r * Vec3::y();
        assert_relative_eq!(y, -Vec3::x(), epsilon = 1e-15);
    }

    #[test]
    fn series_branch_is_continuous() {
        let tiny = Vec3::new(3e-9, -2e-9, 1e-9);
        let a = rodrigues(&tiny);
        let b = *Rotation3::new(tiny).matrix();
        assert_relative_eq!(a, b, epsilon = 1e-16);
        assert_eq!(rodrigues(&Vec3::zeros()), Mat3::identity());
    }

    #[test]
    fn rodrigues_is_orthonormal_and_inverts() {
        let aa = Vec3::new(0.3, -1.2, 2.0);
        let r = rodrigues(&aa);
        let (err, det) = orthonormality_error(&r);
        assert!(err < 1e-12);
        assert_relative_eq!(det, 1.0, epsilon = 1e-12);
        assert_relative_eq!(axis_angle(&r), aa, epsilon = 1e-12);
    }

    #[test]
    fn rigid_inverse_round_trip() {
        let g = Rigid::new(rodrigues(&Vec3::new(0.1, 0.2, -0.4)), Vec3::new(1.0, -2.0, 0.5));
        let x = Vec3::new(0.3, 0.7, -0.9);
        assert_relative_eq!(g.inverse().apply(&g.apply(&x)), x, epsilon = 1e-14);
        let h = g.compose(&g.inverse());
        assert_relative_eq!(h.rotation, Mat3::identity(), epsilon = 1e-14);
    }
}
