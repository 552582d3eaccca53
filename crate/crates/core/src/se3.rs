//! Rotations, rigid poses and the linearized motion chart.
//!
//! Rotations are unit quaternions kept in a canonical hemisphere (`w >= 0`,
//! and at `w == 0` the first nonzero vector component positive) so that the
//! logarithm is single-valued. The flow-matching state treats the so(3)
//! axis-angle vector and the translation as independent Euclidean
//! coordinates; the coupled SE(3) exponential is not used.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this rotation angle (radians) exp/log switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

const HALF_TURN_W: f64 = 1e-14;

/// A 3D rotation stored as a canonical unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a rotation from (possibly unnormalized) quaternion coefficients.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let raw = Quaternion::new(w, x, y, z);
        let norm = raw.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical(raw / norm))
    }

    /// Projects a 3×3 matrix onto SO(3) and converts it.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite rotation matrix".into()));
        }
        let rot = Rotation3::from_matrix_eps(m, 1e-15, 100, Rotation3::identity());
        Ok(Self::canonical(
            *UnitQuaternion::from_rotation_matrix(&rot).quaternion(),
        ))
    }

    fn canonical(mut q: Quaternion<f64>) -> Self {
        // cos(π/2) is 6e-17 in floating point; treat such w as an exact half turn
        if q.w.abs() < HALF_TURN_W {
            q.w = 0.0;
        }
        let flip = if q.w != 0.0 {
            q.w < 0.0
        } else {
            let v = [q.i, q.j, q.k];
            v.iter().find(|c| **c != 0.0).is_some_and(|c| *c < 0.0)
        };
        if flip {
            q = -q;
        }
        // renormalize so the unit invariant survives long composition chains
        let n = q.norm();
        Self {
            q: UnitQuaternion::new_unchecked(q / n),
        }
    }

    /// Quaternion coefficients `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(*self.q.inverse().quaternion())
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(*(self.q * other.q).quaternion())
    }

    pub fn angle(&self) -> f64 {
        log_map(self).norm()
    }
}

/// so(3) → SO(3) exponential.
pub fn exp_map(rho: &Vector3<f64>) -> Result<Rotation> {
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite rotation vector {rho:?}"
        )));
    }
    Ok(exp_finite(rho))
}

fn exp_finite(rho: &Vector3<f64>) -> Rotation {
    let theta2 = rho.norm_squared();
    let theta = theta2.sqrt();
    let (w, s) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Rotation::canonical(Quaternion::new(w, s * rho.x, s * rho.y, s * rho.z))
}

/// SO(3) → so(3) logarithm on the principal branch (`‖ρ‖ ≤ π`).
pub fn log_map(r: &Rotation) -> Vector3<f64> {
    let [w, x, y, z] = r.wxyz();
    let v = Vector3::new(x, y, z);
    let n = v.norm();
    // canonical form guarantees w >= 0
    let scale = if n < 0.5 * SMALL_ANGLE {
        (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        2.0 * n.atan2(w) / n
    };
    v * scale
}

/// Angle of the relative rotation `a⁻¹ b`, in radians.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    // conj(a) * b written out so that a == b gives exactly zero
    let (qa, qb) = (a.q.quaternion(), b.q.quaternion());
    let (va, vb) = (qa.imag(), qb.imag());
    let w = qa.w * qb.w + va.dot(&vb);
    let v = vb * qa.w - va * qb.w - va.cross(&vb);
    2.0 * v.norm().atan2(w.abs())
}

/// A rigid transform: rotation followed by translation (meters).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RelativePose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    /// Group product `self · other`.
    pub fn compose(&self, other: &RelativePose) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -rinv.rotate(&self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Homogeneous 4×4 matrix `[R t; 0 1]`.
    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
    }
}

/// A point of the 6-dimensional flow-matching state space.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MotionState {
    /// so(3) axis-angle vector, radians.
    pub rho: Vector3<f64>,
    /// Translation, meters.
    pub trans: Vector3<f64>,
}

impl MotionState {
    pub const DIM: usize = 6;

    pub fn new(rho: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rho, trans }
    }

    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            rho: Vector3::new(a[0], a[1], a[2]),
            trans: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho.x,
            self.rho.y,
            self.rho.z,
            self.trans.x,
            self.trans.y,
            self.trans.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn pose_to_state(p: &RelativePose) -> MotionState {
    MotionState {
        rho: log_map(&p.rotation),
        trans: p.translation,
    }
}

pub fn state_to_pose(s: &MotionState) -> Result<RelativePose> {
    if !s.trans.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite translation {:?}",
            s.trans
        )));
    }
    Ok(RelativePose {
        rotation: exp_map(&s.rho)?,
        translation: s.trans,
    })
}

/// Uniformly distributed rotation (normalized 4D Gaussian).
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if let Ok(r) = Rotation::from_wxyz(w, x, y, z) {
            return r;
        }
    }
}

/// Draws a flow-matching initial state: translation from N(0, I₃), rotation
/// uniform on SO(3) expressed in so(3) coordinates.
pub fn sample_initial<R: Rng + ?Sized>(rng: &mut R) -> MotionState {
    let trans = Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let rot = sample_uniform_rotation(rng);
    MotionState {
        rho: log_map(&rot),
        trans,
    }
}

/// CDF of the rotation angle of a uniformly distributed rotation.
pub fn uniform_angle_cdf(theta: f64) -> f64 {
    let t = theta.clamp(0.0, PI);
    (t - t.sin()) / PI
}
