//! Rigid-body transforms, point-cloud normalization, and pose deltas.
//!
//! Everything here is a pure function of its inputs; no shared state.

pub mod shapes;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use shapes::{sample_surface, Category, ShapeParams};

/// Max deviation from unit norm tolerated in a quaternion.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// Rigid transform as a unit quaternion `(w,x,y,z)` plus a translation
/// in meters. Quaternions are canonicalized to `w >= 0` so that equal
/// rotations compare bitwise-stably.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Builds a transform, normalizing and canonicalizing the quaternion.
    /// Rejects quaternions whose norm is far from 1 or non-finite input.
    pub fn new(rotation: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite transform components"));
        }
        let norm = quat_norm(&rotation);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "quaternion norm {norm} too far from 1"
            )));
        }
        let mut q = [
            rotation[0] / norm,
            rotation[1] / norm,
            rotation[2] / norm,
            rotation[3] / norm,
        ];
        canonicalize(&mut q);
        Ok(RigidTransform {
            rotation: q,
            translation,
        })
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        RigidTransform {
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Err(Error::invalid("axis-angle axis has zero length"));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        RigidTransform::new(
            [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n],
            translation,
        )
    }

    /// Rotation vector (axis * angle) and translation, i.e. exp of a twist.
    pub fn from_twist(rotvec: [f64; 3], translation: [f64; 3]) -> Self {
        let angle = (rotvec[0] * rotvec[0] + rotvec[1] * rotvec[1] + rotvec[2] * rotvec[2]).sqrt();
        if angle < 1e-14 {
            return RigidTransform {
                rotation: [1.0, 0.0, 0.0, 0.0],
                translation,
            };
        }
        RigidTransform::from_axis_angle(rotvec, angle, translation)
            .expect("nonzero axis by construction")
    }

    /// Rotation part as a rotation vector (axis * angle, radians).
    pub fn rotation_vector(&self) -> [f64; 3] {
        let q = self.rotation;
        let sin_half = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if sin_half < 1e-14 {
            return [0.0, 0.0, 0.0];
        }
        let angle = 2.0 * sin_half.atan2(q[0]);
        let k = angle / sin_half;
        [q[1] * k, q[2] * k, q[3] * k]
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        // self ∘ other: apply `other` first, then `self`.
        let mut q = quat_mul(&self.rotation, &other.rotation);
        canonicalize(&mut q);
        let t = rotate_vec(&self.rotation, &other.translation);
        RigidTransform {
            rotation: q,
            translation: [
                t[0] + self.translation[0],
                t[1] + self.translation[1],
                t[2] + self.translation[2],
            ],
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let mut qinv = [
            self.rotation[0],
            -self.rotation[1],
            -self.rotation[2],
            -self.rotation[3],
        ];
        canonicalize(&mut qinv);
        let t = rotate_vec(&qinv, &self.translation);
        RigidTransform {
            rotation: qinv,
            translation: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = rotate_vec(&self.rotation, &p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }

    /// Rotates a direction (no translation).
    pub fn apply_direction(&self, d: [f64; 3]) -> [f64; 3] {
        rotate_vec(&self.rotation, &d)
    }

    /// Flattened `(qw,qx,qy,qz,tx,ty,tz)` layout used in tokens and files.
    pub fn to_array7(&self) -> [f64; 7] {
        [
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.rotation[3],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn from_array7(a: &[f64; 7]) -> Result<Self> {
        RigidTransform::new([a[0], a[1], a[2], a[3]], [a[4], a[5], a[6]])
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.rotation;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }
}

fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn rotate_vec(q: &[f64; 4], v: &[f64; 3]) -> [f64; 3] {
    // v' = v + 2*qv x (qv x v + w*v)
    let qv = [q[1], q[2], q[3]];
    let t = cross(&qv, v);
    let t = [t[0] + q[0] * v[0], t[1] + q[0] * v[1], t[2] + q[0] * v[2]];
    let u = cross(&qv, &t);
    [v[0] + 2.0 * u[0], v[1] + 2.0 * u[1], v[2] + 2.0 * u[2]]
}

pub fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn canonicalize(q: &mut [f64; 4]) {
    if q[0] < 0.0 || (q[0] == 0.0 && (q[1] < 0.0 || (q[1] == 0.0 && (q[2] < 0.0 || (q[2] == 0.0 && q[3] < 0.0))))) {
        for c in q.iter_mut() {
            *c = -*c;
        }
    }
}

/// Canonical surface samples of a grasped object, object frame, meters.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Array2<f64>,
    pub category: Category,
}

impl PointCloud {
    pub fn new(points: Array2<f64>, category: Category) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.ncols() != 3 {
            return Err(Error::Dimension {
                context: "PointCloud".into(),
                expected: 3,
                actual: points.ncols(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud contains non-finite coordinates"));
        }
        Ok(PointCloud { points, category })
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn centroid(&self) -> [f64; 3] {
        let m = self.points.mean_axis(ndarray::Axis(0)).unwrap();
        [m[0], m[1], m[2]]
    }
}

/// End-effector pose in the world frame at a trajectory timestep.
#[derive(Debug, Clone, Copy)]
pub struct EEPose {
    pub pose: RigidTransform,
    pub timestep: usize,
}

/// Current pose expressed relative to a past pose (lag 1 or 2 steps).
#[derive(Debug, Clone, Copy)]
pub struct PoseDelta {
    pub delta: RigidTransform,
    pub lag: usize,
}

/// Subtracts the centroid, returning the centered cloud and the centroid.
pub fn mean_center(cloud: &PointCloud) -> Result<(PointCloud, [f64; 3])> {
    if cloud.points.nrows() == 0 {
        return Err(Error::invalid("cannot center an empty cloud"));
    }
    let c = cloud.centroid();
    let mut pts = cloud.points.clone();
    for mut row in pts.rows_mut() {
        row[0] -= c[0];
        row[1] -= c[1];
        row[2] -= c[2];
    }
    Ok((PointCloud::new(pts, cloud.category)?, c))
}

/// Applies `R·x + t` to each row of an `N x 3` array.
pub fn apply_transform(t: &RigidTransform, pts: &Array2<f64>) -> Result<Array2<f64>> {
    if (quat_norm(&t.rotation) - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::invalid("transform quaternion is not unit length"));
    }
    if pts.ncols() != 3 {
        return Err(Error::Dimension {
            context: "apply_transform".into(),
            expected: 3,
            actual: pts.ncols(),
        });
    }
    if pts.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points contain non-finite coordinates"));
    }
    let r = t.rotation_matrix();
    let mut out = Array2::zeros(pts.raw_dim());
    for (i, p) in pts.rows().into_iter().enumerate() {
        for k in 0..3 {
            out[(i, k)] =
                r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2] + t.translation[k];
        }
    }
    Ok(out)
}

/// Relative pose `past⁻¹ ∘ current`, expressed in the past frame, so the
/// identity is the no-motion case. Lag must be 1 or 2.
pub fn pose_delta(current: &EEPose, past: &EEPose) -> Result<PoseDelta> {
    if past.timestep >= current.timestep {
        return Err(Error::invalid(format!(
            "past timestep {} is not before current {}",
            past.timestep, current.timestep
        )));
    }
    let lag = current.timestep - past.timestep;
    if lag != 1 && lag != 2 {
        return Err(Error::invalid(format!("pose delta lag {lag} not in {{1,2}}")));
    }
    Ok(PoseDelta {
        delta: past.pose.invert().compose(&current.pose),
        lag,
    })
}

#[cfg(test)]
pub(crate) fn random_transform(rng: &mut rand_chacha::ChaCha8Rng) -> RigidTransform {
    use rand::Rng;
    let axis = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0f64),
    ];
    let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let t = [
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    ];
    RigidTransform::from_axis_angle(axis, angle, t)
        .unwrap_or_else(|_| RigidTransform::from_translation(t))
}
