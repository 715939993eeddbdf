//! Rigid-body value types and the pose arithmetic used by the controllers.
//!
//! Frame convention: world `x` runs along the wire travel direction, `y` is
//! depth (the camera line of sight) and `z` is vertical. Six-vectors are laid
//! out as `[linear; angular]` everywhere (twists, wrenches, pose errors and the
//! blending weights).

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;

/// Position plus unit-quaternion orientation in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

/// Serialized pose layout: `position` as `[x, y, z]`, `orientation` as
/// `[w, x, y, z]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRepr {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

/// Quaternions read back from logs must already be unit within this bound.
pub const STORED_UNIT_TOLERANCE: f64 = 1e-9;

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.orientation.quaternion();
        PoseRepr {
            position: [p.position.x, p.position.y, p.position.z],
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        Pose::from_repr(&r, STORED_UNIT_TOLERANCE)
    }
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        Pose { position, orientation }
    }

    pub fn identity() -> Self {
        Pose::new(Vec3::zeros(), UnitQuaternion::identity())
    }

    pub fn from_translation(position: Vec3) -> Self {
        Pose::new(position, UnitQuaternion::identity())
    }

    /// Builds a pose from its serialized form.
    ///
    /// A quaternion whose norm is within `unit_tolerance` of one is accepted.
    /// It is kept bit-exact when already unit to storage precision (so logged
    /// poses replay exactly) and normalized otherwise.
    pub fn from_repr(r: &PoseRepr, unit_tolerance: f64) -> Result<Self, String> {
        let all = r.position.iter().chain(r.orientation.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err("non-finite pose component".into());
        }
        let [w, x, y, z] = r.orientation;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if (norm - 1.0).abs() > unit_tolerance {
            return Err(format!("quaternion norm {norm} is not unit"));
        }
        let orientation = if (norm - 1.0).abs() <= STORED_UNIT_TOLERANCE {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::new_normalize(q)
        };
        Ok(Pose::new(Vec3::from(r.position), orientation))
    }

    /// Maps a point from the pose's local frame into the world frame.
    pub fn transform_point(&self, local: &Vec3) -> Vec3 {
        self.position + self.orientation * local
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(linear: Vec3, angular: Vec3) -> Self {
        Twist { linear, angular }
    }

    pub fn from_vec6(v: &Vec6) -> Self {
        Twist {
            linear: v.fixed_rows::<3>(0).into_owned(),
            angular: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vec6(&self) -> Vec6 {
        stack(&self.linear, &self.angular)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Wrench { force, torque }
    }

    pub fn from_vec6(v: &Vec6) -> Self {
        Wrench {
            force: v.fixed_rows::<3>(0).into_owned(),
            torque: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vec6(&self) -> Vec6 {
        stack(&self.force, &self.torque)
    }

    pub fn scale(&self, c: f64) -> Self {
        Wrench::new(self.force * c, self.torque * c)
    }
}

/// Translational error in components 0..3 (m), rotational error as the
/// axis-angle of the relative rotation in 3..6 (rad).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError(pub Vec6);

impl PoseError {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vec6(&self) -> &Vec6 {
        &self.0
    }
}

fn stack(a: &Vec3, b: &Vec3) -> Vec6 {
    Vec6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Quaternion log-map onto the shortest arc: returns the rotation vector
/// (axis times angle) with angle in `[0, π]`.
pub fn log_map(q: &UnitQuaternion<f64>) -> Vec3 {
    let mut w = q.w;
    let mut v = q.imag();
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let sin_half = v.norm();
    if sin_half < 1e-12 {
        // first-order expansion: q ≈ (1, θ/2)
        return v * 2.0;
    }
    let angle = 2.0 * sin_half.atan2(w);
    v * (angle / sin_half)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp_map(rotation: &Vec3) -> UnitQuaternion<f64> {
    let angle = rotation.norm();
    if angle < 1e-12 {
        return UnitQuaternion::new_normalize(Quaternion::new(
            1.0,
            rotation.x * 0.5,
            rotation.y * 0.5,
            rotation.z * 0.5,
        ));
    }
    let axis = Unit::new_unchecked(rotation / angle);
    UnitQuaternion::from_axis_angle(&axis, angle)
}

/// Pose difference `target − current`: plain subtraction for position, the
/// shortest-arc log of `target ⊗ current⁻¹` for orientation.
pub fn pose_error(target: &Pose, current: &Pose) -> PoseError {
    let dp = target.position - current.position;
    let dq = target.orientation * current.orientation.inverse();
    let rot = log_map(&dq);
    debug_assert!(rot.norm() <= PI + 1e-9);
    PoseError(stack(&dp, &rot))
}

/// One explicit-Euler step of a world-frame twist. The orientation update is
/// left-multiplied and re-normalized.
pub fn integrate_pose(p: &Pose, v: &Twist, dt: f64) -> Pose {
    debug_assert!(dt > 0.0);
    let position = p.position + v.linear * dt;
    let q = exp_map(&(v.angular * dt)) * p.orientation;
    Pose::new(position, UnitQuaternion::new_normalize(q.into_inner()))
}

/// The eight control points of a loop handle: vertices at `k·45°` on the ring
/// circle in the handle's local `xy` plane, in world coordinates.
pub fn octagon_points(handle_pose: &Pose, ring_radius: f64) -> [Vec3; 8] {
    debug_assert!(ring_radius > 0.0);
    std::array::from_fn(|k| {
        let a = k as f64 * PI / 4.0;
        let local = Vec3::new(ring_radius * a.cos(), ring_radius * a.sin(), 0.0);
        handle_pose.transform_point(&local)
    })
}

/// Orientation whose local `z` axis points along `normal`, with local `x`
/// chosen as the component of `up` orthogonal to `normal`.
pub fn frame_with_normal(normal: &Vec3, up: &Vec3) -> UnitQuaternion<f64> {
    let z = normal.normalize();
    let mut x = up - z * up.dot(&z);
    if x.norm() < 1e-9 {
        // `up` parallel to the normal; pick any orthogonal axis
        let alt = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        x = alt - z * alt.dot(&z);
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
}
