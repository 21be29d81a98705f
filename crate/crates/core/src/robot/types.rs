use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub const JOINT_COUNT: usize = 6;

/// Six joint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct JointConfig(pub [f64; JOINT_COUNT]);

impl JointConfig {
    pub const HOME: JointConfig = JointConfig([0.0; JOINT_COUNT]);

    pub fn new(q: [f64; JOINT_COUNT]) -> Self {
        Self(q)
    }

    pub fn angles(&self) -> &[f64; JOINT_COUNT] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Largest absolute per-joint difference.
    pub fn max_abs_diff(&self, other: &JointConfig) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Cartesian pose: position in meters and a unit quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        position: [0.0; 3],
        orientation: [1.0, 0.0, 0.0, 0.0],
    };

    pub fn new(position: [f64; 3], orientation: [f64; 4]) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_translation(position: [f64; 3]) -> Self {
        Self {
            position,
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }

    pub fn from_parts(position: &Vector3<f64>, rotation: &UnitQuaternion<f64>) -> Self {
        let q = rotation.quaternion();
        // q and -q encode the same rotation; pin the sign so poses compare stably.
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        Self {
            position: [position.x, position.y, position.z],
            orientation: [sign * q.w, sign * q.i, sign * q.j, sign * q.k],
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.position[0], self.position[1], self.position[2])
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.quaternion_norm() - 1.0).abs() <= 1e-9
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.orientation.iter()).all(|v| v.is_finite())
    }

    pub fn distance_to(&self, point: &[f64; 3]) -> f64 {
        let dx = self.position[0] - point[0];
        let dy = self.position[1] - point[1];
        let dz = self.position[2] - point[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}
