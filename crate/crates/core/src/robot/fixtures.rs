//! Proximity-triggered virtual fixtures and the velocity blend they apply.

use serde::{Deserialize, Serialize};

use crate::robot::config::FixtureRadii;
use crate::robot::types::Pose;
use crate::session::ShareableObject;

/// Distances below this are treated as "at the center": the attraction vanishes.
pub const CENTER_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VirtualFixture {
    pub object_id: String,
    pub center: [f64; 3],
    pub r_on: f64,
    pub r_off: f64,
    pub active: bool,
}

impl VirtualFixture {
    pub fn distance_from(&self, peg: &Pose) -> f64 {
        peg.distance_to(&self.center)
    }
}

/// Recomputes fixture activation for every scene object.
///
/// A fixture switches on below `r_on`, off above `r_off`, and keeps its prior state
/// inside the band. Radii of an existing fixture are kept; new fixtures take `defaults`.
/// Phantom robots are not fixture targets and are skipped.
pub fn evaluate_fixtures(
    peg: &Pose,
    objects: &[ShareableObject],
    prior: &[VirtualFixture],
    defaults: FixtureRadii,
) -> Vec<VirtualFixture> {
    objects
        .iter()
        .filter_map(|object| {
            let pose = object.pose()?;
            let previous = prior.iter().find(|f| f.object_id == object.object_id);
            let (r_on, r_off, was_active) = match previous {
                Some(f) => (f.r_on, f.r_off, f.active),
                None => (defaults.r_on, defaults.r_off, false),
            };
            let d = peg.distance_to(&pose.position);
            let active = if d < r_on {
                true
            } else if d > r_off {
                false
            } else {
                was_active
            };
            Some(VirtualFixture {
                object_id: object.object_id.clone(),
                center: pose.position,
                r_on,
                r_off,
                active,
            })
        })
        .collect()
}

/// Blends the commanded velocity toward the nearest active fixture.
///
/// `out = (1 - a) * cmd + a * attract`, with `a = clamp(1 - d / r_on, 0, 1)` and
/// `attract` pointing at the fixture center with the magnitude of `cmd`.
/// With no active fixture the input is returned untouched.
pub fn apply_assistance(cmd: [f64; 3], peg: &Pose, fixtures: &[VirtualFixture]) -> [f64; 3] {
    let nearest = fixtures
        .iter()
        .filter(|f| f.active)
        .map(|f| (f, f.distance_from(peg)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((fixture, d)) = nearest else {
        return cmd;
    };
    let alpha = (1.0 - d / fixture.r_on).clamp(0.0, 1.0);
    let speed = (cmd[0] * cmd[0] + cmd[1] * cmd[1] + cmd[2] * cmd[2]).sqrt();
    let attract = if d < CENTER_EPSILON {
        [0.0; 3]
    } else {
        std::array::from_fn(|i| (fixture.center[i] - peg.position[i]) / d * speed)
    };
    std::array::from_fn(|i| (1.0 - alpha) * cmd[i] + alpha * attract[i])
}
