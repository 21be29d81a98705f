//! Forward and inverse kinematics for a 6R arm described by a DH table.

use nalgebra::{Isometry3, Matrix6, Translation3, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::robot::config::{DhTable, JointLimits};
use crate::robot::types::{JointConfig, Pose, JOINT_COUNT};

/// Combined residual below which a solution counts as fully converged.
const POLISHED: f64 = 1e-10;

/// Damped least-squares parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkParams {
    pub damping: f64,
    pub max_iterations: usize,
    pub step_clamp: f64,
    pub position_tolerance: f64,
    pub orientation_tolerance: f64,
    /// Extra deterministic starting configurations tried after the caller's seed.
    pub restarts: usize,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 0.01,
            max_iterations: 200,
            step_clamp: 0.2,
            position_tolerance: 1e-6,
            orientation_tolerance: 1e-6,
            restarts: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum IkError {
    #[error("target not normalized: |q| = {0}")]
    BadTarget(f64),
    #[error("target unreachable: best residual {position:.3e} m / {orientation:.3e} rad")]
    Unreachable { position: f64, orientation: f64 },
}

/// Position and orientation error between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub position: f64,
    pub orientation: f64,
}

impl Residual {
    pub fn between(a: &Pose, b: &Pose) -> Self {
        let position = (a.translation() - b.translation()).norm();
        let delta = a.rotation().inverse() * b.rotation();
        let q = delta.quaternion();
        // atan2 keeps precision near zero where acos(w) does not.
        let orientation = 2.0 * q.imag().norm().atan2(q.w.abs());
        Self {
            position,
            orientation,
        }
    }

    fn within(&self, params: &IkParams) -> bool {
        self.position < params.position_tolerance && self.orientation < params.orientation_tolerance
    }

    fn score(&self) -> f64 {
        self.position + self.orientation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    dh: DhTable,
    limits: JointLimits,
}

impl Kinematics {
    pub fn new(dh: DhTable, limits: JointLimits) -> Self {
        Self { dh, limits }
    }

    pub fn dh(&self) -> &DhTable {
        &self.dh
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    fn link(&self, i: usize, theta: f64) -> Isometry3<f64> {
        let (a, d, alpha) = (self.dh.a[i], self.dh.d[i], self.dh.alpha[i]);
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta)
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), alpha);
        Isometry3::from_parts(
            Translation3::new(a * theta.cos(), a * theta.sin(), d),
            rotation,
        )
    }

    /// Base frame followed by the frame after each joint (seven entries).
    pub fn frames(&self, q: &JointConfig) -> [Isometry3<f64>; JOINT_COUNT + 1] {
        let mut frames = [Isometry3::identity(); JOINT_COUNT + 1];
        for i in 0..JOINT_COUNT {
            frames[i + 1] = frames[i] * self.link(i, q.0[i]);
        }
        frames
    }

    pub fn tool_isometry(&self, q: &JointConfig) -> Isometry3<f64> {
        self.frames(q)[JOINT_COUNT]
    }

    pub fn forward(&self, q: &JointConfig) -> Pose {
        let tool = self.tool_isometry(q);
        Pose::from_parts(&tool.translation.vector, &tool.rotation)
    }

    /// Geometric Jacobian in the base frame; rows are (linear, angular).
    pub fn jacobian(&self, q: &JointConfig) -> Matrix6<f64> {
        let frames = self.frames(q);
        let tip = frames[JOINT_COUNT].translation.vector;
        let mut jac = Matrix6::zeros();
        for i in 0..JOINT_COUNT {
            let axis = frames[i].rotation * Vector3::z();
            let origin = frames[i].translation.vector;
            let linear = axis.cross(&(tip - origin));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&linear);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
        }
        jac
    }

    /// Damped least-squares IK. The result is checked by forward kinematics before
    /// it is returned, and wrapped into the joint limits.
    pub fn inverse(&self, target: &Pose, seed: &JointConfig, params: &IkParams) -> Result<JointConfig, IkError> {
        if !target.is_finite() || !target.is_normalized() {
            return Err(IkError::BadTarget(target.quaternion_norm()));
        }
        let mut best = Residual {
            position: f64::INFINITY,
            orientation: f64::INFINITY,
        };
        // A start that converges fully wins at once; one that only crawls into
        // tolerance, as happens near singular poses, is kept as a fallback.
        let mut fallback: Option<(JointConfig, f64)> = None;
        for start in self.starts(seed, params.restarts) {
            match self.solve_from(target, start, params) {
                Ok((q, residual)) => {
                    if residual.score() < POLISHED {
                        return Ok(q);
                    }
                    if fallback.is_none_or(|(_, score)| residual.score() < score) {
                        fallback = Some((q, residual.score()));
                    }
                }
                Err(residual) => {
                    if residual.score() < best.score() {
                        best = residual;
                    }
                }
            }
        }
        if let Some((q, _)) = fallback {
            return Ok(q);
        }
        Err(IkError::Unreachable {
            position: best.position,
            orientation: best.orientation,
        })
    }

    fn starts(&self, seed: &JointConfig, restarts: usize) -> Vec<JointConfig> {
        let mut out = vec![*seed];
        // Fixed RNG seed: identical inputs always explore identical starts.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..restarts {
            let mut q = [0.0; JOINT_COUNT];
            for (i, v) in q.iter_mut().enumerate() {
                *v = rng.random_range(self.limits.lower[i]..=self.limits.upper[i]);
            }
            out.push(JointConfig(q));
        }
        out
    }

    fn pose_error(&self, target: &Isometry3<f64>, q: &JointConfig) -> Vector6<f64> {
        let current = self.tool_isometry(q);
        let dp = target.translation.vector - current.translation.vector;
        let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
        Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
    }

    fn solve_from(&self, target: &Pose, start: JointConfig, params: &IkParams) -> Result<(JointConfig, Residual), Residual> {
        let target_iso = Isometry3::from_parts(
            Translation3::from(target.translation()),
            target.rotation(),
        );
        // Levenberg-Marquardt: the damping shrinks after a step that reduces the
        // error and grows after one that does not, so the solver behaves like
        // damped least squares near singularities and like Gauss-Newton close
        // to the solution.
        let mut lambda = params.damping;
        let mut q = start;
        let mut error = self.pose_error(&target_iso, &q);
        for _ in 0..params.max_iterations {
            if error.norm() < 1e-12 {
                break;
            }
            let jac = self.jacobian(&q);
            let jjt = jac * jac.transpose() + Matrix6::identity() * (lambda * lambda);
            let Some(solved) = jjt.lu().solve(&error) else {
                break;
            };
            let mut dq = jac.transpose() * solved;
            let largest = dq.amax();
            if largest > params.step_clamp {
                dq *= params.step_clamp / largest;
            }
            let mut trial = q;
            for i in 0..JOINT_COUNT {
                trial.0[i] += dq[i];
            }
            let trial = self.wrap_into_limits(trial);
            let trial_error = self.pose_error(&target_iso, &trial);
            if trial_error.norm() < error.norm() {
                q = trial;
                error = trial_error;
                lambda = (lambda * 0.5).max(1e-9);
            } else {
                lambda *= 4.0;
                if lambda > 1e3 {
                    break;
                }
            }
        }
        let q = self.wrap_into_limits(q);
        let residual = Residual::between(&self.forward(&q), target);
        if residual.within(params) && self.limits.contains(&q) {
            Ok((q, residual))
        } else {
            Err(residual)
        }
    }

    /// Shifts each angle by multiples of 2π toward the limit interval.
    fn wrap_into_limits(&self, mut q: JointConfig) -> JointConfig {
        use std::f64::consts::TAU;
        for i in 0..JOINT_COUNT {
            let mut v = q.0[i].rem_euclid(TAU);
            if v > std::f64::consts::PI {
                v -= TAU;
            }
            if v > self.limits.upper[i] && v - TAU >= self.limits.lower[i] {
                v -= TAU;
            } else if v < self.limits.lower[i] && v + TAU <= self.limits.upper[i] {
                v += TAU;
            }
            q.0[i] = v;
        }
        q
    }
}

impl Default for Kinematics {
    fn default() -> Self {
        Self::new(DhTable::default(), JointLimits::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quaternion_stays_normalized() {
        let kin = Kinematics::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = JointConfig(std::array::from_fn(|_| rng.random_range(-3.0..3.0)));
            assert!(kin.forward(&q).is_normalized());
        }
    }

    #[test]
    fn fixed_point_returns_seed() {
        let kin = Kinematics::default();
        let seed = JointConfig([0.1, -0.4, 0.3, 0.2, 0.7, -0.5]);
        let target = kin.forward(&seed);
        let q = kin.inverse(&target, &seed, &IkParams::default()).unwrap();
        assert!(q.max_abs_diff(&seed) < 1e-9);
        let r = Residual::between(&kin.forward(&q), &target);
        assert!(r.position < 1e-9 && r.orientation < 1e-9);
    }

    #[test]
    fn far_target_is_unreachable() {
        let kin = Kinematics::default();
        let target = Pose::from_translation([10.0, 0.0, 0.0]);
        match kin.inverse(&target, &JointConfig::HOME, &IkParams { restarts: 2, ..Default::default() }) {
            Err(IkError::Unreachable { position, .. }) => assert!(position > 9.0),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn unnormalized_target_rejected() {
        let kin = Kinematics::default();
        let target = Pose::new([0.3, 0.0, 0.3], [2.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            kin.inverse(&target, &JointConfig::HOME, &IkParams::default()),
            Err(IkError::BadTarget(_))
        ));
    }
}
