//! Rate-limited execution of joint-space commands.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::robot::config::RobotConfig;
use crate::robot::kinematics::Kinematics;
use crate::robot::types::{JointConfig, Pose, JOINT_COUNT};

/// Joints closer than this to their target count as arrived.
pub const ARRIVAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Executing {
    pub command_id: u64,
    pub target: JointConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotState {
    pub q: JointConfig,
    pub executing: Option<Executing>,
    pub tool_pose: Pose,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MotionError {
    #[error("robot busy executing command {0}")]
    Busy(u64),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("waypoint {waypoint}: joint {joint} outside limits")]
    JointLimit { waypoint: usize, joint: usize },
    #[error("step dt {0} outside (0, 0.1] s")]
    InvalidDt(f64),
}

/// Emitted once per command when its last waypoint is reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub command_id: u64,
    pub q: JointConfig,
}

#[derive(Debug, Clone)]
pub struct RobotSim {
    config: RobotConfig,
    kinematics: Kinematics,
    state: RobotState,
    pending: VecDeque<JointConfig>,
}

impl RobotSim {
    pub fn new(config: RobotConfig) -> Self {
        Self::with_start(config, JointConfig::HOME)
    }

    pub fn with_start(config: RobotConfig, q: JointConfig) -> Self {
        let kinematics = Kinematics::new(config.dh.clone(), config.limits.clone());
        let tool_pose = kinematics.forward(&q);
        Self {
            config,
            kinematics,
            state: RobotState {
                q,
                executing: None,
                tool_pose,
            },
            pending: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &RobotConfig {
        &self.config
    }

    pub fn kinematics(&self) -> &Kinematics {
        &self.kinematics
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn is_idle(&self) -> bool {
        self.state.executing.is_none()
    }

    /// Validates and starts a waypoint sequence. Returns a completion immediately
    /// when the robot already sits on every waypoint.
    pub fn execute_trajectory(
        &mut self,
        command_id: u64,
        waypoints: &[JointConfig],
    ) -> Result<Option<Completion>, MotionError> {
        if let Some(exec) = &self.state.executing {
            return Err(MotionError::Busy(exec.command_id));
        }
        if waypoints.is_empty() {
            return Err(MotionError::EmptyTrajectory);
        }
        for (w, q) in waypoints.iter().enumerate() {
            if let Some(joint) = self.config.limits.first_violation(q) {
                return Err(MotionError::JointLimit { waypoint: w, joint });
            }
        }
        self.pending = waypoints.iter().copied().collect();
        let target = self.pending.pop_front().expect("non-empty");
        self.state.executing = Some(Executing { command_id, target });
        Ok(self.advance_arrived())
    }

    /// Moves each joint toward the active waypoint by at most `v_max * dt`.
    pub fn step(&mut self, dt: f64) -> Result<Option<Completion>, MotionError> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(MotionError::InvalidDt(dt));
        }
        let Some(exec) = &self.state.executing else {
            return Ok(None);
        };
        let max_delta = self.config.v_max * dt;
        let target = exec.target;
        for i in 0..JOINT_COUNT {
            let remaining = target.0[i] - self.state.q.0[i];
            self.state.q.0[i] = if remaining.abs() <= max_delta {
                target.0[i]
            } else {
                self.state.q.0[i] + max_delta.copysign(remaining)
            };
        }
        self.state.tool_pose = self.kinematics.forward(&self.state.q);
        Ok(self.advance_arrived())
    }

    /// Pops reached waypoints; clears the command after the last one.
    fn advance_arrived(&mut self) -> Option<Completion> {
        loop {
            let exec = self.state.executing.as_mut()?;
            if self.state.q.max_abs_diff(&exec.target) > ARRIVAL_TOLERANCE {
                return None;
            }
            match self.pending.pop_front() {
                Some(next) => exec.target = next,
                None => {
                    let command_id = exec.command_id;
                    self.state.executing = None;
                    return Some(Completion {
                        command_id,
                        q: self.state.q,
                    });
                }
            }
        }
    }
}
