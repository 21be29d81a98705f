//! The robot server: owns the simulated arm, accepts commands that carry a
//! validation origin, and keeps the ingress and execution logs used for audits.

use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::robot::config::RobotConfig;
use crate::robot::sim::{Completion, MotionError, RobotSim, RobotState};
use crate::robot::types::JointConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandSource {
    Validate,
    Trajectory,
}

/// Where a robot command came from. `request_id` is the session server's
/// validation-log id, so every motion can be traced back to one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandOrigin {
    pub source: CommandSource,
    pub user_id: String,
    pub request_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReceiptStatus {
    Accepted,
    Busy,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandReceipt {
    pub status: ReceiptStatus,
    pub command_id: Option<u64>,
    /// Command currently executing, for BUSY receipts.
    pub busy_with: Option<u64>,
    pub detail: Option<String>,
}

impl CommandReceipt {
    pub fn accepted(command_id: u64) -> Self {
        Self {
            status: ReceiptStatus::Accepted,
            command_id: Some(command_id),
            busy_with: None,
            detail: None,
        }
    }

    pub fn busy(executing: u64) -> Self {
        Self {
            status: ReceiptStatus::Busy,
            command_id: None,
            busy_with: Some(executing),
            detail: None,
        }
    }

    pub fn rejected(detail: impl Into<String>) -> Self {
        Self {
            status: ReceiptStatus::Rejected,
            command_id: None,
            busy_with: None,
            detail: Some(detail.into()),
        }
    }

    pub fn is_accepted(&self) -> bool {
        self.status == ReceiptStatus::Accepted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngressRecord {
    pub origin: CommandOrigin,
    pub waypoints: Vec<JointConfig>,
    pub receipt: CommandReceipt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedCommand {
    pub command_id: u64,
    pub origin: CommandOrigin,
    pub waypoints: Vec<JointConfig>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RobotNotice {
    Completed { command_id: u64, state: RobotState },
}

#[derive(Debug)]
struct Inner {
    sim: RobotSim,
    next_command_id: u64,
    ingress: Vec<IngressRecord>,
    executed: Vec<ExecutedCommand>,
}

#[derive(Debug)]
pub struct RobotServer {
    inner: Mutex<Inner>,
    trajectory_enabled: AtomicBool,
    listeners: Mutex<Vec<Sender<RobotNotice>>>,
}

impl RobotServer {
    pub fn new(config: RobotConfig) -> Self {
        Self {
            inner: Mutex::new(Inner {
                sim: RobotSim::new(config),
                next_command_id: 1,
                ingress: Vec::new(),
                executed: Vec::new(),
            }),
            trajectory_enabled: AtomicBool::new(false),
            listeners: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> RobotConfig {
        self.inner.lock().sim.config().clone()
    }

    pub fn state(&self) -> RobotState {
        self.inner.lock().sim.state().clone()
    }

    pub fn is_idle(&self) -> bool {
        self.inner.lock().sim.is_idle()
    }

    /// Multi-waypoint commands require the trajectory module.
    pub fn set_trajectory_enabled(&self, enabled: bool) {
        self.trajectory_enabled.store(enabled, Ordering::SeqCst);
    }

    pub fn trajectory_enabled(&self) -> bool {
        self.trajectory_enabled.load(Ordering::SeqCst)
    }

    pub fn notices(&self) -> Receiver<RobotNotice> {
        let (tx, rx) = unbounded();
        self.listeners.lock().push(tx);
        rx
    }

    fn notify(&self, notice: RobotNotice) {
        self.listeners.lock().retain(|tx| tx.send(notice.clone()).is_ok());
    }

    /// Accepts a command; BUSY commands are not queued.
    pub fn submit(&self, origin: CommandOrigin, waypoints: Vec<JointConfig>) -> CommandReceipt {
        let mut inner = self.inner.lock();
        let receipt = if origin.source == CommandSource::Trajectory && !self.trajectory_enabled() {
            CommandReceipt::rejected("trajectory module not loaded")
        } else if origin.source == CommandSource::Validate && waypoints.len() != 1 {
            CommandReceipt::rejected("validation carries exactly one configuration")
        } else {
            let command_id = inner.next_command_id;
            match inner.sim.execute_trajectory(command_id, &waypoints) {
                Ok(done) => {
                    inner.next_command_id += 1;
                    inner.executed.push(ExecutedCommand {
                        command_id,
                        origin: origin.clone(),
                        waypoints: waypoints.clone(),
                        completed: done.is_some(),
                    });
                    if let Some(done) = done {
                        let state = inner.sim.state().clone();
                        self.notify(RobotNotice::Completed {
                            command_id: done.command_id,
                            state,
                        });
                    }
                    CommandReceipt::accepted(command_id)
                }
                Err(MotionError::Busy(current)) => CommandReceipt::busy(current),
                Err(e) => CommandReceipt::rejected(e.to_string()),
            }
        };
        inner.ingress.push(IngressRecord {
            origin,
            waypoints,
            receipt: receipt.clone(),
        });
        receipt
    }

    /// Advances the simulation by one tick.
    pub fn tick(&self, dt: f64) -> Result<Option<Completion>, MotionError> {
        let mut inner = self.inner.lock();
        let done = inner.sim.step(dt)?;
        if let Some(done) = &done {
            if let Some(rec) = inner.executed.iter_mut().rev().find(|c| c.command_id == done.command_id) {
                rec.completed = true;
            }
            let state = inner.sim.state().clone();
            self.notify(RobotNotice::Completed {
                command_id: done.command_id,
                state,
            });
        }
        Ok(done)
    }

    pub fn ingress_log(&self) -> Vec<IngressRecord> {
        self.inner.lock().ingress.clone()
    }

    pub fn executed_log(&self) -> Vec<ExecutedCommand> {
        self.inner.lock().executed.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origin(source: CommandSource, id: u64) -> CommandOrigin {
        CommandOrigin {
            source,
            user_id: "u".into(),
            request_id: id,
        }
    }

    #[test]
    fn trajectory_needs_module() {
        let robot = RobotServer::new(RobotConfig::default());
        let wp = vec![JointConfig([0.1; 6]), JointConfig([0.2; 6])];
        let r = robot.submit(origin(CommandSource::Trajectory, 1), wp.clone());
        assert_eq!(r.status, ReceiptStatus::Rejected);
        robot.set_trajectory_enabled(true);
        assert!(robot.submit(origin(CommandSource::Trajectory, 2), wp).is_accepted());
        assert_eq!(robot.executed_log().len(), 1);
        assert_eq!(robot.ingress_log().len(), 2);
    }

    #[test]
    fn busy_is_not_queued() {
        let robot = RobotServer::new(RobotConfig::default());
        let first = robot.submit(origin(CommandSource::Validate, 1), vec![JointConfig([0.3; 6])]);
        let second = robot.submit(origin(CommandSource::Validate, 2), vec![JointConfig([0.3; 6])]);
        assert_eq!(second, CommandReceipt::busy(first.command_id.unwrap()));
        assert_eq!(robot.executed_log().len(), 1);
    }

    #[test]
    fn completion_is_notified_once() {
        let robot = RobotServer::new(RobotConfig::default());
        let rx = robot.notices();
        robot.submit(origin(CommandSource::Validate, 1), vec![JointConfig([0.01; 6])]);
        for _ in 0..10 {
            robot.tick(0.01).unwrap();
        }
        assert_eq!(rx.try_iter().count(), 1);
        assert!(robot.executed_log()[0].completed);
    }
}
