//! Simulated 6-DoF arm: kinematics, virtual fixtures, stepped motion and the
//! robot server that executes validated commands.

pub mod config;
pub mod fixtures;
pub mod kinematics;
pub mod server;
pub mod sim;
mod types;

pub use config::{DhTable, FixtureRadii, JointLimits, RobotConfig};
pub use fixtures::{apply_assistance, evaluate_fixtures, VirtualFixture};
pub use kinematics::{IkError, IkParams, Kinematics, Residual};
pub use server::{
    CommandOrigin, CommandReceipt, CommandSource, ExecutedCommand, IngressRecord, ReceiptStatus, RobotNotice,
    RobotServer,
};
pub use sim::{Completion, Executing, MotionError, RobotSim, RobotState};
pub use types::{JointConfig, Pose, JOINT_COUNT};
