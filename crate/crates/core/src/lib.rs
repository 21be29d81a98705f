//! Collaborative teleoperation stack: wire protocol, multi-user session
//! server, simulated 6-DoF robot, module runtime, application prototyper and
//! stream relay.

pub mod net;
pub mod prototyper;
pub mod relay;
pub mod robot;
pub mod runtime;
pub mod scenario;
pub mod session;
pub mod store;
pub mod wire;
pub mod xml;

pub use prototyper::{AppSpec, ModuleDescriptor};
pub use robot::{JointConfig, Pose, RobotServer, RobotSim};
pub use runtime::{Core, CoreSignal, LatencySample, StateReport};
pub use session::{SessionServer, ShareableObject, WorldSnapshot};
pub use store::{FileStore, MemoryStore, RecordStore, StoreError};
pub use wire::{Body, Envelope, MsgType, WireError};
