//! Multi-user session server: admission, phantom updates, locks, validation
//! forwarding and persistence of the shared world.

pub mod replica;
pub mod scene;
pub mod server;
mod types;
pub mod world;

pub use replica::Replica;
pub use scene::SceneConfig;
pub use server::{
    audit_command_provenance, forward_robot_notices, restore_world, JoinOutcome, ProvenanceReport, RobotLink,
    SessionConfig, SessionServer, ValidationRecord, SERVER_SENDER,
};
pub use types::{phantom_id, ConnectedUser, ObjectKind, ObjectState, Platform, ShareableObject, WorldSnapshot};
pub use world::{LockOutcome, SessionError, SessionId, UserSession, World};
