//! Message bodies, one record type per message kind.

use serde::{Deserialize, Serialize};

use crate::relay::{DeliveryMode, Frame};
use crate::robot::{CommandOrigin, CommandReceipt, JointConfig, RobotState};
use crate::runtime::{CoreSignal, StateReport};
use crate::session::{Platform, ShareableObject, WorldSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    Join,
    Snapshot,
    PhantomUpdate,
    LockReq,
    LockGrant,
    LockDeny,
    Validate,
    RobotCmd,
    RobotState,
    Frame,
    Subscribe,
    Ping,
    Pong,
    ModuleSignal,
    StateReport,
    Error,
}

impl MsgType {
    pub const ALL: [MsgType; 16] = [
        MsgType::Join,
        MsgType::Snapshot,
        MsgType::PhantomUpdate,
        MsgType::LockReq,
        MsgType::LockGrant,
        MsgType::LockDeny,
        MsgType::Validate,
        MsgType::RobotCmd,
        MsgType::RobotState,
        MsgType::Frame,
        MsgType::Subscribe,
        MsgType::Ping,
        MsgType::Pong,
        MsgType::ModuleSignal,
        MsgType::StateReport,
        MsgType::Error,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MsgType::Join => "JOIN",
            MsgType::Snapshot => "SNAPSHOT",
            MsgType::PhantomUpdate => "PHANTOM_UPDATE",
            MsgType::LockReq => "LOCK_REQ",
            MsgType::LockGrant => "LOCK_GRANT",
            MsgType::LockDeny => "LOCK_DENY",
            MsgType::Validate => "VALIDATE",
            MsgType::RobotCmd => "ROBOT_CMD",
            MsgType::RobotState => "ROBOT_STATE",
            MsgType::Frame => "FRAME",
            MsgType::Subscribe => "SUBSCRIBE",
            MsgType::Ping => "PING",
            MsgType::Pong => "PONG",
            MsgType::ModuleSignal => "MODULE_SIGNAL",
            MsgType::StateReport => "STATE_REPORT",
            MsgType::Error => "ERROR",
        }
    }

    pub fn parse(s: &str) -> Option<MsgType> {
        MsgType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl std::fmt::Display for MsgType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Join request (client to server) and membership notice (server to others).
/// Notices carry the phantom created for the joiner, or `departed` on leave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinBody {
    pub user_id: String,
    pub platform: Platform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<ShareableObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub departed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SnapshotBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<WorldSnapshot>,
}

/// Client requests send `world_seq` 0; acknowledgments and broadcasts carry the
/// authoritative version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomUpdateBody {
    pub object_id: String,
    pub joints: JointConfig,
    pub world_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockReqBody {
    pub object_id: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub release: bool,
}

/// A grant with `owner: None` announces a release.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockGrantBody {
    pub object_id: String,
    pub owner: Option<String>,
    pub world_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LockDenyBody {
    pub object_id: String,
    pub owner: Option<String>,
}

/// Request: empty for the caller's phantom, `waypoints` for a trajectory.
/// Reply: `receipt` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ValidateBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<Vec<JointConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receipt: Option<CommandReceipt>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotCmdBody {
    pub origin: CommandOrigin,
    pub waypoints: Vec<JointConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RobotEvent {
    /// Robot peer announcing itself to the session server.
    Hello,
    Receipt,
    Completed,
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotStateBody {
    pub event: RobotEvent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receipt: Option<CommandReceipt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<RobotState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubscribeRole {
    Source,
    Client,
}

/// Registers a source (`role: SOURCE`) or subscribes a client to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscribeBody {
    pub role: SubscribeRole,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<DeliveryMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unsubscribe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PingBody {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PongBody {
    pub ping_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSignalBody {
    pub module: String,
    pub signal: CoreSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    Protocol,
    DuplicateUser,
    Session,
    JointLimit,
    UnknownObject,
    Ownership,
    Delivery,
    NotFound,
    Conflict,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
    /// Sequence number of the request that caused the error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_seq: Option<u64>,
    /// Offending joint index for limit errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Body {
    Join(JoinBody),
    Snapshot(SnapshotBody),
    PhantomUpdate(PhantomUpdateBody),
    LockReq(LockReqBody),
    LockGrant(LockGrantBody),
    LockDeny(LockDenyBody),
    Validate(ValidateBody),
    RobotCmd(RobotCmdBody),
    RobotState(RobotStateBody),
    Frame(Frame),
    Subscribe(SubscribeBody),
    Ping(PingBody),
    Pong(PongBody),
    ModuleSignal(ModuleSignalBody),
    StateReport(StateReport),
    Error(ErrorBody),
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Join(_) => MsgType::Join,
            Body::Snapshot(_) => MsgType::Snapshot,
            Body::PhantomUpdate(_) => MsgType::PhantomUpdate,
            Body::LockReq(_) => MsgType::LockReq,
            Body::LockGrant(_) => MsgType::LockGrant,
            Body::LockDeny(_) => MsgType::LockDeny,
            Body::Validate(_) => MsgType::Validate,
            Body::RobotCmd(_) => MsgType::RobotCmd,
            Body::RobotState(_) => MsgType::RobotState,
            Body::Frame(_) => MsgType::Frame,
            Body::Subscribe(_) => MsgType::Subscribe,
            Body::Ping(_) => MsgType::Ping,
            Body::Pong(_) => MsgType::Pong,
            Body::ModuleSignal(_) => MsgType::ModuleSignal,
            Body::StateReport(_) => MsgType::StateReport,
            Body::Error(_) => MsgType::Error,
        }
    }

    pub(crate) fn from_value(msg_type: MsgType, value: serde_json::Value) -> Result<Body, serde_json::Error> {
        use serde_json::from_value as v;
        Ok(match msg_type {
            MsgType::Join => Body::Join(v(value)?),
            MsgType::Snapshot => Body::Snapshot(v(value)?),
            MsgType::PhantomUpdate => Body::PhantomUpdate(v(value)?),
            MsgType::LockReq => Body::LockReq(v(value)?),
            MsgType::LockGrant => Body::LockGrant(v(value)?),
            MsgType::LockDeny => Body::LockDeny(v(value)?),
            MsgType::Validate => Body::Validate(v(value)?),
            MsgType::RobotCmd => Body::RobotCmd(v(value)?),
            MsgType::RobotState => Body::RobotState(v(value)?),
            MsgType::Frame => Body::Frame(v(value)?),
            MsgType::Subscribe => Body::Subscribe(v(value)?),
            MsgType::Ping => Body::Ping(v(value)?),
            MsgType::Pong => Body::Pong(v(value)?),
            MsgType::ModuleSignal => Body::ModuleSignal(v(value)?),
            MsgType::StateReport => Body::StateReport(v(value)?),
            MsgType::Error => Body::Error(v(value)?),
        })
    }

    /// Value-level checks JSON cannot express: finite numbers, SAFE degree rule.
    pub(crate) fn check(&self) -> Result<(), String> {
        let finite_joints = |q: &JointConfig, what: &str| {
            if q.is_finite() {
                Ok(())
            } else {
                Err(format!("{what}: non-finite joint angle"))
            }
        };
        let finite_object = |o: &ShareableObject| {
            if o.is_finite() {
                Ok(())
            } else {
                Err(format!("object {}: non-finite pose", o.object_id))
            }
        };
        match self {
            Body::Join(b) => b.phantom.as_ref().map_or(Ok(()), finite_object),
            Body::Snapshot(b) => b
                .snapshot
                .as_ref()
                .map_or(Ok(()), |s| s.objects.iter().try_for_each(finite_object)),
            Body::PhantomUpdate(b) => finite_joints(&b.joints, "joints"),
            Body::Validate(b) => b
                .waypoints
                .iter()
                .flatten()
                .try_for_each(|q| finite_joints(q, "waypoints")),
            Body::RobotCmd(b) => b.waypoints.iter().try_for_each(|q| finite_joints(q, "waypoints")),
            Body::RobotState(b) => match &b.state {
                Some(s) if !s.q.is_finite() || !s.tool_pose.is_finite() => Err("state: non-finite value".into()),
                Some(s) => s
                    .executing
                    .as_ref()
                    .map_or(Ok(()), |e| finite_joints(&e.target, "executing.target")),
                None => Ok(()),
            },
            Body::Subscribe(b) => match b.nominal_rate {
                Some(r) if !r.is_finite() || r < 0.0 => Err("nominal_rate must be finite and non-negative".into()),
                _ => Ok(()),
            },
            Body::ModuleSignal(b) if !b.signal.is_well_formed() => {
                Err("signal: degree must be present exactly for SAFE".into())
            }
            _ => Ok(()),
        }
    }
}
