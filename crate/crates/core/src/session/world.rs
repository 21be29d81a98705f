//! Authoritative world state. Every accepted mutation bumps `world_seq` by one
//! and yields the messages that announce it; the server decides delivery.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::robot::{JointConfig, JointLimits};
use crate::session::types::{phantom_id, ConnectedUser, ObjectState, Platform, ShareableObject, WorldSnapshot};
use crate::store::StoreError;
use crate::wire::{Body, ErrorCode, JoinBody, LockDenyBody, LockGrantBody, PhantomUpdateBody, SnapshotBody};

pub type SessionId = String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("user '{0}' is already connected")]
    DuplicateUser(String),
    #[error("invalid user id")]
    InvalidUser,
    #[error("unknown or stale session '{0}'")]
    UnknownSession(String),
    #[error("joint {joint} outside its limits")]
    JointLimit { joint: usize },
    #[error("unknown object '{0}'")]
    UnknownObject(String),
    #[error("object '{object_id}' is not held by the requester")]
    Ownership { object_id: String, owner: Option<String> },
    #[error("robot server unreachable: {0}")]
    Delivery(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("restore failed at record {record}: {reason}")]
    Restore { record: usize, reason: String },
}

impl SessionError {
    pub fn code(&self) -> ErrorCode {
        match self {
            SessionError::DuplicateUser(_) => ErrorCode::DuplicateUser,
            SessionError::InvalidUser | SessionError::Validation(_) => ErrorCode::Validation,
            SessionError::UnknownSession(_) => ErrorCode::Session,
            SessionError::JointLimit { .. } => ErrorCode::JointLimit,
            SessionError::UnknownObject(_) => ErrorCode::UnknownObject,
            SessionError::Ownership { .. } => ErrorCode::Ownership,
            SessionError::Delivery(_) => ErrorCode::Delivery,
            SessionError::Store(_) | SessionError::Restore { .. } => ErrorCode::Protocol,
        }
    }

    pub fn joint(&self) -> Option<usize> {
        match self {
            SessionError::JointLimit { joint } => Some(*joint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSession {
    pub user_id: String,
    pub platform: Platform,
    pub session_id: SessionId,
    pub phantom: String,
    pub last_acked_world_seq: u64,
}

/// Who receives a message produced by an operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The session that performed the operation.
    Actor,
    /// Every other connected session.
    Others,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub target: Target,
    pub body: Body,
}

impl Effect {
    fn actor(body: Body) -> Self {
        Self {
            target: Target::Actor,
            body,
        }
    }

    fn others(body: Body) -> Self {
        Self {
            target: Target::Others,
            body,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockOutcome {
    Granted { world_seq: u64 },
    Denied { owner: Option<String> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldHeader {
    world_seq: u64,
    connected_users: Vec<ConnectedUser>,
}

#[derive(Debug, Clone)]
pub struct World {
    world_seq: u64,
    objects: BTreeMap<String, ShareableObject>,
    sessions: BTreeMap<SessionId, UserSession>,
    users: BTreeMap<String, SessionId>,
    next_session: u64,
    limits: JointLimits,
}

impl World {
    pub fn new(initial: Vec<ShareableObject>, limits: JointLimits) -> Self {
        Self {
            world_seq: 0,
            objects: initial.into_iter().map(|o| (o.object_id.clone(), o)).collect(),
            sessions: BTreeMap::new(),
            users: BTreeMap::new(),
            next_session: 1,
            limits,
        }
    }

    /// Starts from a persisted snapshot. Phantoms and locks of users listed there
    /// stay in place until those users join again.
    pub fn from_snapshot(snapshot: &WorldSnapshot, limits: JointLimits) -> Self {
        let mut world = Self::new(snapshot.objects.clone(), limits);
        world.world_seq = snapshot.world_seq;
        world
    }

    pub fn world_seq(&self) -> u64 {
        self.world_seq
    }

    pub fn limits(&self) -> &JointLimits {
        &self.limits
    }

    pub fn session(&self, session_id: &str) -> Result<&UserSession, SessionError> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &UserSession> {
        self.sessions.values()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            world_seq: self.world_seq,
            objects: self.objects.values().cloned().collect(),
            connected_users: self
                .sessions
                .values()
                .map(|s| {
                    let user = ConnectedUser {
                        user_id: s.user_id.clone(),
                        platform: s.platform,
                    };
                    (s.user_id.clone(), user)
                })
                .collect::<BTreeMap<_, _>>().into_values()
                .collect(),
        }
    }

    fn bump(&mut self) -> u64 {
        self.world_seq += 1;
        let seq = self.world_seq;
        for s in self.sessions.values_mut() {
            s.last_acked_world_seq = seq;
        }
        seq
    }

    fn check_limits(&self, q: &JointConfig) -> Result<(), SessionError> {
        match self.limits.first_violation(q) {
            Some(joint) => Err(SessionError::JointLimit { joint }),
            None => Ok(()),
        }
    }

    pub fn join(
        &mut self,
        user_id: &str,
        platform: Platform,
        robot_q: JointConfig,
    ) -> Result<(SessionId, WorldSnapshot, Vec<Effect>), SessionError> {
        if user_id.is_empty() || user_id.chars().any(char::is_control) {
            return Err(SessionError::InvalidUser);
        }
        if self.users.contains_key(user_id) {
            return Err(SessionError::DuplicateUser(user_id.to_string()));
        }
        let session_id = format!("sess-{:06}", self.next_session);
        self.next_session += 1;
        let phantom = phantom_id(user_id);
        self.sessions.insert(
            session_id.clone(),
            UserSession {
                user_id: user_id.to_string(),
                platform,
                session_id: session_id.clone(),
                phantom: phantom.clone(),
                last_acked_world_seq: 0,
            },
        );
        self.users.insert(user_id.to_string(), session_id.clone());
        let seq = self.bump();
        let mut object = ShareableObject::phantom(phantom.clone(), robot_q);
        object.world_seq = seq;
        // A rejoining user reclaims locks left over from a restored world.
        object.owner = self.objects.get(&phantom).and_then(|o| o.owner.clone());
        self.objects.insert(phantom, object.clone());
        let snapshot = self.snapshot();
        let effects = vec![
            Effect::actor(Body::Snapshot(SnapshotBody {
                session_id: Some(session_id.clone()),
                snapshot: Some(snapshot.clone()),
            })),
            Effect::others(Body::Join(JoinBody {
                user_id: user_id.to_string(),
                platform,
                phantom: Some(object),
                world_seq: Some(seq),
                departed: false,
            })),
        ];
        Ok((session_id, snapshot, effects))
    }

    pub fn phantom_config(&self, session_id: &str) -> Result<(String, JointConfig), SessionError> {
        let session = self.session(session_id)?;
        let joints = self
            .objects
            .get(&session.phantom)
            .and_then(ShareableObject::joints)
            .copied()
            .ok_or_else(|| SessionError::UnknownObject(session.phantom.clone()))?;
        Ok((session.user_id.clone(), joints))
    }

    pub fn update_phantom(&mut self, session_id: &str, q: JointConfig) -> Result<(u64, Vec<Effect>), SessionError> {
        let phantom = self.session(session_id)?.phantom.clone();
        self.check_limits(&q)?;
        let seq = self.bump();
        let object = self
            .objects
            .get_mut(&phantom)
            .ok_or_else(|| SessionError::UnknownObject(phantom.clone()))?;
        object.state = ObjectState::PhantomRobot { joints: q };
        object.world_seq = seq;
        let body = Body::PhantomUpdate(PhantomUpdateBody {
            object_id: phantom,
            joints: q,
            world_seq: seq,
        });
        Ok((seq, vec![Effect::actor(body.clone()), Effect::others(body)]))
    }

    pub fn acquire_lock(&mut self, session_id: &str, object_id: &str) -> Result<(LockOutcome, Vec<Effect>), SessionError> {
        let user = self.session(session_id)?.user_id.clone();
        let object = self
            .objects
            .get(object_id)
            .ok_or_else(|| SessionError::UnknownObject(object_id.to_string()))?;
        match &object.owner {
            Some(owner) if *owner == user => {
                let world_seq = object.world_seq;
                let body = Body::LockGrant(LockGrantBody {
                    object_id: object_id.to_string(),
                    owner: Some(user),
                    world_seq,
                });
                Ok((LockOutcome::Granted { world_seq }, vec![Effect::actor(body)]))
            }
            Some(owner) => {
                let owner = Some(owner.clone());
                let body = Body::LockDeny(LockDenyBody {
                    object_id: object_id.to_string(),
                    owner: owner.clone(),
                });
                Ok((LockOutcome::Denied { owner }, vec![Effect::actor(body)]))
            }
            None => {
                let seq = self.bump();
                let object = self.objects.get_mut(object_id).expect("checked above");
                object.owner = Some(user.clone());
                object.world_seq = seq;
                let body = Body::LockGrant(LockGrantBody {
                    object_id: object_id.to_string(),
                    owner: Some(user),
                    world_seq: seq,
                });
                Ok((
                    LockOutcome::Granted { world_seq: seq },
                    vec![Effect::actor(body.clone()), Effect::others(body)],
                ))
            }
        }
    }

    pub fn release_lock(&mut self, session_id: &str, object_id: &str) -> Result<(u64, Vec<Effect>), SessionError> {
        let user = self.session(session_id)?.user_id.clone();
        let object = self
            .objects
            .get(object_id)
            .ok_or_else(|| SessionError::UnknownObject(object_id.to_string()))?;
        if object.owner.as_deref() != Some(user.as_str()) {
            return Err(SessionError::Ownership {
                object_id: object_id.to_string(),
                owner: object.owner.clone(),
            });
        }
        let seq = self.release(object_id);
        let body = Body::LockGrant(LockGrantBody {
            object_id: object_id.to_string(),
            owner: None,
            world_seq: seq,
        });
        Ok((seq, vec![Effect::actor(body.clone()), Effect::others(body)]))
    }

    fn release(&mut self, object_id: &str) -> u64 {
        let seq = self.bump();
        let object = self.objects.get_mut(object_id).expect("caller checked");
        object.owner = None;
        object.world_seq = seq;
        seq
    }

    /// Drops a session: its locks are released and its phantom removed, each
    /// as its own versioned mutation announced to the remaining users.
    pub fn disconnect(&mut self, session_id: &str) -> Result<Vec<Effect>, SessionError> {
        let session = self
            .sessions
            .remove(session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))?;
        self.users.remove(&session.user_id);
        let owned: Vec<String> = self
            .objects
            .values()
            .filter(|o| o.owner.as_deref() == Some(session.user_id.as_str()) && o.object_id != session.phantom)
            .map(|o| o.object_id.clone())
            .collect();
        let mut effects = Vec::new();
        for object_id in owned {
            let seq = self.release(&object_id);
            effects.push(Effect::others(Body::LockGrant(LockGrantBody {
                object_id,
                owner: None,
                world_seq: seq,
            })));
        }
        self.objects.remove(&session.phantom);
        let seq = self.bump();
        effects.push(Effect::others(Body::Join(JoinBody {
            user_id: session.user_id,
            platform: session.platform,
            phantom: None,
            world_seq: Some(seq),
            departed: true,
        })));
        Ok(effects)
    }

    /// Records for persistence: a header, then one record per object.
    pub fn to_records(&self) -> Vec<String> {
        snapshot_to_records(&self.snapshot())
    }
}

pub fn snapshot_to_records(snapshot: &WorldSnapshot) -> Vec<String> {
    let mut out = Vec::with_capacity(snapshot.objects.len() + 1);
    out.push(
        serde_json::to_string(&WorldHeader {
            world_seq: snapshot.world_seq,
            connected_users: snapshot.connected_users.clone(),
        })
        .expect("header serializes"),
    );
    out.extend(
        snapshot
            .objects
            .iter()
            .map(|o| serde_json::to_string(o).expect("object serializes")),
    );
    out
}

pub fn snapshot_from_records(records: &[String]) -> Result<WorldSnapshot, SessionError> {
    let header_text = records.first().ok_or(SessionError::Restore {
        record: 0,
        reason: "missing world header".into(),
    })?;
    let header: WorldHeader = serde_json::from_str(header_text).map_err(|e| SessionError::Restore {
        record: 0,
        reason: e.to_string(),
    })?;
    let mut objects: Vec<ShareableObject> = Vec::with_capacity(records.len() - 1);
    for (i, text) in records.iter().enumerate().skip(1) {
        let object: ShareableObject = serde_json::from_str(text).map_err(|e| SessionError::Restore {
            record: i,
            reason: e.to_string(),
        })?;
        if !object.is_finite() || object.world_seq > header.world_seq {
            return Err(SessionError::Restore {
                record: i,
                reason: format!("object '{}' is inconsistent with the header", object.object_id),
            });
        }
        if objects.last().is_some_and(|prev| prev.object_id >= object.object_id) {
            return Err(SessionError::Restore {
                record: i,
                reason: "objects out of order or duplicated".into(),
            });
        }
        objects.push(object);
    }
    Ok(WorldSnapshot {
        world_seq: header.world_seq,
        objects,
        connected_users: header.connected_users,
    })
}
