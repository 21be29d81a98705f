use serde::{Deserialize, Serialize};

use crate::robot::{JointConfig, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Platform {
    Web,
    Vr,
    Mobile,
}

impl Platform {
    pub fn as_str(&self) -> &'static str {
        match self {
            Platform::Web => "WEB",
            Platform::Vr => "VR",
            Platform::Mobile => "MOBILE",
        }
    }
}

impl std::str::FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "WEB" => Ok(Platform::Web),
            "VR" => Ok(Platform::Vr),
            "MOBILE" => Ok(Platform::Mobile),
            other => Err(format!("unknown platform '{other}'")),
        }
    }
}

impl std::fmt::Display for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectKind {
    SceneObject,
    PhantomRobot,
}

/// Kind-dependent payload: scene objects carry a pose, phantoms a joint configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ObjectState {
    SceneObject { pose: Pose },
    PhantomRobot { joints: JointConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareableObject {
    pub object_id: String,
    #[serde(flatten)]
    pub state: ObjectState,
    pub owner: Option<String>,
    pub world_seq: u64,
}

impl ShareableObject {
    pub fn scene(object_id: impl Into<String>, pose: Pose) -> Self {
        Self {
            object_id: object_id.into(),
            state: ObjectState::SceneObject { pose },
            owner: None,
            world_seq: 0,
        }
    }

    pub fn phantom(object_id: impl Into<String>, joints: JointConfig) -> Self {
        Self {
            object_id: object_id.into(),
            state: ObjectState::PhantomRobot { joints },
            owner: None,
            world_seq: 0,
        }
    }

    pub fn kind(&self) -> ObjectKind {
        match self.state {
            ObjectState::SceneObject { .. } => ObjectKind::SceneObject,
            ObjectState::PhantomRobot { .. } => ObjectKind::PhantomRobot,
        }
    }

    pub fn pose(&self) -> Option<&Pose> {
        match &self.state {
            ObjectState::SceneObject { pose } => Some(pose),
            ObjectState::PhantomRobot { .. } => None,
        }
    }

    pub fn joints(&self) -> Option<&JointConfig> {
        match &self.state {
            ObjectState::PhantomRobot { joints } => Some(joints),
            ObjectState::SceneObject { .. } => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match &self.state {
            ObjectState::SceneObject { pose } => pose.is_finite(),
            ObjectState::PhantomRobot { joints } => joints.is_finite(),
        }
    }
}

/// Phantom object id for a user.
pub fn phantom_id(user_id: &str) -> String {
    format!("phantom:{user_id}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectedUser {
    pub user_id: String,
    pub platform: Platform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct WorldSnapshot {
    pub world_seq: u64,
    /// Sorted by object id.
    pub objects: Vec<ShareableObject>,
    /// Sorted by user id.
    pub connected_users: Vec<ConnectedUser>,
}

impl WorldSnapshot {
    pub fn object(&self, object_id: &str) -> Option<&ShareableObject> {
        self.objects.iter().find(|o| o.object_id == object_id)
    }

    pub fn object_mut(&mut self, object_id: &str) -> Option<&mut ShareableObject> {
        self.objects.iter_mut().find(|o| o.object_id == object_id)
    }

    /// Every object version is at most the snapshot version.
    pub fn is_consistent(&self) -> bool {
        self.objects.iter().all(|o| o.world_seq <= self.world_seq)
    }

    /// Canonical JSON text, used for byte-level comparisons.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}
