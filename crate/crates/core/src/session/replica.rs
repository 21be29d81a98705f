//! Client-side mirror of the shared world, rebuilt from server messages.

use std::collections::BTreeMap;

use crate::session::types::{phantom_id, ConnectedUser, ObjectState, WorldSnapshot};
use crate::wire::{Body, Envelope};

/// Applies SNAPSHOT, JOIN, PHANTOM_UPDATE and LOCK_GRANT messages to a local
/// copy of the world and keeps a per-object log of the versions observed.
#[derive(Debug, Clone, Default)]
pub struct Replica {
    snapshot: Option<WorldSnapshot>,
    per_object: BTreeMap<String, Vec<u64>>,
    /// Server envelope seqs that did not follow their predecessor by one.
    gaps: Vec<(u64, u64)>,
    last_server_seq: Option<u64>,
    received: usize,
}

impl Replica {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Option<&WorldSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn world_seq(&self) -> u64 {
        self.snapshot.as_ref().map_or(0, |s| s.world_seq)
    }

    /// Versions observed per object, in arrival order.
    pub fn object_log(&self) -> &BTreeMap<String, Vec<u64>> {
        &self.per_object
    }

    /// `(previous, next)` pairs where the server's envelope seq skipped.
    pub fn seq_gaps(&self) -> &[(u64, u64)] {
        &self.gaps
    }

    pub fn received(&self) -> usize {
        self.received
    }

    /// Objects whose observed versions are not strictly increasing.
    pub fn ordering_violations(&self) -> Vec<String> {
        self.per_object
            .iter()
            .filter(|(_, seqs)| seqs.windows(2).any(|w| w[1] <= w[0]))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn apply(&mut self, env: &Envelope) {
        self.received += 1;
        if let Some(prev) = self.last_server_seq {
            if env.seq != prev + 1 {
                self.gaps.push((prev, env.seq));
            }
        }
        self.last_server_seq = Some(env.seq);
        self.apply_body(&env.body);
    }

    fn note(&mut self, object_id: &str, world_seq: u64) {
        self.per_object.entry(object_id.to_string()).or_default().push(world_seq);
        if let Some(s) = self.snapshot.as_mut() {
            s.world_seq = s.world_seq.max(world_seq);
        }
    }

    fn apply_body(&mut self, body: &Body) {
        match body {
            Body::Snapshot(b) => {
                if let Some(snap) = &b.snapshot {
                    self.snapshot = Some(snap.clone());
                }
            }
            Body::PhantomUpdate(b) => {
                let Some(s) = self.snapshot.as_mut() else { return };
                let Some(o) = s.object_mut(&b.object_id) else { return };
                if b.world_seq > o.world_seq {
                    o.state = ObjectState::PhantomRobot { joints: b.joints };
                    o.world_seq = b.world_seq;
                }
                // Recorded even when stale so ordering checks can see it.
                self.note(&b.object_id, b.world_seq);
            }
            Body::LockGrant(b) => {
                let Some(s) = self.snapshot.as_mut() else { return };
                let Some(o) = s.object_mut(&b.object_id) else { return };
                // A reentrant grant repeats the current version and changes nothing.
                if b.world_seq == o.world_seq && b.owner == o.owner {
                    return;
                }
                if b.world_seq > o.world_seq {
                    o.owner = b.owner.clone();
                    o.world_seq = b.world_seq;
                }
                self.note(&b.object_id, b.world_seq);
            }
            Body::Join(b) => {
                let Some(s) = self.snapshot.as_mut() else { return };
                let seq = b.world_seq.unwrap_or(s.world_seq);
                let pid = phantom_id(&b.user_id);
                s.objects.retain(|o| o.object_id != pid);
                s.connected_users.retain(|u| u.user_id != b.user_id);
                if !b.departed {
                    if let Some(phantom) = &b.phantom {
                        s.objects.push(phantom.clone());
                        s.objects.sort_by(|a, b| a.object_id.cmp(&b.object_id));
                    }
                    s.connected_users.push(ConnectedUser {
                        user_id: b.user_id.clone(),
                        platform: b.platform,
                    });
                    s.connected_users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
                }
                self.note(&pid, seq);
            }
            _ => {}
        }
    }
}
