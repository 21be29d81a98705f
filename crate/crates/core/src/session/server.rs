//! Thread-safe session server around [`World`].
//!
//! All mutations run under one lock, and their messages are queued into each
//! session's outbox before the lock is released. That lock order is the total
//! order of `world_seq`, so every session observes updates in version order.
//! Robot commands are dispatched outside the world lock through a separate
//! validation lock; only `validate_phantom` and `request_trajectory` reach it.

use std::collections::HashMap;
use std::sync::Arc;

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::{Mutex, RwLock};

use crate::relay::wall_clock_ms;
use crate::robot::{
    CommandOrigin, CommandReceipt, CommandSource, ExecutedCommand, JointConfig, JointLimits, RobotServer,
};
use crate::runtime::StateReport;
use crate::session::scene::SceneConfig;
use crate::session::types::{Platform, WorldSnapshot};
use crate::session::world::{
    snapshot_from_records, Effect, LockOutcome, SessionError, SessionId, Target, World,
};
use crate::store::RecordStore;
use crate::wire::{Body, Envelope, ErrorBody, RobotEvent, RobotStateBody, SeqCounter, ValidateBody};

pub const SERVER_SENDER: &str = "session-server";

/// The session server's view of the robot server.
pub trait RobotLink: Send + Sync {
    fn submit(&self, origin: CommandOrigin, waypoints: Vec<JointConfig>) -> Result<CommandReceipt, String>;
    /// Latest known joint configuration of the real robot.
    fn current_config(&self) -> Option<JointConfig>;
    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String>;
}

impl RobotLink for RobotServer {
    fn submit(&self, origin: CommandOrigin, waypoints: Vec<JointConfig>) -> Result<CommandReceipt, String> {
        Ok(RobotServer::submit(self, origin, waypoints))
    }

    fn current_config(&self) -> Option<JointConfig> {
        Some(self.state().q)
    }

    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String> {
        RobotServer::set_trajectory_enabled(self, enabled);
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct SessionConfig {
    pub limits: JointLimits,
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub request_id: u64,
    pub user_id: String,
    pub source: CommandSource,
    pub waypoints: Vec<JointConfig>,
    pub outcome: Result<CommandReceipt, String>,
}

pub struct JoinOutcome {
    pub session_id: SessionId,
    pub snapshot: WorldSnapshot,
    pub inbox: Receiver<Envelope>,
}

struct Outbox {
    tx: Sender<Envelope>,
    seq: SeqCounter,
}

impl Outbox {
    fn push(&mut self, body: Body) {
        let env = self.seq.envelope(wall_clock_ms(), body);
        // A closed inbox means the client is gone; its disconnect cleans up.
        let _ = self.tx.send(env);
    }
}

struct ServerState {
    world: World,
    outboxes: HashMap<SessionId, Outbox>,
}

impl ServerState {
    fn deliver(&mut self, actor: Option<&str>, effects: Vec<Effect>) {
        for effect in effects {
            match effect.target {
                Target::Actor => {
                    if let Some(out) = actor.and_then(|a| self.outboxes.get_mut(a)) {
                        out.push(effect.body);
                    }
                }
                Target::Others => {
                    for (sid, out) in self.outboxes.iter_mut() {
                        if Some(sid.as_str()) != actor {
                            out.push(effect.body.clone());
                        }
                    }
                }
            }
        }
    }

    fn broadcast(&mut self, body: Body) {
        for out in self.outboxes.values_mut() {
            out.push(body.clone());
        }
    }
}

#[derive(Default)]
struct Validations {
    next_request: u64,
    log: Vec<ValidationRecord>,
}

pub struct SessionServer {
    state: Mutex<ServerState>,
    robot: RwLock<Option<Arc<dyn RobotLink>>>,
    validations: Mutex<Validations>,
}

impl SessionServer {
    pub fn new(config: SessionConfig) -> Self {
        Self::from_world(World::new(config.scene.objects, config.limits))
    }

    fn from_world(world: World) -> Self {
        Self {
            state: Mutex::new(ServerState {
                world,
                outboxes: HashMap::new(),
            }),
            robot: RwLock::new(None),
            validations: Mutex::new(Validations::default()),
        }
    }

    /// Starts from the store, or from the configured scene when the store is empty.
    pub fn restore(config: SessionConfig, store: &dyn RecordStore) -> Result<Self, SessionError> {
        match restore_world(store)? {
            Some(snapshot) => Ok(Self::from_world(World::from_snapshot(&snapshot, config.limits))),
            None => Ok(Self::new(config)),
        }
    }

    pub fn attach_robot(&self, link: Arc<dyn RobotLink>) {
        *self.robot.write() = Some(link);
    }

    pub fn detach_robot(&self) {
        *self.robot.write() = None;
    }

    fn robot_config(&self) -> JointConfig {
        self.robot
            .read()
            .as_ref()
            .and_then(|r| r.current_config())
            .unwrap_or(JointConfig::HOME)
    }

    pub fn join(&self, user_id: &str, platform: Platform) -> Result<JoinOutcome, SessionError> {
        let robot_q = self.robot_config();
        let mut st = self.state.lock();
        let (session_id, snapshot, effects) = st.world.join(user_id, platform, robot_q)?;
        let (tx, inbox) = unbounded();
        st.outboxes.insert(
            session_id.clone(),
            Outbox {
                tx,
                seq: SeqCounter::new(SERVER_SENDER),
            },
        );
        st.deliver(Some(&session_id), effects);
        Ok(JoinOutcome {
            session_id,
            snapshot,
            inbox,
        })
    }

    /// Sends an ERROR to the session, if it is still connected.
    pub fn report_error(&self, session_id: &str, err: &SessionError, ref_seq: Option<u64>) {
        let mut st = self.state.lock();
        if let Some(out) = st.outboxes.get_mut(session_id) {
            out.push(Body::Error(ErrorBody {
                code: err.code(),
                message: err.to_string(),
                ref_seq,
                joint: err.joint(),
            }));
        }
    }

    pub fn update_phantom(&self, session_id: &str, q: JointConfig) -> Result<u64, SessionError> {
        let mut st = self.state.lock();
        let (seq, effects) = st.world.update_phantom(session_id, q)?;
        st.deliver(Some(session_id), effects);
        Ok(seq)
    }

    pub fn acquire_lock(&self, session_id: &str, object_id: &str) -> Result<LockOutcome, SessionError> {
        let mut st = self.state.lock();
        let (outcome, effects) = st.world.acquire_lock(session_id, object_id)?;
        st.deliver(Some(session_id), effects);
        Ok(outcome)
    }

    pub fn release_lock(&self, session_id: &str, object_id: &str) -> Result<u64, SessionError> {
        let mut st = self.state.lock();
        let (seq, effects) = st.world.release_lock(session_id, object_id)?;
        st.deliver(Some(session_id), effects);
        Ok(seq)
    }

    pub fn disconnect(&self, session_id: &str) -> Result<(), SessionError> {
        let mut st = self.state.lock();
        let effects = st.world.disconnect(session_id)?;
        st.outboxes.remove(session_id);
        st.deliver(Some(session_id), effects);
        Ok(())
    }

    /// Commits the caller's phantom as one robot command.
    pub fn validate_phantom(&self, session_id: &str) -> Result<CommandReceipt, SessionError> {
        let (user_id, q) = self.state.lock().world.phantom_config(session_id)?;
        self.dispatch(session_id, user_id, CommandSource::Validate, vec![q])
    }

    /// Sends a waypoint list; the robot accepts it only with the trajectory module loaded.
    pub fn request_trajectory(
        &self,
        session_id: &str,
        waypoints: Vec<JointConfig>,
    ) -> Result<CommandReceipt, SessionError> {
        let user_id = {
            let st = self.state.lock();
            let user = st.world.session(session_id)?.user_id.clone();
            if waypoints.is_empty() {
                return Err(SessionError::Validation("trajectory needs at least one waypoint".into()));
            }
            for q in &waypoints {
                if let Some(joint) = st.world.limits().first_violation(q) {
                    return Err(SessionError::JointLimit { joint });
                }
            }
            user
        };
        self.dispatch(session_id, user_id, CommandSource::Trajectory, waypoints)
    }

    fn dispatch(
        &self,
        session_id: &str,
        user_id: String,
        source: CommandSource,
        waypoints: Vec<JointConfig>,
    ) -> Result<CommandReceipt, SessionError> {
        let robot = self.robot.read().clone();
        let mut v = self.validations.lock();
        v.next_request += 1;
        let request_id = v.next_request;
        let outcome = match robot {
            Some(robot) => robot.submit(
                CommandOrigin {
                    source,
                    user_id: user_id.clone(),
                    request_id,
                },
                waypoints.clone(),
            ),
            None => Err("no robot server attached".to_string()),
        };
        v.log.push(ValidationRecord {
            request_id,
            user_id,
            source,
            waypoints,
            outcome: outcome.clone(),
        });
        drop(v);
        let receipt = outcome.map_err(SessionError::Delivery)?;
        let mut st = self.state.lock();
        if let Some(out) = st.outboxes.get_mut(session_id) {
            out.push(Body::Validate(ValidateBody {
                waypoints: None,
                receipt: Some(receipt.clone()),
            }));
        }
        Ok(receipt)
    }

    /// Queues a reply on one session's outbox. False if the session is gone.
    pub fn send_to(&self, session_id: &str, body: Body) -> bool {
        let mut st = self.state.lock();
        match st.outboxes.get_mut(session_id) {
            Some(out) => {
                out.push(body);
                true
            }
            None => false,
        }
    }

    /// Switches trajectory execution on the attached robot.
    pub fn set_robot_trajectory(&self, enabled: bool) -> Result<(), SessionError> {
        let robot = self.robot.read().clone();
        match robot {
            Some(r) => r.set_trajectory_enabled(enabled).map_err(SessionError::Delivery),
            None => Err(SessionError::Delivery("no robot server attached".into())),
        }
    }

    pub fn has_robot(&self) -> bool {
        self.robot.read().is_some()
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        self.state.lock().world.snapshot()
    }

    pub fn world_seq(&self) -> u64 {
        self.state.lock().world.world_seq()
    }

    pub fn connected_sessions(&self) -> Vec<SessionId> {
        let st = self.state.lock();
        st.world.sessions().map(|s| s.session_id.clone()).collect()
    }

    pub fn last_acked(&self, session_id: &str) -> Option<u64> {
        let st = self.state.lock();
        st.world.session(session_id).ok().map(|s| s.last_acked_world_seq)
    }

    pub fn validation_log(&self) -> Vec<ValidationRecord> {
        self.validations.lock().log.clone()
    }

    /// Relays a robot completion or status notice to every client.
    pub fn broadcast_robot_state(&self, body: RobotStateBody) {
        self.state.lock().broadcast(Body::RobotState(body));
    }

    /// Relays a module state report (status board updates) to every client.
    pub fn broadcast_module_report(&self, report: StateReport) {
        self.state.lock().broadcast(Body::StateReport(report));
    }

    pub fn persist_world(&self, store: &dyn RecordStore) -> Result<(), SessionError> {
        let records = self.state.lock().world.to_records();
        store.save(&records)?;
        Ok(())
    }
}

/// Reads a persisted snapshot; `None` when the store was never written.
pub fn restore_world(store: &dyn RecordStore) -> Result<Option<WorldSnapshot>, SessionError> {
    match store.load()? {
        None => Ok(None),
        Some(records) => snapshot_from_records(&records).map(Some),
    }
}

/// Forwards robot completion notices to all clients until the robot goes away.
pub fn forward_robot_notices(server: Arc<SessionServer>, robot: &RobotServer) -> std::thread::JoinHandle<()> {
    let rx = robot.notices();
    std::thread::spawn(move || {
        for notice in rx {
            let crate::robot::RobotNotice::Completed { command_id, state } = notice;
            server.broadcast_robot_state(RobotStateBody {
                event: RobotEvent::Completed,
                command_id: Some(command_id),
                receipt: None,
                state: Some(state),
            });
        }
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProvenanceReport {
    pub accepted_requests: usize,
    pub executed_commands: usize,
    pub problems: Vec<String>,
}

impl ProvenanceReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Matches every executed robot command against exactly one accepted request.
pub fn audit_command_provenance(validations: &[ValidationRecord], executed: &[ExecutedCommand]) -> ProvenanceReport {
    let mut report = ProvenanceReport::default();
    let accepted: HashMap<u64, (&ValidationRecord, u64)> = validations
        .iter()
        .filter_map(|v| match &v.outcome {
            Ok(r) if r.is_accepted() => r.command_id.map(|id| (v.request_id, (v, id))),
            _ => None,
        })
        .collect();
    report.accepted_requests = accepted.len();
    report.executed_commands = executed.len();
    let mut matched = std::collections::HashSet::new();
    for cmd in executed {
        match accepted.get(&cmd.origin.request_id) {
            Some((v, command_id))
                if *command_id == cmd.command_id
                    && v.user_id == cmd.origin.user_id
                    && v.source == cmd.origin.source
                    && v.waypoints == cmd.waypoints =>
            {
                if !matched.insert(cmd.origin.request_id) {
                    report
                        .problems
                        .push(format!("request {} executed twice", cmd.origin.request_id));
                }
            }
            _ => report.problems.push(format!(
                "command {} has no matching accepted request (origin {:?})",
                cmd.command_id, cmd.origin
            )),
        }
    }
    for request_id in accepted.keys() {
        if !matched.contains(request_id) {
            report
                .problems
                .push(format!("accepted request {request_id} never reached the robot log"));
        }
    }
    report
}
