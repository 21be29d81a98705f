//! Scenario execution.
//!
//! Actions run one at a time in virtual-time order. The in-process transport
//! calls the session server directly and ticks the robot in virtual time; the
//! TCP transport puts every component behind a loopback socket and lets the
//! robot tick in real time.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::spec::{Assertion, ClientAction, CoreModule, LatencyProfile, ProbeMode, Scenario};
use super::ScenarioError;
use crate::net::{run_robot_peer, serve_relay, serve_session, RobotPeerHandle, TcpSessionClient, TcpStreamViewer};
use crate::prototyper::ModuleDescriptor;
use crate::relay::{Delivery, Frame, Relay, RelayConfig};
use crate::robot::{
    CommandReceipt, ExecutedCommand, JointConfig, JointLimits, ReceiptStatus, RobotConfig, RobotServer,
};
use crate::runtime::{
    audit_conservation, audit_signal_discipline, timed_safe_trace, BuiltinFactory, Core,
    LatencySample, LocalStreamLink, StreamLink, TrajectorySwitch, Variant,
};
use crate::session::{
    audit_command_provenance, forward_robot_notices, LockOutcome, Replica, SceneConfig, SessionConfig,
    SessionServer, ValidationRecord, WorldSnapshot,
};
use crate::wire::Envelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    InProcess,
    Tcp,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub transport: Transport,
    pub robot: RobotConfig,
    /// Real-time budget for TCP replies, convergence and robot completion.
    pub settle_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            transport: Transport::InProcess,
            robot: RobotConfig::default(),
            settle_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionOutcome {
    pub scenario: String,
    pub assertion: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub actions: u64,
    pub phantom_updates: u64,
    pub lock_attempts: u64,
    pub lock_grants: u64,
    pub contested_rounds: u64,
    pub accepted_commands: u64,
    pub executed_commands: u64,
    pub latency_samples: u64,
    pub final_world_seq: u64,
}

/// One lock request as the requesting client saw it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LockAttempt {
    pub at_ms: u64,
    pub user_id: String,
    pub object_id: String,
    pub granted: bool,
    /// Holder named by the server: the requester on a grant, the current
    /// owner on a denial.
    pub owner: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub transport: Transport,
    pub outcomes: Vec<AssertionOutcome>,
    pub stats: RunStats,
    /// Core signal log (MODULE_SIGNAL and STATE_REPORT envelopes).
    pub core_log: Vec<Envelope>,
    pub final_snapshot: WorldSnapshot,
    /// Every message each client received, in arrival order. Clients that
    /// disconnected keep the log up to their departure.
    pub client_logs: Vec<(String, Vec<Envelope>)>,
    /// Users still connected at the end.
    pub connected: Vec<String>,
    pub lock_attempts: Vec<LockAttempt>,
    pub validations: Vec<ValidationRecord>,
    pub executed: Vec<ExecutedCommand>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AssertionOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    /// One JSON object per assertion outcome.
    pub fn to_jsonl(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| serde_json::to_string(o).expect("outcome serializes") + "\n")
            .collect()
    }
}

/// Descriptors for the modules a scenario core can load by name.
pub fn builtin_descriptor(name: &str) -> Option<ModuleDescriptor> {
    let both = [Variant::Classic, Variant::Mobile];
    match name {
        "camera" => Some(ModuleDescriptor::new("camera", "1.0", &both).degradable("camera", 5, 5)),
        "trajectory" => Some(ModuleDescriptor::new("trajectory", "1.0", &both)),
        "teleop" => Some(ModuleDescriptor::new("teleop", "1.0", &both)),
        _ => None,
    }
}

/// First probe time at which the estimate rises above `threshold`, assuming
/// each probe measures exactly the profile delay. Closed form per profile
/// segment: after `j` samples of a constant delay `d` the estimate is
/// `d + (L - d)(1 - beta)^j`.
pub fn predicted_crossing(
    profile: &LatencyProfile,
    probe_interval_ms: u64,
    until_ms: u64,
    beta: f64,
    threshold: f64,
) -> Option<u64> {
    let mut estimate: Option<f64> = None;
    let mut starts: Vec<(u64, f64)> = profile.steps.clone();
    if starts.first().is_none_or(|(t, _)| *t > 0) {
        starts.insert(0, (0, 0.0));
    }
    for (i, &(start, d)) in starts.iter().enumerate() {
        let end = starts.get(i + 1).map_or(until_ms + 1, |(t, _)| *t).min(until_ms + 1);
        let first_k = start.div_ceil(probe_interval_ms);
        let first_t = first_k * probe_interval_ms;
        if first_t >= end {
            continue;
        }
        let samples = (end - 1 - first_t) / probe_interval_ms + 1;
        let (prev, offset) = match estimate {
            Some(l) => (l, 0),
            None => {
                if d > threshold {
                    return Some(first_t);
                }
                (d, 1)
            }
        };
        if d > threshold && prev <= threshold {
            let ratio = (d - threshold) / (d - prev);
            let j = ((ratio.ln() / (1.0 - beta).ln()).floor() as u64 + 1).max(1);
            if offset + j <= samples {
                return Some(first_t + (offset + j - 1) * probe_interval_ms);
            }
        }
        let j = (samples - offset) as i32;
        estimate = Some(d + (prev - d) * (1.0 - beta).powi(j));
    }
    None
}

enum Link {
    Local {
        server: Arc<SessionServer>,
        session_id: String,
        inbox: Receiver<Envelope>,
        replica: Replica,
        log: Vec<Envelope>,
    },
    Tcp(TcpSessionClient),
}

impl Link {
    fn session_id(&self) -> &str {
        match self {
            Link::Local { session_id, .. } => session_id,
            Link::Tcp(c) => c.session_id(),
        }
    }

    fn pump(&mut self) {
        match self {
            Link::Local { inbox, replica, log, .. } => {
                while let Ok(env) = inbox.try_recv() {
                    replica.apply(&env);
                    log.push(env);
                }
            }
            Link::Tcp(c) => {
                c.pump(Duration::ZERO);
            }
        }
    }

    fn log(&self) -> &[Envelope] {
        match self {
            Link::Local { log, .. } => log,
            Link::Tcp(c) => c.log(),
        }
    }

    fn replica(&self) -> &Replica {
        match self {
            Link::Local { replica, .. } => replica,
            Link::Tcp(c) => c.replica(),
        }
    }

    fn update_phantom(&mut self, q: JointConfig) -> Result<(), String> {
        match self {
            Link::Local { server, session_id, .. } => server.update_phantom(session_id, q).map(|_| ()).map_err(|e| e.to_string()),
            Link::Tcp(c) => c.update_phantom(q).map(|_| ()).map_err(|e| e.to_string()),
        }
    }

    fn lock(&mut self, object: &str) -> Result<LockOutcome, String> {
        match self {
            Link::Local { server, session_id, .. } => server.acquire_lock(session_id, object).map_err(|e| e.to_string()),
            Link::Tcp(c) => c.lock(object).map_err(|e| e.to_string()),
        }
    }

    fn release(&mut self, object: &str) -> Result<(), String> {
        match self {
            Link::Local { server, session_id, .. } => server.release_lock(session_id, object).map(|_| ()).map_err(|e| e.to_string()),
            Link::Tcp(c) => c.release(object).map(|_| ()).map_err(|e| e.to_string()),
        }
    }

    fn validate(&mut self) -> Result<CommandReceipt, String> {
        match self {
            Link::Local { server, session_id, .. } => server.validate_phantom(session_id).map_err(|e| e.to_string()),
            Link::Tcp(c) => c.validate().map_err(|e| e.to_string()),
        }
    }

    fn trajectory(&mut self, waypoints: Vec<JointConfig>) -> Result<CommandReceipt, String> {
        match self {
            Link::Local { server, session_id, .. } => {
                server.request_trajectory(session_id, waypoints).map_err(|e| e.to_string())
            }
            Link::Tcp(c) => c.trajectory(waypoints).map_err(|e| e.to_string()),
        }
    }
}

/// One scheduled step. `order` breaks ties at equal times: latency probes,
/// then control ticks, then hot-adds, then client actions in script order.
#[derive(Debug, Clone)]
struct Event {
    at_ms: u64,
    order: (u8, usize, usize),
    kind: EventKind,
}

#[derive(Debug, Clone)]
enum EventKind {
    Probe,
    Tick,
    HotAdd(CoreModule),
    Client { client: usize, action: Step },
}

#[derive(Debug, Clone)]
enum Step {
    Join,
    Phantom(JointConfig),
    RandomPhantom,
    Lock(String),
    Release(String),
    RandomLock(Vec<String>),
    Validate(Option<ReceiptStatus>),
    Trajectory(Vec<JointConfig>, Option<ReceiptStatus>),
    Disconnect,
}

fn schedule(scenario: &Scenario) -> Vec<Event> {
    let mut events = Vec::new();
    let mut end = 0;
    for (ci, client) in scenario.clients.iter().enumerate() {
        for (ai, timed) in client.actions.iter().enumerate() {
            let mut push = |at_ms: u64, sub: usize, step: Step| {
                end = end.max(at_ms);
                events.push(Event {
                    at_ms,
                    order: (3, ci, ai * 1_000_000 + sub),
                    kind: EventKind::Client { client: ci, action: step },
                });
            };
            let spaced = |i: u32, rate_hz: f64| timed.at_ms + (f64::from(i) * 1000.0 / rate_hz) as u64;
            match &timed.action {
                ClientAction::Join => push(timed.at_ms, 0, Step::Join),
                ClientAction::Phantom(q) => push(timed.at_ms, 0, Step::Phantom(*q)),
                ClientAction::RandomUpdates { count, rate_hz } => {
                    for i in 0..*count {
                        push(spaced(i, *rate_hz), i as usize, Step::RandomPhantom);
                    }
                }
                ClientAction::Lock(o) => push(timed.at_ms, 0, Step::Lock(o.clone())),
                ClientAction::Release(o) => push(timed.at_ms, 0, Step::Release(o.clone())),
                ClientAction::RandomLocks { count, rate_hz, objects } => {
                    for i in 0..*count {
                        push(spaced(i, *rate_hz), i as usize, Step::RandomLock(objects.clone()));
                    }
                }
                ClientAction::Validate { expect } => push(timed.at_ms, 0, Step::Validate(*expect)),
                ClientAction::Trajectory { waypoints, expect } => {
                    push(timed.at_ms, 0, Step::Trajectory(waypoints.clone(), *expect))
                }
                ClientAction::Disconnect => push(timed.at_ms, 0, Step::Disconnect),
            }
        }
    }
    if let Some(core) = &scenario.core {
        let until = core.duration_ms.max(end);
        for (i, t) in (0..=until).step_by(core.probe_interval_ms as usize).enumerate() {
            events.push(Event {
                at_ms: t,
                order: (0, i, 0),
                kind: EventKind::Probe,
            });
        }
        let period = core.controller.period_ms;
        for (i, t) in (period..=until).step_by(period as usize).enumerate() {
            events.push(Event {
                at_ms: t,
                order: (1, i, 0),
                kind: EventKind::Tick,
            });
        }
        for (i, h) in core.hot_adds.iter().enumerate() {
            events.push(Event {
                at_ms: h.at_ms,
                order: (2, i, 0),
                kind: EventKind::HotAdd(h.module.clone()),
            });
        }
    }
    events.sort_by_key(|e| (e.at_ms, e.order));
    events
}

/// Lock attempts grouped by (object, time): a round is contested when at least
/// two distinct users ask for an object that was free when the round began.
#[derive(Default)]
struct LockBook {
    owners: BTreeMap<String, String>,
    rounds: BTreeMap<(String, u64), Round>,
    problems: Vec<String>,
}

#[derive(Default)]
struct Round {
    free_at_start: bool,
    requesters: BTreeSet<String>,
    granted: BTreeSet<String>,
}

impl LockBook {
    fn attempt(&mut self, object: &str, at_ms: u64, user: &str, outcome: &LockOutcome) {
        let owner = self.owners.get(object).cloned();
        let round = self.rounds.entry((object.to_string(), at_ms)).or_insert_with(|| Round {
            free_at_start: owner.is_none(),
            ..Round::default()
        });
        round.requesters.insert(user.to_string());
        match outcome {
            LockOutcome::Granted { .. } => {
                if owner.as_deref().is_some_and(|o| o != user) {
                    self.problems.push(format!(
                        "{object} granted to {user} at {at_ms} ms while held by {}",
                        owner.unwrap_or_default()
                    ));
                }
                round.granted.insert(user.to_string());
                self.owners.insert(object.to_string(), user.to_string());
            }
            LockOutcome::Denied { .. } => {
                if owner.is_none() {
                    self.problems.push(format!("{object} denied to {user} at {at_ms} ms while free"));
                }
            }
        }
    }

    fn release(&mut self, object: &str, user: &str) {
        if self.owners.get(object).is_some_and(|o| o == user) {
            self.owners.remove(object);
        }
    }

    fn drop_user(&mut self, user: &str) {
        self.owners.retain(|_, owner| owner != user);
    }

    fn held_by(&self, user: &str) -> Option<String> {
        self.owners.iter().find(|(_, o)| o.as_str() == user).map(|(k, _)| k.clone())
    }

    fn contested<'a>(&'a self, object: Option<&'a str>) -> impl Iterator<Item = (&'a (String, u64), &'a Round)> + 'a {
        self.rounds
            .iter()
            .filter(move |((o, _), r)| object.is_none_or(|x| x == o) && r.free_at_start && r.requesters.len() >= 2)
    }
}

struct Stack {
    server: Arc<SessionServer>,
    robot: Arc<RobotServer>,
    notice_thread: Option<JoinHandle<()>>,
    robot_peer: Option<RobotPeerHandle>,
    session_addr: Option<SocketAddr>,
}

impl Stack {
    fn start(scenario: &Scenario, options: &RunOptions) -> Result<Self, ScenarioError> {
        let robot = Arc::new(RobotServer::new(options.robot.clone()));
        let server = Arc::new(SessionServer::new(SessionConfig {
            limits: options.robot.limits.clone(),
            scene: SceneConfig {
                objects: scenario.scene.clone(),
            },
        }));
        let mut stack = Stack {
            server,
            robot,
            notice_thread: None,
            robot_peer: None,
            session_addr: None,
        };
        match options.transport {
            Transport::InProcess => {
                stack.server.attach_robot(stack.robot.clone());
                stack.notice_thread = Some(forward_robot_notices(stack.server.clone(), &stack.robot));
            }
            Transport::Tcp => {
                let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| ScenarioError::Setup(e.to_string()))?;
                let addr = listener.local_addr().map_err(|e| ScenarioError::Setup(e.to_string()))?;
                serve_session(stack.server.clone(), listener);
                let peer = run_robot_peer(stack.robot.clone(), addr, "robot-server")
                    .map_err(|e| ScenarioError::Setup(format!("robot peer: {e}")))?;
                stack.robot_peer = Some(peer);
                let deadline = Instant::now() + options.settle_timeout;
                while !stack.server.has_robot() {
                    if Instant::now() > deadline {
                        return Err(ScenarioError::Setup("robot server never attached".into()));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                stack.session_addr = Some(addr);
            }
        }
        Ok(stack)
    }

    fn shutdown(mut self) {
        self.server.detach_robot();
        if let Some(peer) = self.robot_peer.take() {
            peer.stop();
        }
        let Stack { robot, notice_thread, .. } = self;
        drop(robot);
        // The forwarder ends once the last robot handle is gone; the server
        // still holds one only while attached, so this join cannot hang.
        if let Some(t) = notice_thread {
            let _ = t.join();
        }
    }
}

/// Latency measurement path for the core.
enum Probe {
    None,
    Virtual,
    Local {
        relay: Relay,
        stop: Arc<AtomicBool>,
        responder: Option<JoinHandle<()>>,
    },
    Tcp {
        relay: Relay,
        viewer: Arc<TcpStreamViewer>,
    },
}

const VIEWER_ID: &str = "core-viewer";

impl Probe {
    fn relay(&self) -> Option<&Relay> {
        match self {
            Probe::Local { relay, .. } | Probe::Tcp { relay, .. } => Some(relay),
            _ => None,
        }
    }

    fn measure(&self, timeout: Duration) -> Result<f64, String> {
        match self {
            Probe::None | Probe::Virtual => Ok(0.0),
            Probe::Local { relay, .. } => relay
                .measure_latency_with_timeout(VIEWER_ID, timeout)
                .map_err(|e| e.to_string())
                .and_then(|s| if s.timed_out { Err("probe timed out".into()) } else { Ok(s.rtt_ms) }),
            Probe::Tcp { viewer, .. } => viewer.probe(timeout).map(|s| s.rtt_ms).map_err(|e| e.to_string()),
        }
    }

    fn stop(self) {
        if let Probe::Local { stop, responder, .. } = self {
            stop.store(true, Ordering::SeqCst);
            if let Some(t) = responder {
                let _ = t.join();
            }
        }
    }
}

struct CoreRig {
    core: Core,
    probe: Probe,
    profile: LatencyProfile,
    sources: Vec<String>,
    frame_seq: u64,
}

fn build_core(scenario: &Scenario, stack: &Stack, options: &RunOptions) -> Result<Option<CoreRig>, ScenarioError> {
    let Some(setup) = &scenario.core else {
        return Ok(None);
    };
    let all: Vec<&CoreModule> = setup.modules.iter().chain(setup.hot_adds.iter().map(|h| &h.module)).collect();
    for m in &all {
        if builtin_descriptor(&m.name).is_none() {
            return Err(ScenarioError::Validation(format!("unknown core module '{}'", m.name)));
        }
    }
    let uses_camera = all.iter().any(|m| m.name == "camera");
    let sources = if uses_camera {
        BuiltinFactory::camera_source_ids(builtin_descriptor("camera").expect("builtin").max_units)
    } else {
        Vec::new()
    };
    let needs_relay = uses_camera || scenario.probe == ProbeMode::Relay;
    let probe = if !needs_relay {
        if scenario.probe == ProbeMode::Virtual { Probe::Virtual } else { Probe::None }
    } else {
        let relay = Relay::new(RelayConfig::default());
        for s in &sources {
            relay
                .register_source(s, 1000.0 / setup.probe_interval_ms as f64)
                .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        }
        match options.transport {
            Transport::InProcess => {
                let endpoint = relay.connect(VIEWER_ID).map_err(|e| ScenarioError::Setup(e.to_string()))?;
                let stop = Arc::new(AtomicBool::new(false));
                let flag = stop.clone();
                let responder = std::thread::spawn(move || {
                    while !flag.load(Ordering::SeqCst) {
                        if let Some(Delivery::Ping { probe_id }) = endpoint.recv_timeout(Duration::from_millis(20)) {
                            endpoint.pong(probe_id);
                        }
                    }
                });
                Probe::Local {
                    relay,
                    stop,
                    responder: Some(responder),
                }
            }
            Transport::Tcp => {
                let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| ScenarioError::Setup(e.to_string()))?;
                let addr = listener.local_addr().map_err(|e| ScenarioError::Setup(e.to_string()))?;
                serve_relay(relay.clone(), listener);
                let viewer = TcpStreamViewer::connect(addr, VIEWER_ID)
                    .map_err(|e| ScenarioError::Setup(format!("relay viewer: {e}")))?;
                Probe::Tcp {
                    relay,
                    viewer: Arc::new(viewer),
                }
            }
        }
    };
    let streams: Option<Arc<dyn StreamLink>> = match &probe {
        Probe::Local { relay, .. } => Some(Arc::new(LocalStreamLink {
            relay: relay.clone(),
            client_id: VIEWER_ID.to_string(),
        })),
        Probe::Tcp { viewer, .. } => Some(viewer.clone() as Arc<dyn StreamLink>),
        _ => None,
    };
    let factory = BuiltinFactory {
        streams,
        camera_sources: sources.clone(),
        robot: Some(stack.server.clone() as Arc<dyn TrajectorySwitch>),
    };
    let mut core = Core::new(setup.controller, Box::new(factory));
    let mut priority = Vec::new();
    for m in &setup.modules {
        let descriptor = builtin_descriptor(&m.name).expect("checked above");
        let entry = crate::prototyper::AppModule {
            requested_units: m.units.unwrap_or(descriptor.default_units),
            descriptor,
            variant: m.variant,
        };
        if entry.descriptor.degradable {
            priority.push(m.name.clone());
        }
        core.load_entry(&entry)
            .map_err(|e| ScenarioError::Setup(format!("loading {}: {e}", m.name)))?;
    }
    core.set_priority(priority);
    Ok(Some(CoreRig {
        core,
        probe,
        profile: setup.profile.clone(),
        sources,
        frame_seq: 0,
    }))
}

fn random_joints(rng: &mut ChaCha8Rng, limits: &JointLimits) -> JointConfig {
    let mut q = [0.0; 6];
    for (i, v) in q.iter_mut().enumerate() {
        let (lo, hi) = (limits.lower[i] * 0.9, limits.upper[i] * 0.9);
        *v = rng.random_range(lo..=hi);
    }
    JointConfig(q)
}

fn check_receipt(errors: &mut Vec<String>, what: &str, got: Result<CommandReceipt, String>, expect: Option<ReceiptStatus>) -> Option<CommandReceipt> {
    match got {
        Ok(r) => {
            if let Some(e) = expect {
                if r.status != e {
                    errors.push(format!("{what}: expected {e:?}, got {:?} ({})", r.status, r.detail.clone().unwrap_or_default()));
                }
            }
            Some(r)
        }
        Err(e) => {
            errors.push(format!("{what}: {e}"));
            None
        }
    }
}

/// Runs a validated scenario and evaluates its assertions. The first outcome
/// is always `script`, which fails on any unexpected action error.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<ScenarioReport, ScenarioError> {
    scenario.validate()?;
    let seed = options.seed.unwrap_or(scenario.seed);
    let stack = Stack::start(scenario, options)?;
    let result = drive(scenario, options, seed, &stack);
    stack.shutdown();
    result
}

fn drive(scenario: &Scenario, options: &RunOptions, seed: u64, stack: &Stack) -> Result<ScenarioReport, ScenarioError> {
    let mut rig = build_core(scenario, stack, options)?;
    let events = schedule(scenario);
    let limits = options.robot.limits.clone();
    let mut rngs: Vec<ChaCha8Rng> = (0..scenario.clients.len())
        .map(|i| ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
        .collect();
    let mut links: Vec<Option<Link>> = (0..scenario.clients.len()).map(|_| None).collect();
    let mut departed: Vec<Option<(Replica, Vec<Envelope>)>> = (0..scenario.clients.len()).map(|_| None).collect();
    let mut attempts: Vec<LockAttempt> = Vec::new();
    let mut book = LockBook::default();
    let mut errors: Vec<String> = Vec::new();
    let mut stats = RunStats::default();
    let tick_ms = options.robot.tick_ms.max(1);
    let mut robot_clock = 0u64;

    for event in &events {
        if options.transport == Transport::InProcess {
            while robot_clock + tick_ms <= event.at_ms {
                robot_clock += tick_ms;
                if !stack.robot.is_idle() {
                    if let Err(e) = stack.robot.tick(tick_ms as f64 / 1e3) {
                        errors.push(format!("robot tick at {robot_clock} ms: {e}"));
                    }
                }
            }
        }
        let t = event.at_ms;
        match &event.kind {
            EventKind::Probe => {
                let rig = rig.as_mut().expect("probes imply a core");
                if let Some(relay) = rig.probe.relay() {
                    rig.frame_seq += 1;
                    for s in &rig.sources {
                        let _ = relay.push_frame(Frame::synthetic(s.clone(), rig.frame_seq, t, 256));
                    }
                }
                let measured = match scenario.probe {
                    ProbeMode::Virtual => Ok(0.0),
                    ProbeMode::Relay => rig.probe.measure(options.settle_timeout.min(Duration::from_secs(2))),
                };
                match measured {
                    Ok(rtt) => {
                        stats.latency_samples += 1;
                        rig.core.observe_latency(&LatencySample {
                            source: VIEWER_ID.to_string(),
                            rtt_ms: rtt + rig.profile.delay_at(t),
                            ts_ms: t,
                            timed_out: false,
                        });
                    }
                    Err(e) => errors.push(format!("latency probe at {t} ms: {e}")),
                }
            }
            EventKind::Tick => {
                let rig = rig.as_mut().expect("ticks imply a core");
                rig.core.tick(t);
            }
            EventKind::HotAdd(m) => {
                let rig = rig.as_mut().expect("hot-adds imply a core");
                rig.core.set_time(t);
                let descriptor = builtin_descriptor(&m.name).expect("checked at build");
                if let Err(e) = rig.core.hot_add(&descriptor, m.variant, m.units) {
                    errors.push(format!("hot-add {} at {t} ms: {e}", m.name));
                }
            }
            EventKind::Client { client, action } => {
                stats.actions += 1;
                let script = &scenario.clients[*client];
                let user = script.user_id.as_str();
                let what = |name: &str| format!("{user} {name} at {t} ms");
                if let Step::Join = action {
                    let link = match options.transport {
                        Transport::InProcess => stack
                            .server
                            .join(user, script.platform)
                            .map(|j| Link::Local {
                                server: stack.server.clone(),
                                session_id: j.session_id,
                                inbox: j.inbox,
                                replica: Replica::new(),
                                log: Vec::new(),
                            })
                            .map_err(|e| e.to_string()),
                        Transport::Tcp => {
                            TcpSessionClient::connect(stack.session_addr.expect("tcp stack"), user, script.platform)
                                .map(Link::Tcp)
                                .map_err(|e| e.to_string())
                        }
                    };
                    match link {
                        Ok(mut l) => {
                            l.pump();
                            links[*client] = Some(l);
                        }
                        Err(e) => errors.push(format!("{}: {e}", what("join"))),
                    }
                    continue;
                }
                let Some(link) = links[*client].as_mut() else {
                    errors.push(format!("{}: client is not connected", what("action")));
                    continue;
                };
                match action {
                    Step::Join => unreachable!(),
                    Step::Phantom(q) => {
                        stats.phantom_updates += 1;
                        if let Err(e) = link.update_phantom(*q) {
                            errors.push(format!("{}: {e}", what("phantom")));
                        }
                    }
                    Step::RandomPhantom => {
                        stats.phantom_updates += 1;
                        let q = random_joints(&mut rngs[*client], &limits);
                        if let Err(e) = link.update_phantom(q) {
                            errors.push(format!("{}: {e}", what("random update")));
                        }
                    }
                    Step::Lock(object) => {
                        stats.lock_attempts += 1;
                        match link.lock(object) {
                            Ok(outcome) => {
                                if matches!(outcome, LockOutcome::Granted { .. }) {
                                    stats.lock_grants += 1;
                                }
                                book.attempt(object, t, user, &outcome);
                                attempts.push(LockAttempt {
                                    at_ms: t,
                                    user_id: user.to_string(),
                                    object_id: object.clone(),
                                    granted: matches!(outcome, LockOutcome::Granted { .. }),
                                    owner: match &outcome {
                                        LockOutcome::Granted { .. } => Some(user.to_string()),
                                        LockOutcome::Denied { owner } => owner.clone(),
                                    },
                                });
                            }
                            Err(e) => errors.push(format!("{}: {e}", what("lock"))),
                        }
                    }
                    Step::Release(object) => match link.release(object) {
                        Ok(()) => book.release(object, user),
                        Err(e) => errors.push(format!("{}: {e}", what("release"))),
                    },
                    Step::RandomLock(objects) => {
                        if let Some(held) = book.held_by(user) {
                            match link.release(&held) {
                                Ok(()) => book.release(&held, user),
                                Err(e) => errors.push(format!("{}: {e}", what("random release"))),
                            }
                        } else {
                            let object = &objects[rngs[*client].random_range(0..objects.len())];
                            stats.lock_attempts += 1;
                            match link.lock(object) {
                                Ok(outcome) => {
                                    if matches!(outcome, LockOutcome::Granted { .. }) {
                                        stats.lock_grants += 1;
                                    }
                                    book.attempt(object, t, user, &outcome);
                                    attempts.push(LockAttempt {
                                        at_ms: t,
                                        user_id: user.to_string(),
                                        object_id: object.clone(),
                                        granted: matches!(outcome, LockOutcome::Granted { .. }),
                                    owner: match &outcome {
                                        LockOutcome::Granted { .. } => Some(user.to_string()),
                                        LockOutcome::Denied { owner } => owner.clone(),
                                    },
                                    });
                                }
                                Err(e) => errors.push(format!("{}: {e}", what("random lock"))),
                            }
                        }
                    }
                    Step::Validate(expect) => {
                        if let Some(r) = check_receipt(&mut errors, &what("validate"), link.validate(), *expect) {
                            stats.accepted_commands += u64::from(r.is_accepted());
                        }
                    }
                    Step::Trajectory(waypoints, expect) => {
                        let got = link.trajectory(waypoints.clone());
                        if let Some(r) = check_receipt(&mut errors, &what("trajectory"), got, *expect) {
                            stats.accepted_commands += u64::from(r.is_accepted());
                        }
                    }
                    Step::Disconnect => {
                        let link = links[*client].take().expect("checked above");
                        let sid = link.session_id().to_string();
                        match link {
                            Link::Local { server, session_id, inbox, mut replica, mut log } => {
                                while let Ok(env) = inbox.try_recv() {
                                    replica.apply(&env);
                                    log.push(env);
                                }
                                if let Err(e) = server.disconnect(&session_id) {
                                    errors.push(format!("{}: {e}", what("disconnect")));
                                }
                                departed[*client] = Some((replica, log));
                            }
                            Link::Tcp(mut c) => {
                                c.pump(Duration::ZERO);
                                departed[*client] = Some((c.replica().clone(), c.log().to_vec()));
                                c.close();
                                let deadline = Instant::now() + options.settle_timeout;
                                while stack.server.connected_sessions().contains(&sid) {
                                    if Instant::now() > deadline {
                                        errors.push(format!("{}: server never dropped the session", what("disconnect")));
                                        break;
                                    }
                                    std::thread::sleep(Duration::from_millis(1));
                                }
                            }
                        }
                        book.drop_user(user);
                    }
                }
                if let Some(link) = links[*client].as_mut() {
                    link.pump();
                }
            }
        }
    }

    // Let the robot finish whatever it accepted.
    let deadline = Instant::now() + options.settle_timeout;
    match options.transport {
        Transport::InProcess => {
            let mut guard = 0u64;
            while !stack.robot.is_idle() && guard < 600_000 / tick_ms {
                guard += 1;
                if let Err(e) = stack.robot.tick(tick_ms as f64 / 1e3) {
                    errors.push(format!("robot tick while settling: {e}"));
                    break;
                }
            }
        }
        Transport::Tcp => {
            while !stack.robot.is_idle() && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
    if !stack.robot.is_idle() {
        errors.push("robot still executing after the settle budget".into());
    }

    // Quiescence: every live client catches up to the server.
    let target = stack.server.world_seq();
    for link in links.iter_mut().flatten() {
        match link {
            Link::Local { .. } => link.pump(),
            Link::Tcp(c) => {
                let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_secs(1));
                c.wait_for_world_seq(target, remaining);
                c.pump(Duration::from_millis(20));
            }
        }
    }

    let final_snapshot = stack.server.snapshot();
    stats.final_world_seq = final_snapshot.world_seq;
    let executed = stack.robot.executed_log();
    stats.executed_commands = executed.len() as u64;
    stats.contested_rounds = book.contested(None).count() as u64;
    let core_log: Vec<Envelope> = rig.as_ref().map(|r| r.core.signal_log().to_vec()).unwrap_or_default();

    let mut outcomes = Vec::new();
    let outcome = |assertion: &str, target: Option<String>, passed: bool, detail: String| AssertionOutcome {
        scenario: scenario.name.clone(),
        assertion: assertion.to_string(),
        target,
        passed,
        detail,
    };
    outcomes.push(outcome(
        "script",
        None,
        errors.is_empty(),
        if errors.is_empty() {
            format!("{} actions, no unexpected errors", stats.actions)
        } else {
            format!("{} error(s): {}", errors.len(), errors.iter().take(5).cloned().collect::<Vec<_>>().join("; "))
        },
    ));

    let live: Vec<(&str, &Replica)> = scenario
        .clients
        .iter()
        .zip(links.iter())
        .filter_map(|(c, l)| l.as_ref().map(|l| (c.user_id.as_str(), l.replica())))
        .collect();
    let all_replicas: Vec<(&str, &Replica)> = scenario
        .clients
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            links[i]
                .as_ref()
                .map(|l| l.replica())
                .or(departed[i].as_ref().map(|(r, _)| r))
                .map(|r| (c.user_id.as_str(), r))
        })
        .collect();

    for assertion in &scenario.assertions {
        let name = assertion.name();
        outcomes.push(match assertion {
            Assertion::Convergence => {
                let diverged: Vec<String> = live
                    .iter()
                    .filter_map(|(user, r)| {
                        let snap = r.snapshot();
                        (snap != Some(&final_snapshot)).then(|| {
                            format!(
                                "{user} at world_seq {:?} vs server {}",
                                snap.map(|s| s.world_seq),
                                final_snapshot.world_seq
                            )
                        })
                    })
                    .collect();
                outcome(
                    name,
                    None,
                    diverged.is_empty(),
                    if diverged.is_empty() {
                        format!("{} replicas equal the server at world_seq {}", live.len(), final_snapshot.world_seq)
                    } else {
                        diverged.join("; ")
                    },
                )
            }
            Assertion::Ordering => {
                let problems: Vec<String> = all_replicas
                    .iter()
                    .flat_map(|(user, r)| r.ordering_violations().into_iter().map(move |v| format!("{user}: {v}")))
                    .collect();
                outcome(
                    name,
                    None,
                    problems.is_empty(),
                    if problems.is_empty() {
                        format!("per-object world_seq increasing at {} clients", all_replicas.len())
                    } else {
                        problems.into_iter().take(5).collect::<Vec<_>>().join("; ")
                    },
                )
            }
            Assertion::NoGaps => {
                let gaps: Vec<String> = all_replicas
                    .iter()
                    .filter(|(_, r)| !r.seq_gaps().is_empty())
                    .map(|(user, r)| format!("{user}: {:?}", r.seq_gaps()))
                    .collect();
                let received: usize = all_replicas.iter().map(|(_, r)| r.received()).sum();
                outcome(
                    name,
                    None,
                    gaps.is_empty(),
                    if gaps.is_empty() {
                        format!("{received} messages without sequence gaps")
                    } else {
                        gaps.join("; ")
                    },
                )
            }
            Assertion::RobotProvenance { commands } => {
                let report = audit_command_provenance(&stack.server.validation_log(), &executed);
                let incomplete = executed.iter().filter(|c| !c.completed).count();
                let mut problems = report.problems.clone();
                if incomplete > 0 {
                    problems.push(format!("{incomplete} command(s) never completed"));
                }
                if let Some(n) = commands {
                    if report.executed_commands != *n {
                        problems.push(format!("expected {n} executed command(s), got {}", report.executed_commands));
                    }
                }
                outcome(
                    name,
                    None,
                    problems.is_empty(),
                    if problems.is_empty() {
                        format!(
                            "{} executed command(s), each from one accepted request",
                            report.executed_commands
                        )
                    } else {
                        problems.join("; ")
                    },
                )
            }
            Assertion::ExactlyOneGrant { object, require_contention } => {
                let mut problems = book.problems.clone();
                let mut contested = 0;
                for ((o, at), round) in book.contested(object.as_deref()) {
                    contested += 1;
                    if round.granted.len() != 1 {
                        problems.push(format!(
                            "{o} at {at} ms: {} requesters, {} granted",
                            round.requesters.len(),
                            round.granted.len()
                        ));
                    }
                }
                for (user, r) in &live {
                    for (o, owner) in &book.owners {
                        if object.as_ref().is_some_and(|x| x != o) {
                            continue;
                        }
                        let seen = r.snapshot().and_then(|s| s.object(o)).and_then(|x| x.owner.clone());
                        if seen.as_deref() != Some(owner.as_str()) {
                            problems.push(format!("{user} sees {o} owned by {seen:?}, expected {owner}"));
                        }
                    }
                }
                if *require_contention && contested == 0 {
                    problems.push("no contested lock round occurred".into());
                }
                outcome(
                    name,
                    object.clone(),
                    problems.is_empty(),
                    if problems.is_empty() {
                        format!("{contested} contested round(s), each with exactly one grant")
                    } else {
                        problems.into_iter().take(5).collect::<Vec<_>>().join("; ")
                    },
                )
            }
            Assertion::DegradationTrace { module, expect, within_periods } => {
                let setup = scenario.core.as_ref().expect("validated");
                let trace = timed_safe_trace(&core_log, module);
                let degrees: Vec<u32> = trace.iter().map(|(_, d)| *d).collect();
                let mut problems = Vec::new();
                if &degrees != expect {
                    problems.push(format!("SAFE degrees {degrees:?}, expected {expect:?}"));
                }
                let until = setup
                    .duration_ms
                    .max(events.last().map_or(0, |e| e.at_ms));
                let c = &setup.controller;
                let crossing = predicted_crossing(&setup.profile, setup.probe_interval_ms, until, c.beta, c.high_ms);
                match (crossing, trace.first()) {
                    (Some(cross), Some((first, _))) => {
                        let limit = cross + within_periods * c.period_ms;
                        if *first < cross || *first > limit {
                            problems.push(format!(
                                "first SAFE at {first} ms, predicted crossing {cross} ms, allowed up to {limit} ms"
                            ));
                        }
                    }
                    (None, Some((first, _))) => {
                        problems.push(format!("SAFE at {first} ms but the profile never crosses {} ms", c.high_ms))
                    }
                    (Some(cross), None) if !expect.is_empty() => {
                        problems.push(format!("no SAFE signal after predicted crossing at {cross} ms"))
                    }
                    _ => {}
                }
                problems.extend(audit_signal_discipline(&core_log));
                problems.extend(audit_conservation(&core_log));
                outcome(
                    name,
                    Some(module.clone()),
                    problems.is_empty(),
                    if problems.is_empty() {
                        format!(
                            "SAFE trace {:?} at {:?} ms, predicted crossing {:?} ms",
                            degrees,
                            trace.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
                            crossing
                        )
                    } else {
                        problems.join("; ")
                    },
                )
            }
        });
    }

    if let Some(rig) = rig {
        rig.probe.stop();
    }
    let mut client_logs = Vec::new();
    let mut connected = Vec::new();
    for (i, (script, link)) in scenario.clients.iter().zip(links).enumerate() {
        let user = script.user_id.clone();
        match link {
            Some(link) => {
                client_logs.push((user.clone(), link.log().to_vec()));
                connected.push(user);
                if let Link::Tcp(c) = link {
                    c.close();
                }
            }
            None => {
                if let Some((_, log)) = departed[i].take() {
                    client_logs.push((user, log));
                }
            }
        }
    }
    let validations = stack.server.validation_log();
    Ok(ScenarioReport {
        name: scenario.name.clone(),
        seed,
        transport: options.transport,
        outcomes,
        stats,
        core_log,
        final_snapshot,
        client_logs,
        connected,
        lock_attempts: attempts,
        validations,
        executed,
    })
}
