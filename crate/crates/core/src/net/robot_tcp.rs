//! Robot server over TCP: the robot process connects to the session server,
//! announces itself with ROBOT_STATE HELLO, then executes ROBOT_CMD messages.

use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use parking_lot::Mutex;

use super::session_tcp::wait_reply;
use super::{connect, NetError, Outlet};
use crate::robot::{CommandOrigin, CommandReceipt, JointConfig, RobotNotice, RobotServer};
use crate::runtime::{CoreSignal, SignalKind};
use crate::session::RobotLink;
use crate::wire::{Body, ModuleSignalBody, PongBody, RobotCmdBody, RobotEvent, RobotStateBody};

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

/// Session-side proxy for a robot server on the other end of a connection.
/// Requests are serialized, so each reply belongs to the one outstanding request.
pub struct RemoteRobot {
    outlet: Outlet,
    request: Mutex<()>,
    reply_tx: Sender<RobotStateBody>,
    reply_rx: Receiver<RobotStateBody>,
    last_q: Mutex<Option<JointConfig>>,
}

impl RemoteRobot {
    pub fn new(outlet: Outlet) -> Self {
        let (reply_tx, reply_rx) = bounded(16);
        Self {
            outlet,
            request: Mutex::new(()),
            reply_tx,
            reply_rx,
            last_q: Mutex::new(None),
        }
    }

    pub(crate) fn note_state(&self, body: &RobotStateBody) {
        if let Some(state) = &body.state {
            *self.last_q.lock() = Some(state.q);
        }
    }

    pub(crate) fn deliver_reply(&self, body: RobotStateBody) {
        if self.reply_tx.try_send(body).is_err() {
            log::warn!("dropping unsolicited robot reply");
        }
    }

    pub(crate) fn close(&self) {
        self.outlet.shutdown();
    }

    fn request(&self, body: Body, what: &str) -> Result<RobotStateBody, String> {
        let _one_at_a_time = self.request.lock();
        while self.reply_rx.try_recv().is_ok() {}
        self.outlet.send(body).map_err(|e| e.to_string())?;
        wait_reply(&self.reply_rx, REPLY_TIMEOUT, what).map_err(|e| e.to_string())
    }
}

impl RobotLink for RemoteRobot {
    fn submit(&self, origin: CommandOrigin, waypoints: Vec<JointConfig>) -> Result<CommandReceipt, String> {
        let reply = self.request(Body::RobotCmd(RobotCmdBody { origin, waypoints }), "robot receipt")?;
        reply.receipt.ok_or_else(|| "robot reply without a receipt".to_string())
    }

    fn current_config(&self) -> Option<JointConfig> {
        *self.last_q.lock()
    }

    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String> {
        let signal = if enabled { CoreSignal::LOAD } else { CoreSignal::UNLOAD };
        self.request(
            Body::ModuleSignal(ModuleSignalBody {
                module: "trajectory".into(),
                signal,
            }),
            "robot status",
        )
        .map(|_| ())
    }
}

/// Running robot peer; dropping it does not stop the threads, call [`RobotPeerHandle::stop`].
pub struct RobotPeerHandle {
    stop: Arc<AtomicBool>,
    outlet: Outlet,
    threads: Vec<JoinHandle<()>>,
}

impl RobotPeerHandle {
    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.outlet.shutdown();
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the session server closes the connection.
    pub fn wait(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn state_body(robot: &RobotServer, event: RobotEvent) -> RobotStateBody {
    RobotStateBody {
        event,
        command_id: None,
        receipt: None,
        state: Some(robot.state()),
    }
}

/// Connects `robot` to a session server and runs its real-time tick loop.
pub fn run_robot_peer(robot: Arc<RobotServer>, addr: impl ToSocketAddrs, sender: &str) -> Result<RobotPeerHandle, NetError> {
    let (mut reader, outlet) = connect(addr, sender)?;
    let notices = robot.notices();
    outlet.send(Body::RobotState(state_body(&robot, RobotEvent::Hello)))?;
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();

    {
        let robot = Arc::clone(&robot);
        let stop = Arc::clone(&stop);
        threads.push(std::thread::spawn(move || {
            let dt_ms = robot.config().tick_ms.max(1);
            let period = Duration::from_millis(dt_ms);
            let mut next = Instant::now() + period;
            while !stop.load(Ordering::SeqCst) {
                if let Err(e) = robot.tick(dt_ms as f64 / 1000.0) {
                    log::error!("robot tick failed: {e}");
                }
                let now = Instant::now();
                if next > now {
                    std::thread::sleep(next - now);
                }
                next += period;
            }
        }));
    }
    {
        let outlet = outlet.clone();
        let stop = Arc::clone(&stop);
        threads.push(std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match notices.recv_timeout(Duration::from_millis(100)) {
                    Ok(RobotNotice::Completed { command_id, state }) => {
                        let body = RobotStateBody {
                            event: RobotEvent::Completed,
                            command_id: Some(command_id),
                            receipt: None,
                            state: Some(state),
                        };
                        if outlet.send(Body::RobotState(body)).is_err() {
                            break;
                        }
                    }
                    Err(crossbeam_channel::RecvTimeoutError::Timeout) => {}
                    Err(_) => break,
                }
            }
        }));
    }
    {
        let outlet = outlet.clone();
        let stop = Arc::clone(&stop);
        threads.push(std::thread::spawn(move || {
            loop {
                let env = match reader.recv() {
                    Ok(Some(env)) => env,
                    Ok(None) | Err(_) => break,
                };
                let reply = match env.body {
                    Body::RobotCmd(cmd) => {
                        let receipt = robot.submit(cmd.origin, cmd.waypoints);
                        Body::RobotState(RobotStateBody {
                            event: RobotEvent::Receipt,
                            command_id: receipt.command_id,
                            receipt: Some(receipt),
                            state: Some(robot.state()),
                        })
                    }
                    Body::ModuleSignal(sig) if sig.module == "trajectory" => {
                        robot.set_trajectory_enabled(sig.signal.kind == SignalKind::Load);
                        Body::RobotState(state_body(&robot, RobotEvent::Status))
                    }
                    Body::Ping(_) => Body::Pong(PongBody { ping_seq: env.seq }),
                    other => {
                        log::warn!("robot ignoring {}", other.msg_type());
                        continue;
                    }
                };
                if outlet.send(reply).is_err() {
                    break;
                }
            }
            stop.store(true, Ordering::SeqCst);
        }));
    }
    Ok(RobotPeerHandle { stop, outlet, threads })
}
