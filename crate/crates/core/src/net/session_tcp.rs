//! Session server over TCP.
//!
//! The first message on a connection decides what the peer is:
//! JOIN for a user client, ROBOT_STATE HELLO for the robot server, and
//! STATE_REPORT or MODULE_SIGNAL for the module runtime.

use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::robot_tcp::RemoteRobot;
use super::{split, FrameReader, NetError, Outlet};
use crate::runtime::{ModuleStatus, SignalKind, StateReport};
use crate::session::{SessionError, SessionServer, SERVER_SENDER};
use crate::wire::{Body, Envelope, ErrorBody, ErrorCode, PongBody, RobotEvent, SeqGuard, SnapshotBody};

/// Kind of peer a connection turned out to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionPeer {
    Client,
    Robot,
    Core,
}

/// Accepts connections until the listener fails.
pub fn serve_session(server: Arc<SessionServer>, listener: TcpListener) -> JoinHandle<()> {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            match stream {
                Ok(stream) => {
                    let server = Arc::clone(&server);
                    std::thread::spawn(move || {
                        if let Err(e) = handle_connection(server, stream) {
                            log::debug!("session connection ended: {e}");
                        }
                    });
                }
                Err(e) => {
                    log::error!("accept failed: {e}");
                    break;
                }
            }
        }
    })
}

fn error_body(code: ErrorCode, message: impl Into<String>, ref_seq: Option<u64>) -> Body {
    Body::Error(ErrorBody {
        code,
        message: message.into(),
        ref_seq,
        joint: None,
    })
}

fn handle_connection(server: Arc<SessionServer>, stream: TcpStream) -> Result<SessionPeer, NetError> {
    let (mut reader, outlet) = split(stream, SERVER_SENDER)?;
    let Some(first) = reader.recv()? else {
        return Err(NetError::Closed);
    };
    match &first.body {
        Body::Join(join) if !join.departed => {
            let (user, platform) = (join.user_id.clone(), join.platform);
            client_loop(&server, reader, outlet, &first, &user, platform)?;
            Ok(SessionPeer::Client)
        }
        Body::RobotState(b) if b.event == RobotEvent::Hello => {
            robot_loop(&server, reader, outlet, &first)?;
            Ok(SessionPeer::Robot)
        }
        Body::StateReport(_) | Body::ModuleSignal(_) => {
            core_loop(&server, reader, outlet, first)?;
            Ok(SessionPeer::Core)
        }
        _ => {
            let _ = outlet.send(error_body(
                ErrorCode::Protocol,
                format!("expected JOIN, got {}", first.msg_type),
                Some(first.seq),
            ));
            outlet.shutdown();
            Err(NetError::Unexpected(first.msg_type.to_string()))
        }
    }
}

fn client_loop(
    server: &Arc<SessionServer>,
    mut reader: FrameReader,
    outlet: Outlet,
    first: &Envelope,
    user_id: &str,
    platform: crate::session::Platform,
) -> Result<(), NetError> {
    let outcome = match server.join(user_id, platform) {
        Ok(o) => o,
        Err(e) => {
            let _ = outlet.send(Body::Error(ErrorBody {
                code: e.code(),
                message: e.to_string(),
                ref_seq: Some(first.seq),
                joint: None,
            }));
            outlet.shutdown();
            return Err(NetError::Unexpected(e.to_string()));
        }
    };
    let sid = outcome.session_id.clone();
    let inbox = outcome.inbox;
    let writer_outlet = outlet.clone();
    let writer = std::thread::spawn(move || {
        for env in inbox.iter() {
            if writer_outlet.forward(&env).is_err() {
                break;
            }
        }
    });

    let mut guard = SeqGuard::default();
    let _ = guard.check(first);
    let result = loop {
        let env = match reader.recv() {
            Ok(Some(env)) => env,
            Ok(None) => break Ok(()),
            Err(e) => {
                server.send_to(&sid, error_body(ErrorCode::Protocol, e.to_string(), None));
                break Err(e);
            }
        };
        if let Err(e) = guard.check(&env) {
            server.send_to(&sid, error_body(ErrorCode::Protocol, e.to_string(), Some(env.seq)));
            break Err(e.into());
        }
        if let Err(e) = handle_client_message(server, &sid, &env) {
            server.report_error(&sid, &e, Some(env.seq));
        }
    };
    let _ = server.disconnect(&sid);
    // The outbox is gone now, so the writer drains what was queued and exits.
    let _ = writer.join();
    outlet.shutdown();
    result
}

fn handle_client_message(server: &SessionServer, sid: &str, env: &Envelope) -> Result<(), SessionError> {
    match &env.body {
        Body::PhantomUpdate(b) => server.update_phantom(sid, b.joints).map(|_| ()),
        Body::LockReq(b) if b.release => server.release_lock(sid, &b.object_id).map(|_| ()),
        Body::LockReq(b) => server.acquire_lock(sid, &b.object_id).map(|_| ()),
        Body::Validate(b) => match &b.waypoints {
            None => server.validate_phantom(sid).map(|_| ()),
            Some(w) => server.request_trajectory(sid, w.clone()).map(|_| ()),
        },
        Body::Ping(_) => {
            server.send_to(sid, Body::Pong(PongBody { ping_seq: env.seq }));
            Ok(())
        }
        Body::Snapshot(_) => {
            server.send_to(
                sid,
                Body::Snapshot(SnapshotBody {
                    session_id: Some(sid.to_string()),
                    snapshot: Some(server.snapshot()),
                }),
            );
            Ok(())
        }
        Body::Pong(_) => Ok(()),
        other => Err(SessionError::Validation(format!(
            "{} is not accepted from clients",
            other.msg_type()
        ))),
    }
}

fn robot_loop(server: &Arc<SessionServer>, mut reader: FrameReader, outlet: Outlet, hello: &Envelope) -> Result<(), NetError> {
    let remote = Arc::new(RemoteRobot::new(outlet.clone()));
    if let Body::RobotState(b) = &hello.body {
        remote.note_state(b);
    }
    server.attach_robot(Arc::clone(&remote) as Arc<dyn crate::session::RobotLink>);
    log::info!("robot server attached");
    let result = loop {
        match reader.recv() {
            Ok(Some(env)) => match env.body {
                Body::RobotState(b) => {
                    remote.note_state(&b);
                    match b.event {
                        RobotEvent::Completed => server.broadcast_robot_state(b),
                        RobotEvent::Receipt | RobotEvent::Status => remote.deliver_reply(b),
                        RobotEvent::Hello => {}
                    }
                }
                Body::Ping(_) => {
                    let _ = outlet.send(Body::Pong(PongBody { ping_seq: env.seq }));
                }
                Body::Error(e) => log::warn!("robot server error: {}", e.message),
                other => log::warn!("ignoring {} from robot server", other.msg_type()),
            },
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    server.detach_robot();
    remote.close();
    log::info!("robot server detached");
    result
}

fn core_loop(server: &Arc<SessionServer>, mut reader: FrameReader, outlet: Outlet, first: Envelope) -> Result<(), NetError> {
    let mut next = Some(first);
    loop {
        let env = match next.take() {
            Some(env) => env,
            None => match reader.recv()? {
                Some(env) => env,
                None => return Ok(()),
            },
        };
        match env.body {
            Body::StateReport(report) => server.broadcast_module_report(report),
            Body::ModuleSignal(sig) if sig.module == "trajectory" && sig.signal.kind != SignalKind::Safe => {
                let enable = sig.signal.kind == SignalKind::Load;
                let report = match server.set_robot_trajectory(enable) {
                    Ok(()) => StateReport::new(&sig.module, ModuleStatus::Ok, u32::from(enable), ""),
                    Err(e) => StateReport::new(&sig.module, ModuleStatus::Failed, 0, e.to_string()),
                };
                outlet.send(Body::StateReport(report))?;
            }
            Body::ModuleSignal(_) => {}
            Body::Ping(_) => {
                outlet.send(Body::Pong(PongBody { ping_seq: env.seq }))?;
            }
            other => {
                outlet.send(error_body(
                    ErrorCode::Protocol,
                    format!("{} is not accepted from the core", other.msg_type()),
                    Some(env.seq),
                ))?;
            }
        }
    }
}

/// Waits for a session connection's reply; used by the blocking clients.
pub(crate) fn wait_reply<T>(
    rx: &crossbeam_channel::Receiver<T>,
    timeout: Duration,
    what: &str,
) -> Result<T, NetError> {
    rx.recv_timeout(timeout).map_err(|e| match e {
        crossbeam_channel::RecvTimeoutError::Timeout => NetError::Timeout(what.to_string()),
        crossbeam_channel::RecvTimeoutError::Disconnected => NetError::Closed,
    })
}
