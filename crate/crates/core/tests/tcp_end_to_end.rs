//! Session server, robot peer and relay talking over loopback TCP.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::time::{Duration, Instant};

use teleop_core::net::{
    run_robot_peer, serve_relay, serve_session, ClientError, RobotPeerHandle, TcpFrameSource, TcpSessionClient,
    TcpStreamViewer,
};
use teleop_core::relay::{Relay, RelayConfig};
use teleop_core::robot::{ReceiptStatus, RobotConfig};
use teleop_core::runtime::StreamLink;
use teleop_core::session::{LockOutcome, Platform, SceneConfig, SessionConfig, ShareableObject};
use teleop_core::wire::{Body, ErrorCode};
use teleop_core::{JointConfig, Pose, RobotServer, SessionServer};

const WAIT: Duration = Duration::from_secs(10);

fn until(what: &str, mut f: impl FnMut() -> bool) {
    let deadline = Instant::now() + WAIT;
    while !f() {
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn stack() -> (Arc<SessionServer>, Arc<RobotServer>, RobotPeerHandle, SocketAddr) {
    let server = Arc::new(SessionServer::new(SessionConfig {
        scene: SceneConfig {
            objects: vec![ShareableObject::scene("peg", Pose::from_translation([0.4, 0.0, 0.1]))],
        },
        ..SessionConfig::default()
    }));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    serve_session(Arc::clone(&server), listener);
    let robot = Arc::new(RobotServer::new(RobotConfig::default()));
    let peer = run_robot_peer(Arc::clone(&robot), addr, "robot").unwrap();
    until("robot attach", || server.has_robot());
    (server, robot, peer, addr)
}

#[test]
fn collaborate_lock_validate_and_leave() {
    let (server, robot, peer, addr) = stack();
    let mut alice = TcpSessionClient::connect(addr, "alice", Platform::Web).unwrap();
    let mut bob = TcpSessionClient::connect(addr, "bob", Platform::Vr).unwrap();

    assert!(matches!(alice.lock("peg").unwrap(), LockOutcome::Granted { .. }));
    assert_eq!(
        bob.lock("peg").unwrap(),
        LockOutcome::Denied {
            owner: Some("alice".into())
        }
    );

    let target = JointConfig([0.2, -0.3, 0.4, 0.0, 0.5, 0.1]);
    let ws = alice.update_phantom_acked(target).unwrap();
    assert!(bob.wait_for_world_seq(ws, WAIT));
    let seen = bob.replica().snapshot().unwrap().object("phantom:alice").unwrap().clone();
    assert_eq!(seen.joints(), Some(&target));

    let receipt = alice.validate().unwrap();
    assert_eq!(receipt.status, ReceiptStatus::Accepted);
    until("robot to finish", || robot.is_idle() && robot.executed_log().iter().all(|c| c.completed));
    assert!(robot.state().q.max_abs_diff(&target) < 1e-6);

    // A second login under a live name is refused without disturbing anyone.
    match TcpSessionClient::connect(addr, "bob", Platform::Web) {
        Err(ClientError::Rejected { code, .. }) => assert_eq!(code, ErrorCode::DuplicateUser),
        other => panic!("duplicate login: {:?}", other.map(|_| ())),
    }

    alice.close();
    until("alice to leave", || server.snapshot().connected_users.len() == 1);
    assert!(bob.wait_for_world_seq(server.world_seq(), WAIT));
    let released = bob
        .log()
        .iter()
        .any(|e| matches!(&e.body, Body::LockGrant(g) if g.object_id == "peg" && g.owner.is_none()));
    let departed = bob
        .log()
        .iter()
        .any(|e| matches!(&e.body, Body::Join(j) if j.user_id == "alice" && j.departed));
    assert!(released && departed);
    let snap = bob.replica().snapshot().unwrap().clone();
    assert_eq!(snap, server.snapshot());
    assert!(snap.object("phantom:alice").is_none());
    assert!(matches!(bob.lock("peg").unwrap(), LockOutcome::Granted { .. }));
    peer.stop();
}

#[test]
fn out_of_limit_phantom_is_refused() {
    let (_server, _robot, peer, addr) = stack();
    let mut alice = TcpSessionClient::connect(addr, "alice", Platform::Mobile).unwrap();
    match alice.update_phantom_acked(JointConfig([0.0, 0.0, 4.0, 0.0, 0.0, 0.0])) {
        Err(ClientError::Rejected { code, .. }) => assert_eq!(code, ErrorCode::JointLimit),
        other => panic!("expected a joint-limit error, got {other:?}"),
    }
    peer.stop();
}

#[test]
fn relay_over_tcp_delivers_and_stops_on_unsubscribe() {
    let relay = Relay::new(RelayConfig::default());
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    serve_relay(relay.clone(), listener);

    let mut source = TcpFrameSource::connect(addr, "cam1", 30.0).unwrap();
    let viewer = TcpStreamViewer::connect(addr, "viewer").unwrap();
    viewer.subscribe("cam1").unwrap();
    until("subscription", || !relay.subscriptions("cam1").is_empty());

    for _ in 0..5 {
        source.push_synthetic(2048).unwrap();
        // Stay under the queue bound so nothing is dropped.
        std::thread::sleep(Duration::from_millis(5));
    }
    until("five frames", || viewer.frames_received("cam1") == 5);

    viewer.unsubscribe("cam1").unwrap();
    for _ in 0..5 {
        source.push_synthetic(2048).unwrap();
    }
    let sample = viewer.probe(Duration::from_secs(2)).unwrap();
    assert!(!sample.timed_out);
    assert_eq!(viewer.frames_received("cam1"), 5);
    assert_eq!(viewer.errors(), 0);
}
