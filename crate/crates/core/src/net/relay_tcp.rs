//! Stream relay over TCP.
//!
//! A connection whose first message is SUBSCRIBE with role SOURCE registers a
//! source and then pushes FRAME messages. Anything else starting with
//! SUBSCRIBE (role CLIENT) or PING is a viewer: it receives FRAME messages for
//! its subscriptions. A viewer's PING is queued behind its pending frames and
//! answered with PONG when it reaches the front, so the measured round trip
//! covers the frame path.

use std::collections::HashMap;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::session_tcp::wait_reply;
use super::{connect, split, FrameReader, NetError, Outlet};
use crate::relay::{wall_clock_ms, Delivery, DeliveryMode, Relay, RelayError};
use crate::runtime::{LatencySample, StreamLink};
use crate::wire::{Body, Envelope, ErrorBody, ErrorCode, PingBody, PongBody, SubscribeBody, SubscribeRole};

pub const RELAY_SENDER: &str = "relay";

pub fn serve_relay(relay: Relay, listener: TcpListener) -> JoinHandle<()> {
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            match stream {
                Ok(stream) => {
                    let relay = relay.clone();
                    std::thread::spawn(move || {
                        if let Err(e) = handle_connection(relay, stream) {
                            log::debug!("relay connection ended: {e}");
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

fn relay_error(err: &RelayError, ref_seq: u64) -> Body {
    let code = match err {
        RelayError::Conflict(_) | RelayError::DuplicateClient(_) => ErrorCode::Conflict,
        RelayError::UnknownSource(_) | RelayError::UnknownClient(_) => ErrorCode::NotFound,
        RelayError::MissingGroup => ErrorCode::Validation,
        RelayError::OutOfOrder { .. } | RelayError::FrameTooLarge { .. } => ErrorCode::Protocol,
    };
    Body::Error(ErrorBody {
        code,
        message: err.to_string(),
        ref_seq: Some(ref_seq),
        joint: None,
    })
}

fn handle_connection(relay: Relay, stream: TcpStream) -> Result<(), NetError> {
    let (mut reader, outlet) = split(stream, RELAY_SENDER)?;
    let Some(first) = reader.recv()? else {
        return Err(NetError::Closed);
    };
    match &first.body {
        Body::Subscribe(b) if b.role == SubscribeRole::Source => source_loop(relay, reader, outlet, &first, b),
        Body::Subscribe(_) | Body::Ping(_) => viewer_loop(relay, reader, outlet, first),
        other => {
            let _ = outlet.send(Body::Error(ErrorBody {
                code: ErrorCode::Protocol,
                message: format!("expected SUBSCRIBE or PING, got {}", other.msg_type()),
                ref_seq: Some(first.seq),
                joint: None,
            }));
            outlet.shutdown();
            Err(NetError::Unexpected(other.msg_type().to_string()))
        }
    }
}

fn source_loop(
    relay: Relay,
    mut reader: FrameReader,
    outlet: Outlet,
    first: &Envelope,
    sub: &SubscribeBody,
) -> Result<(), NetError> {
    if let Err(e) = relay.register_source(&sub.source_id, sub.nominal_rate.unwrap_or(30.0)) {
        outlet.send(relay_error(&e, first.seq))?;
        outlet.shutdown();
        return Err(NetError::Unexpected(e.to_string()));
    }
    log::info!("source {} registered", sub.source_id);
    while let Some(env) = reader.recv()? {
        match env.body {
            Body::Frame(frame) if frame.source_id == sub.source_id => {
                if let Err(e) = relay.push_frame(frame) {
                    outlet.send(relay_error(&e, env.seq))?;
                }
            }
            Body::Frame(frame) => {
                let e = RelayError::UnknownSource(frame.source_id);
                outlet.send(relay_error(&e, env.seq))?;
            }
            Body::Ping(_) => {
                outlet.send(Body::Pong(PongBody { ping_seq: env.seq }))?;
            }
            other => log::warn!("source {} sent {}", sub.source_id, other.msg_type()),
        }
    }
    Ok(())
}

fn apply_subscription(relay: &Relay, client: &str, b: &SubscribeBody) -> Result<(), RelayError> {
    if b.unsubscribe {
        relay.unsubscribe(client, &b.source_id)
    } else {
        relay
            .subscribe(client, &b.source_id, b.mode.unwrap_or(DeliveryMode::Unicast), b.group_id.as_deref())
            .map(|_| ())
    }
}

fn viewer_loop(relay: Relay, mut reader: FrameReader, outlet: Outlet, first: Envelope) -> Result<(), NetError> {
    let client = first.sender.clone();
    let endpoint = match relay.connect(&client) {
        Ok(ep) => Arc::new(ep),
        Err(e) => {
            outlet.send(relay_error(&e, first.seq))?;
            outlet.shutdown();
            return Err(NetError::Unexpected(e.to_string()));
        }
    };
    // Viewer PING markers (marker id -> ping seq) and relay probes (ping seq -> probe id).
    let markers: Arc<Mutex<HashMap<u64, u64>>> = Arc::default();
    let probes: Arc<Mutex<HashMap<u64, u64>>> = Arc::default();
    let done = Arc::new(AtomicBool::new(false));

    let writer = {
        let endpoint = Arc::clone(&endpoint);
        let outlet = outlet.clone();
        let markers = Arc::clone(&markers);
        let probes = Arc::clone(&probes);
        let done = Arc::clone(&done);
        std::thread::spawn(move || {
            while !done.load(Ordering::SeqCst) {
                let Some(item) = endpoint.recv_timeout(Duration::from_millis(100)) else {
                    continue;
                };
                let sent = match item {
                    Delivery::Frame(f) => outlet.send(Body::Frame((*f).clone())).map(|_| ()),
                    Delivery::Ping { probe_id } => {
                        let ping_seq = markers.lock().remove(&probe_id);
                        match ping_seq {
                            Some(ping_seq) => outlet.send(Body::Pong(PongBody { ping_seq })).map(|_| ()),
                            None => {
                                let mut probes = probes.lock();
                                outlet.send(Body::Ping(PingBody {})).map(|seq| {
                                    probes.insert(seq, probe_id);
                                })
                            }
                        }
                    }
                };
                if sent.is_err() {
                    break;
                }
            }
        })
    };

    let handle = |env: Envelope| -> Result<(), NetError> {
        match &env.body {
            Body::Subscribe(b) if b.role == SubscribeRole::Client => {
                if let Err(e) = apply_subscription(&relay, &client, b) {
                    outlet.send(relay_error(&e, env.seq))?;
                }
            }
            Body::Ping(_) => {
                let mut markers = markers.lock();
                match relay.enqueue_marker(&client) {
                    Ok(id) => {
                        markers.insert(id, env.seq);
                    }
                    Err(e) => {
                        drop(markers);
                        outlet.send(relay_error(&e, env.seq))?;
                    }
                }
            }
            Body::Pong(p) => {
                if let Some(probe_id) = probes.lock().remove(&p.ping_seq) {
                    endpoint.pong(probe_id);
                }
            }
            other => log::warn!("viewer {client} sent {}", other.msg_type()),
        }
        Ok(())
    };
    let mut result = handle(first);
    while result.is_ok() {
        match reader.recv() {
            Ok(Some(env)) => result = handle(env),
            Ok(None) => break,
            Err(e) => result = Err(e),
        }
    }
    done.store(true, Ordering::SeqCst);
    relay.disconnect(&client);
    let _ = writer.join();
    outlet.shutdown();
    result
}

/// Viewer connection from another process, usable as the camera module's
/// stream link. Frame deliveries are counted per source.
pub struct TcpStreamViewer {
    outlet: Outlet,
    pongs: Receiver<(u64, Instant)>,
    frames: Arc<Mutex<HashMap<String, u64>>>,
    errors: Arc<AtomicU64>,
    client_id: String,
}

impl TcpStreamViewer {
    /// Connects and announces the viewer with a first PING.
    pub fn connect(addr: impl ToSocketAddrs, client_id: &str) -> Result<Self, NetError> {
        let (reader, outlet) = connect(addr, client_id)?;
        let (tx, pongs) = unbounded();
        let frames: Arc<Mutex<HashMap<String, u64>>> = Arc::default();
        let errors = Arc::new(AtomicU64::new(0));
        spawn_viewer_reader(reader, tx, Arc::clone(&frames), Arc::clone(&errors));
        let viewer = Self {
            outlet,
            pongs,
            frames,
            errors,
            client_id: client_id.to_string(),
        };
        viewer.probe(Duration::from_secs(2))?;
        Ok(viewer)
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn frames_received(&self, source_id: &str) -> u64 {
        self.frames.lock().get(source_id).copied().unwrap_or(0)
    }

    pub fn errors(&self) -> u64 {
        self.errors.load(Ordering::SeqCst)
    }

    /// Round trip of a PING through this viewer's delivery queue.
    pub fn probe(&self, timeout: Duration) -> Result<LatencySample, NetError> {
        while self.pongs.try_recv().is_ok() {}
        let sent = Instant::now();
        let seq = self.outlet.send(Body::Ping(PingBody {}))?;
        let deadline = sent + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match wait_reply(&self.pongs, left, "PONG") {
                Ok((ping_seq, at)) if ping_seq == seq => {
                    return Ok(LatencySample {
                        source: self.client_id.clone(),
                        rtt_ms: at.duration_since(sent).as_secs_f64() * 1e3,
                        ts_ms: wall_clock_ms(),
                        timed_out: false,
                    })
                }
                Ok(_) => continue,
                Err(NetError::Timeout(_)) => {
                    return Ok(LatencySample {
                        source: self.client_id.clone(),
                        rtt_ms: timeout.as_secs_f64() * 1e3,
                        ts_ms: wall_clock_ms(),
                        timed_out: true,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn send_subscribe(&self, source_id: &str, unsubscribe: bool) -> Result<(), String> {
        self.outlet
            .send(Body::Subscribe(SubscribeBody {
                role: SubscribeRole::Client,
                source_id: source_id.to_string(),
                mode: Some(DeliveryMode::Unicast),
                group_id: None,
                nominal_rate: None,
                unsubscribe,
            }))
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

impl StreamLink for TcpStreamViewer {
    fn subscribe(&self, source_id: &str) -> Result<(), String> {
        self.send_subscribe(source_id, false)
    }

    /// The relay purges the source's queued frames when it processes this;
    /// a probe afterwards confirms nothing from the source is still in flight.
    fn unsubscribe(&self, source_id: &str) -> Result<(), String> {
        self.send_subscribe(source_id, true)?;
        self.probe(Duration::from_secs(2)).map(|_| ()).map_err(|e| e.to_string())
    }
}

fn spawn_viewer_reader(
    mut reader: FrameReader,
    pongs: Sender<(u64, Instant)>,
    frames: Arc<Mutex<HashMap<String, u64>>>,
    errors: Arc<AtomicU64>,
) {
    std::thread::spawn(move || {
        while let Ok(Some(env)) = reader.recv() {
            match env.body {
                Body::Pong(p) => {
                    let _ = pongs.send((p.ping_seq, Instant::now()));
                }
                Body::Frame(f) => *frames.lock().entry(f.source_id).or_default() += 1,
                Body::Error(e) => {
                    errors.fetch_add(1, Ordering::SeqCst);
                    log::warn!("relay error: {}", e.message);
                }
                _ => {}
            }
        }
    });
}

/// Frame source connection from another process.
pub struct TcpFrameSource {
    outlet: Outlet,
    source_id: String,
    next_seq: u64,
}

impl TcpFrameSource {
    pub fn connect(addr: impl ToSocketAddrs, source_id: &str, nominal_rate: f64) -> Result<Self, NetError> {
        let (reader, outlet) = connect(addr, source_id)?;
        outlet.send(Body::Subscribe(SubscribeBody {
            role: SubscribeRole::Source,
            source_id: source_id.to_string(),
            mode: None,
            group_id: None,
            nominal_rate: Some(nominal_rate),
            unsubscribe: false,
        }))?;
        let errors = Arc::new(AtomicU64::new(0));
        spawn_viewer_reader(reader, unbounded().0, Arc::default(), errors);
        Ok(Self {
            outlet,
            source_id: source_id.to_string(),
            next_seq: 1,
        })
    }

    pub fn push_synthetic(&mut self, size: usize) -> Result<u64, NetError> {
        let seq = self.next_seq;
        self.next_seq += 1;
        let frame = crate::relay::Frame::synthetic(&self.source_id, seq, wall_clock_ms(), size);
        self.outlet.send(Body::Frame(frame))?;
        Ok(seq)
    }
}
