//! Stream relay: accepts synthetic frame streams and fans them out to subscribers.
//!
//! Each client owns one bounded delivery queue. When a queue is full the oldest
//! frame is dropped and counted, so a stalled client never blocks a source.
//! Multicast groups share one `Arc<Frame>` per pushed frame across members.
//! Latency probes travel through the same queue as frames and are never dropped.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use base64::Engine;
use crossbeam_channel::{bounded, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::runtime::LatencySample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeliveryMode {
    Unicast,
    MulticastGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub source_id: String,
    pub frame_seq: u64,
    pub ts_ms: u64,
    #[serde(serialize_with = "ser_b64", deserialize_with = "de_b64")]
    pub payload: Vec<u8>,
}

fn ser_b64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn de_b64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let text = String::deserialize(d)?;
    base64::engine::general_purpose::STANDARD
        .decode(text)
        .map_err(serde::de::Error::custom)
}

impl Frame {
    /// Synthetic payload: an 8-byte size field, then seq and ts (big-endian),
    /// then a byte pattern derived from the seq, `size` bytes in total.
    pub fn synthetic(source_id: impl Into<String>, frame_seq: u64, ts_ms: u64, size: usize) -> Self {
        let size = size.max(24);
        let mut payload = Vec::with_capacity(size);
        payload.extend_from_slice(&(size as u64).to_be_bytes());
        payload.extend_from_slice(&frame_seq.to_be_bytes());
        payload.extend_from_slice(&ts_ms.to_be_bytes());
        payload.extend((24..size).map(|i| (frame_seq as usize).wrapping_add(i) as u8));
        Self {
            source_id: source_id.into(),
            frame_seq,
            ts_ms,
            payload,
        }
    }

    /// Checks the embedded size/seq/ts header of a synthetic payload.
    pub fn verify_synthetic(&self) -> bool {
        let read = |at: usize| {
            self.payload
                .get(at..at + 8)
                .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
        };
        read(0) == Some(self.payload.len() as u64) && read(8) == Some(self.frame_seq) && read(16) == Some(self.ts_ms)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSource {
    pub source_id: String,
    pub nominal_rate: f64,
    /// Last accepted frame sequence.
    pub frame_seq: Option<u64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Subscription {
    pub client_id: String,
    pub source_id: String,
    pub mode: DeliveryMode,
    pub group_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RelayError {
    #[error("source '{0}' already registered")]
    Conflict(String),
    #[error("unknown source '{0}'")]
    UnknownSource(String),
    #[error("unknown client '{0}'")]
    UnknownClient(String),
    #[error("multicast subscription needs a group id")]
    MissingGroup,
    #[error("source '{source_id}': expected frame_seq {expected}, got {got}")]
    OutOfOrder { source_id: String, expected: u64, got: u64 },
    #[error("frame payload of {len} bytes exceeds {limit}")]
    FrameTooLarge { len: usize, limit: usize },
    #[error("client '{0}' already connected")]
    DuplicateClient(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayConfig {
    pub max_frame_bytes: usize,
    pub queue_bound: usize,
    pub probe_timeout: Duration,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            max_frame_bytes: 1 << 20,
            queue_bound: 8,
            probe_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Frame(Arc<Frame>),
    Ping { probe_id: u64 },
}

/// Per-(client, source) counters since the subscription started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Default)]
struct QueueState {
    items: VecDeque<Delivery>,
    frames: usize,
    stats: HashMap<String, StreamStats>,
    closed: bool,
}

#[derive(Debug)]
struct ClientQueue {
    bound: usize,
    state: Mutex<QueueState>,
    ready: Condvar,
}

impl ClientQueue {
    fn push_frame(&self, frame: &Arc<Frame>) {
        let mut st = self.state.lock();
        st.stats.entry(frame.source_id.clone()).or_default().sent += 1;
        if st.frames >= self.bound {
            // Drop-oldest: evict the first queued frame, keep probes.
            if let Some(pos) = st.items.iter().position(|d| matches!(d, Delivery::Frame(_))) {
                if let Some(Delivery::Frame(old)) = st.items.remove(pos) {
                    st.frames -= 1;
                    st.stats.entry(old.source_id.clone()).or_default().dropped += 1;
                }
            }
        }
        st.items.push_back(Delivery::Frame(Arc::clone(frame)));
        st.frames += 1;
        drop(st);
        self.ready.notify_one();
    }

    fn push_ping(&self, probe_id: u64) {
        self.state.lock().items.push_back(Delivery::Ping { probe_id });
        self.ready.notify_one();
    }

    fn pop(&self, timeout: Option<Duration>) -> Option<Delivery> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock();
        loop {
            if let Some(item) = st.items.pop_front() {
                if let Delivery::Frame(f) = &item {
                    st.frames -= 1;
                    st.stats.entry(f.source_id.clone()).or_default().delivered += 1;
                }
                return Some(item);
            }
            if st.closed {
                return None;
            }
            {
                let d = deadline?;
                if self.ready.wait_until(&mut st, d).timed_out() && st.items.is_empty() {
                    return None;
                }
            }
        }
    }

    /// Removes queued frames of one source; they count as dropped.
    fn purge_source(&self, source_id: &str) {
        let mut st = self.state.lock();
        let before = st.items.len();
        st.items
            .retain(|d| !matches!(d, Delivery::Frame(f) if f.source_id == source_id));
        let purged = before - st.items.len();
        st.frames -= purged;
        if let Some(s) = st.stats.get_mut(source_id) {
            s.dropped += purged as u64;
        }
    }

    fn reset_stats(&self, source_id: &str) {
        self.state.lock().stats.insert(source_id.to_string(), StreamStats::default());
    }

    fn stats(&self, source_id: &str) -> StreamStats {
        self.state.lock().stats.get(source_id).copied().unwrap_or_default()
    }

    fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelayLogEntry {
    pub source_id: String,
    pub message: String,
}

#[derive(Debug, Default)]
struct Inner {
    sources: HashMap<String, StreamSource>,
    clients: HashMap<String, Arc<ClientQueue>>,
    /// Subscriptions per source, in subscription order.
    subscriptions: HashMap<String, Vec<Subscription>>,
    probes: HashMap<u64, (String, Sender<Instant>)>,
    next_probe: u64,
    log: Vec<RelayLogEntry>,
}

#[derive(Debug)]
struct Shared {
    config: RelayConfig,
    inner: Mutex<Inner>,
}

/// Cloneable handle to one relay instance.
#[derive(Debug, Clone)]
pub struct Relay {
    shared: Arc<Shared>,
}

impl Relay {
    pub fn new(config: RelayConfig) -> Self {
        Self {
            shared: Arc::new(Shared {
                config,
                inner: Mutex::new(Inner::default()),
            }),
        }
    }

    pub fn config(&self) -> &RelayConfig {
        &self.shared.config
    }

    pub fn register_source(&self, source_id: &str, nominal_rate: f64) -> Result<(), RelayError> {
        let mut inner = self.shared.inner.lock();
        if inner.sources.contains_key(source_id) {
            return Err(RelayError::Conflict(source_id.to_string()));
        }
        inner.sources.insert(
            source_id.to_string(),
            StreamSource {
                source_id: source_id.to_string(),
                nominal_rate,
                frame_seq: None,
                flagged: false,
            },
        );
        Ok(())
    }

    pub fn source(&self, source_id: &str) -> Option<StreamSource> {
        self.shared.inner.lock().sources.get(source_id).cloned()
    }

    /// Attaches a client and hands back its receiving end.
    pub fn connect(&self, client_id: &str) -> Result<ClientEndpoint, RelayError> {
        let mut inner = self.shared.inner.lock();
        if inner.clients.contains_key(client_id) {
            return Err(RelayError::DuplicateClient(client_id.to_string()));
        }
        let queue = Arc::new(ClientQueue {
            bound: self.shared.config.queue_bound.max(1),
            state: Mutex::new(QueueState::default()),
            ready: Condvar::new(),
        });
        inner.clients.insert(client_id.to_string(), Arc::clone(&queue));
        Ok(ClientEndpoint {
            client_id: client_id.to_string(),
            queue,
            relay: self.clone(),
        })
    }

    /// Detaches a client, tearing down its subscriptions first.
    pub fn disconnect(&self, client_id: &str) {
        let mut inner = self.shared.inner.lock();
        for subs in inner.subscriptions.values_mut() {
            subs.retain(|s| s.client_id != client_id);
        }
        if let Some(q) = inner.clients.remove(client_id) {
            q.close();
        }
        inner.probes.retain(|_, (c, _)| c != client_id);
    }

    pub fn subscribe(
        &self,
        client_id: &str,
        source_id: &str,
        mode: DeliveryMode,
        group_id: Option<&str>,
    ) -> Result<Subscription, RelayError> {
        let mut inner = self.shared.inner.lock();
        if !inner.sources.contains_key(source_id) {
            return Err(RelayError::UnknownSource(source_id.to_string()));
        }
        let group_id = match (mode, group_id) {
            (DeliveryMode::MulticastGroup, None) => return Err(RelayError::MissingGroup),
            (DeliveryMode::MulticastGroup, Some(g)) => Some(g.to_string()),
            (DeliveryMode::Unicast, _) => None,
        };
        let queue = inner
            .clients
            .get(client_id)
            .cloned()
            .ok_or_else(|| RelayError::UnknownClient(client_id.to_string()))?;
        let sub = Subscription {
            client_id: client_id.to_string(),
            source_id: source_id.to_string(),
            mode,
            group_id,
        };
        let subs = inner.subscriptions.entry(source_id.to_string()).or_default();
        subs.retain(|s| s.client_id != client_id);
        queue.purge_source(source_id);
        queue.reset_stats(source_id);
        subs.push(sub.clone());
        Ok(sub)
    }

    /// Ends a subscription and discards its queued frames, so nothing from the
    /// source reaches the client after this returns.
    pub fn unsubscribe(&self, client_id: &str, source_id: &str) -> Result<(), RelayError> {
        let mut inner = self.shared.inner.lock();
        let subs = inner
            .subscriptions
            .get_mut(source_id)
            .ok_or_else(|| RelayError::UnknownSource(source_id.to_string()))?;
        subs.retain(|s| s.client_id != client_id);
        if let Some(q) = inner.clients.get(client_id) {
            q.purge_source(source_id);
        }
        Ok(())
    }

    pub fn subscriptions(&self, source_id: &str) -> Vec<Subscription> {
        self.shared
            .inner
            .lock()
            .subscriptions
            .get(source_id)
            .cloned()
            .unwrap_or_default()
    }

    /// Fans a frame out to every current subscriber; returns how many queues got it.
    pub fn push_frame(&self, frame: Frame) -> Result<usize, RelayError> {
        let mut inner = self.shared.inner.lock();
        let limit = self.shared.config.max_frame_bytes;
        let Some(source) = inner.sources.get_mut(&frame.source_id) else {
            let entry = RelayLogEntry {
                source_id: frame.source_id.clone(),
                message: "frame from unregistered source dropped".into(),
            };
            log::warn!("relay: {}: {}", entry.source_id, entry.message);
            inner.log.push(entry);
            return Err(RelayError::UnknownSource(frame.source_id));
        };
        if frame.payload.len() > limit {
            return Err(RelayError::FrameTooLarge {
                len: frame.payload.len(),
                limit,
            });
        }
        if let Some(last) = source.frame_seq {
            if frame.frame_seq != last.wrapping_add(1) {
                source.flagged = true;
                let err = RelayError::OutOfOrder {
                    source_id: frame.source_id.clone(),
                    expected: last.wrapping_add(1),
                    got: frame.frame_seq,
                };
                inner.log.push(RelayLogEntry {
                    source_id: frame.source_id.clone(),
                    message: err.to_string(),
                });
                return Err(err);
            }
        }
        source.frame_seq = Some(frame.frame_seq);
        let frame = Arc::new(frame);
        let Some(subs) = inner.subscriptions.get(&frame.source_id) else {
            return Ok(0);
        };
        let mut delivered = 0;
        for sub in subs {
            if let Some(q) = inner.clients.get(&sub.client_id) {
                q.push_frame(&frame);
                delivered += 1;
            }
        }
        Ok(delivered)
    }

    pub fn stats(&self, client_id: &str, source_id: &str) -> Option<StreamStats> {
        let inner = self.shared.inner.lock();
        inner.clients.get(client_id).map(|q| q.stats(source_id))
    }

    pub fn log(&self) -> Vec<RelayLogEntry> {
        self.shared.inner.lock().log.clone()
    }

    pub fn clients(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.shared.inner.lock().clients.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Queues a marker behind the client's pending frames. It comes out of
    /// the queue as `Delivery::Ping` with the returned id, which is never
    /// registered as a relay probe.
    pub fn enqueue_marker(&self, client_id: &str) -> Result<u64, RelayError> {
        let (queue, id) = {
            let mut inner = self.shared.inner.lock();
            let queue = inner
                .clients
                .get(client_id)
                .cloned()
                .ok_or_else(|| RelayError::UnknownClient(client_id.to_string()))?;
            inner.next_probe += 1;
            (queue, inner.next_probe)
        };
        queue.push_ping(id);
        Ok(id)
    }

    /// Round-trip probe over the client's delivery queue.
    pub fn measure_latency(&self, client_id: &str) -> Result<LatencySample, RelayError> {
        self.measure_latency_with_timeout(client_id, self.shared.config.probe_timeout)
    }

    pub fn measure_latency_with_timeout(&self, client_id: &str, timeout: Duration) -> Result<LatencySample, RelayError> {
        let (tx, rx) = bounded(1);
        let (queue, probe_id) = {
            let mut inner = self.shared.inner.lock();
            let queue = inner
                .clients
                .get(client_id)
                .cloned()
                .ok_or_else(|| RelayError::UnknownClient(client_id.to_string()))?;
            inner.next_probe += 1;
            let probe_id = inner.next_probe;
            inner.probes.insert(probe_id, (client_id.to_string(), tx));
            (queue, probe_id)
        };
        let sent = Instant::now();
        queue.push_ping(probe_id);
        let outcome = rx.recv_timeout(timeout);
        self.shared.inner.lock().probes.remove(&probe_id);
        let ts_ms = wall_clock_ms();
        Ok(match outcome {
            Ok(received) => LatencySample {
                source: client_id.to_string(),
                rtt_ms: received.saturating_duration_since(sent).as_secs_f64() * 1e3,
                ts_ms,
                timed_out: false,
            },
            Err(_) => LatencySample {
                source: client_id.to_string(),
                rtt_ms: timeout.as_secs_f64() * 1e3,
                ts_ms,
                timed_out: true,
            },
        })
    }

    fn pong(&self, probe_id: u64) {
        let probe = self.shared.inner.lock().probes.remove(&probe_id);
        if let Some((_, tx)) = probe {
            let _ = tx.send(Instant::now());
        }
    }
}

impl Default for Relay {
    fn default() -> Self {
        Self::new(RelayConfig::default())
    }
}

pub fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Receiving side of one client.
#[derive(Debug)]
pub struct ClientEndpoint {
    client_id: String,
    queue: Arc<ClientQueue>,
    relay: Relay,
}

impl ClientEndpoint {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.queue.pop(None)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        self.queue.pop(Some(timeout))
    }

    /// Answers a probe.
    pub fn pong(&self, probe_id: u64) {
        self.relay.pong(probe_id);
    }

    pub fn relay(&self) -> &Relay {
        &self.relay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relay(bound: usize) -> Relay {
        Relay::new(RelayConfig {
            queue_bound: bound,
            ..Default::default()
        })
    }

    #[test]
    fn unregistered_source_dropped_and_logged() {
        let r = relay(8);
        assert!(matches!(
            r.push_frame(Frame::synthetic("ghost", 1, 0, 32)),
            Err(RelayError::UnknownSource(_))
        ));
        assert_eq!(r.log().len(), 1);
    }

    #[test]
    fn duplicate_source_conflicts() {
        let r = relay(8);
        r.register_source("cam1", 30.0).unwrap();
        assert_eq!(r.register_source("cam1", 30.0), Err(RelayError::Conflict("cam1".into())));
        assert_eq!(r.source("cam1").unwrap().nominal_rate, 30.0);
    }

    #[test]
    fn fan_out_counts_subscribers() {
        let r = relay(8);
        r.register_source("cam", 30.0).unwrap();
        let eps: Vec<_> = (0..4).map(|i| r.connect(&format!("c{i}")).unwrap()).collect();
        for ep in &eps {
            r.subscribe(ep.client_id(), "cam", DeliveryMode::Unicast, None).unwrap();
        }
        assert_eq!(r.push_frame(Frame::synthetic("cam", 1, 0, 32)).unwrap(), 4);
        for ep in &eps {
            assert!(matches!(ep.try_recv(), Some(Delivery::Frame(f)) if f.frame_seq == 1));
            assert!(ep.try_recv().is_none());
        }
    }

    #[test]
    fn gap_flags_source() {
        let r = relay(8);
        r.register_source("cam", 30.0).unwrap();
        r.push_frame(Frame::synthetic("cam", 1, 0, 32)).unwrap();
        assert!(matches!(
            r.push_frame(Frame::synthetic("cam", 3, 0, 32)),
            Err(RelayError::OutOfOrder { expected: 2, got: 3, .. })
        ));
        assert!(r.source("cam").unwrap().flagged);
        r.push_frame(Frame::synthetic("cam", 2, 0, 32)).unwrap();
    }

    #[test]
    fn multicast_needs_group() {
        let r = relay(8);
        r.register_source("cam", 30.0).unwrap();
        r.connect("a").unwrap();
        assert_eq!(
            r.subscribe("a", "cam", DeliveryMode::MulticastGroup, None),
            Err(RelayError::MissingGroup)
        );
        assert_eq!(
            r.subscribe("a", "nope", DeliveryMode::Unicast, None),
            Err(RelayError::UnknownSource("nope".into()))
        );
    }

    #[test]
    fn no_backfill_on_late_subscribe() {
        let r = relay(8);
        r.register_source("cam", 30.0).unwrap();
        let ep = r.connect("late").unwrap();
        for seq in 1..=5 {
            r.push_frame(Frame::synthetic("cam", seq, 0, 32)).unwrap();
        }
        r.subscribe("late", "cam", DeliveryMode::Unicast, None).unwrap();
        r.push_frame(Frame::synthetic("cam", 6, 0, 32)).unwrap();
        assert!(matches!(ep.try_recv(), Some(Delivery::Frame(f)) if f.frame_seq == 6));
    }

    #[test]
    fn unsubscribe_purges_queue() {
        let r = relay(8);
        r.register_source("cam", 30.0).unwrap();
        let ep = r.connect("c").unwrap();
        r.subscribe("c", "cam", DeliveryMode::Unicast, None).unwrap();
        r.push_frame(Frame::synthetic("cam", 1, 0, 32)).unwrap();
        r.unsubscribe("c", "cam").unwrap();
        r.push_frame(Frame::synthetic("cam", 2, 0, 32)).unwrap();
        assert!(ep.try_recv().is_none());
    }

    #[test]
    fn oversize_frame_rejected() {
        let r = Relay::new(RelayConfig {
            max_frame_bytes: 64,
            ..Default::default()
        });
        r.register_source("cam", 30.0).unwrap();
        assert!(matches!(
            r.push_frame(Frame::synthetic("cam", 1, 0, 65)),
            Err(RelayError::FrameTooLarge { .. })
        ));
    }

    #[test]
    fn synthetic_payload_self_describes() {
        let f = Frame::synthetic("cam", 42, 1234, 100);
        assert_eq!(f.payload.len(), 100);
        assert!(f.verify_synthetic());
    }

    #[test]
    fn unresponsive_client_times_out() {
        let r = relay(8);
        r.connect("mute").unwrap();
        let sample = r
            .measure_latency_with_timeout("mute", Duration::from_millis(30))
            .unwrap();
        assert!(sample.timed_out);
        assert_eq!(sample.rtt_ms, 30.0);
    }
}
