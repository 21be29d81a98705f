//! Length-prefixed canonical JSON framing for every message in the system.
//!
//! ```text
//! +---------------------+-------------------------------------------+
//! | length (u32, BE)    | UTF-8 JSON, exactly `length` bytes        |
//! +---------------------+-------------------------------------------+
//! ```
//!
//! The JSON object always has the keys `version, seq, msg_type, sender, ts_ms, body`
//! in that order with no whitespace. `msg_type` selects the body schema; bodies
//! reject unknown fields. The browser bridge carries the same JSON text without
//! the length prefix (see [`encode_json`] / [`decode_json`]).

mod body;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use body::*;

pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4;
/// Largest accepted payload (16 MiB).
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("frame of {len} bytes exceeds limit of {limit}")]
    Size { len: usize, limit: usize },
    #[error("protocol error in '{field}': {reason}")]
    Protocol { field: String, reason: String },
    #[error("unsupported protocol version {found} (supported: {supported})")]
    Version { found: u64, supported: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u8,
    pub seq: u64,
    pub msg_type: MsgType,
    pub sender: String,
    pub ts_ms: u64,
    pub body: Body,
}

impl Envelope {
    /// Builds an envelope whose `msg_type` matches its body.
    pub fn new(sender: impl Into<String>, seq: u64, ts_ms: u64, body: Body) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            seq,
            msg_type: body.msg_type(),
            sender: sender.into(),
            ts_ms,
            body,
        }
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    version: u8,
    seq: u64,
    msg_type: MsgType,
    sender: &'a str,
    ts_ms: u64,
    body: &'a Body,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    version: u64,
    seq: u64,
    msg_type: String,
    sender: String,
    ts_ms: u64,
    body: serde_json::Value,
}

/// Canonical JSON text of an envelope (no length prefix).
pub fn encode_json(msg: &Envelope) -> Result<String, WireError> {
    if msg.body.msg_type() != msg.msg_type {
        return Err(WireError::Schema(format!(
            "msg_type {} does not match a {} body",
            msg.msg_type,
            msg.body.msg_type()
        )));
    }
    msg.body.check().map_err(WireError::Schema)?;
    let out = WireOut {
        version: msg.version,
        seq: msg.seq,
        msg_type: msg.msg_type,
        sender: &msg.sender,
        ts_ms: msg.ts_ms,
        body: &msg.body,
    };
    serde_json::to_string(&out).map_err(|e| WireError::Schema(e.to_string()))
}

pub fn encode_frame(msg: &Envelope) -> Result<Vec<u8>, WireError> {
    let json = encode_json(msg)?;
    if json.len() > MAX_FRAME_LEN {
        return Err(WireError::Size {
            len: json.len(),
            limit: MAX_FRAME_LEN,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(json.as_bytes());
    Ok(out)
}

/// Pulls the field name out of serde's "missing field `x`" style messages.
fn offending_field(message: &str, fallback: &str) -> String {
    let mut parts = message.split('`');
    match (parts.next(), parts.next()) {
        (Some(_), Some(name)) if !name.is_empty() => name.to_string(),
        _ => fallback.to_string(),
    }
}

fn protocol(field: &str, reason: impl Into<String>) -> WireError {
    WireError::Protocol {
        field: field.to_string(),
        reason: reason.into(),
    }
}

pub fn decode_json(text: &str) -> Result<Envelope, WireError> {
    let raw: WireIn = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        protocol(&offending_field(&msg, "envelope"), msg)
    })?;
    if raw.version == 0 {
        return Err(protocol("version", "version must be at least 1"));
    }
    if raw.version > u64::from(PROTOCOL_VERSION) {
        return Err(WireError::Version {
            found: raw.version,
            supported: PROTOCOL_VERSION,
        });
    }
    let msg_type = MsgType::parse(&raw.msg_type)
        .ok_or_else(|| protocol("msg_type", format!("unknown msg_type '{}'", raw.msg_type)))?;
    let body = Body::from_value(msg_type, raw.body).map_err(|e| {
        let msg = e.to_string();
        protocol(&format!("body.{}", offending_field(&msg, "*")), msg)
    })?;
    body.check().map_err(|reason| protocol("body", reason))?;
    Ok(Envelope {
        version: raw.version as u8,
        seq: raw.seq,
        msg_type,
        sender: raw.sender,
        ts_ms: raw.ts_ms,
        body,
    })
}

/// Decodes one frame from the front of `bytes`.
///
/// Returns `Ok(None)` when more bytes are needed (nothing is consumed), or the
/// envelope together with the number of bytes it occupied.
pub fn decode_frame(bytes: &[u8]) -> Result<Option<(Envelope, usize)>, WireError> {
    decode_frame_with_limit(bytes, MAX_FRAME_LEN)
}

pub fn decode_frame_with_limit(bytes: &[u8], limit: usize) -> Result<Option<(Envelope, usize)>, WireError> {
    let Some(header) = bytes.first_chunk::<HEADER_LEN>() else {
        return Ok(None);
    };
    let len = u32::from_be_bytes(*header) as usize;
    if len > limit {
        return Err(WireError::Size { len, limit });
    }
    let Some(payload) = bytes.get(HEADER_LEN..HEADER_LEN + len) else {
        return Ok(None);
    };
    let text = std::str::from_utf8(payload).map_err(|e| protocol("envelope", format!("invalid UTF-8: {e}")))?;
    decode_json(text).map(|env| Some((env, HEADER_LEN + len)))
}

/// Incremental decoder for a byte stream.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    limit: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(MAX_FRAME_LEN)
    }
}

impl FrameDecoder {
    pub fn new(limit: usize) -> Self {
        Self { buf: Vec::new(), limit }
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete envelope, if any. Errors are fatal for the stream.
    pub fn next_envelope(&mut self) -> Result<Option<Envelope>, WireError> {
        match decode_frame_with_limit(&self.buf, self.limit)? {
            Some((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            None => Ok(None),
        }
    }
}

/// Enforces strictly increasing `seq` per sender on one connection.
#[derive(Debug, Default)]
pub struct SeqGuard {
    last: HashMap<String, u64>,
}

impl SeqGuard {
    pub fn check(&mut self, env: &Envelope) -> Result<(), WireError> {
        match self.last.get_mut(&env.sender) {
            Some(last) if env.seq <= *last => Err(protocol(
                "seq",
                format!("seq {} from '{}' not above {}", env.seq, env.sender, last),
            )),
            Some(last) => {
                *last = env.seq;
                Ok(())
            }
            None => {
                self.last.insert(env.sender.clone(), env.seq);
                Ok(())
            }
        }
    }
}

/// Per-sender outgoing sequence counter, starting at 1.
#[derive(Debug)]
pub struct SeqCounter {
    sender: String,
    next: u64,
}

impl SeqCounter {
    pub fn new(sender: impl Into<String>) -> Self {
        Self {
            sender: sender.into(),
            next: 1,
        }
    }

    pub fn sender(&self) -> &str {
        &self.sender
    }

    pub fn envelope(&mut self, ts_ms: u64, body: Body) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope::new(self.sender.clone(), seq, ts_ms, body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ping() -> Envelope {
        Envelope::new("c1", 1, 0, Body::Ping(PingBody {}))
    }

    #[test]
    fn ping_layout_is_canonical() {
        let bytes = encode_frame(&ping()).unwrap();
        let json = br#"{"version":1,"seq":1,"msg_type":"PING","sender":"c1","ts_ms":0,"body":{}}"#;
        assert_eq!(&bytes[..4], &(json.len() as u32).to_be_bytes());
        assert_eq!(&bytes[4..], json);
    }

    #[test]
    fn short_input_needs_more() {
        let bytes = encode_frame(&ping()).unwrap();
        assert_eq!(decode_frame(&bytes[..3]).unwrap(), None);
        assert_eq!(decode_frame(&bytes[..bytes.len() - 1]).unwrap(), None);
    }

    #[test]
    fn mismatched_type_is_schema_error() {
        let mut env = ping();
        env.msg_type = MsgType::Pong;
        assert!(matches!(encode_frame(&env), Err(WireError::Schema(_))));
    }

    #[test]
    fn oversize_prefix_rejected() {
        let mut bytes = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(decode_frame(&bytes), Err(WireError::Size { .. })));
    }

    #[test]
    fn unknown_type_names_field() {
        let text = r#"{"version":1,"seq":1,"msg_type":"NOPE","sender":"c","ts_ms":0,"body":{}}"#;
        match decode_json(text) {
            Err(WireError::Protocol { field, .. }) => assert_eq!(field, "msg_type"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"version":1,"seq":1,"msg_type":"PONG","sender":"c","ts_ms":0,"body":{}}"#;
        match decode_json(text) {
            Err(WireError::Protocol { field, .. }) => assert_eq!(field, "body.ping_seq"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn body_of_wrong_shape_rejected() {
        let text = r#"{"version":1,"seq":1,"msg_type":"PING","sender":"c","ts_ms":0,"body":{"ping_seq":3}}"#;
        assert!(matches!(decode_json(text), Err(WireError::Protocol { .. })));
    }

    #[test]
    fn future_version_rejected() {
        let text = r#"{"version":2,"seq":1,"msg_type":"PING","sender":"c","ts_ms":0,"body":{}}"#;
        assert!(matches!(decode_json(text), Err(WireError::Version { found: 2, .. })));
    }

    #[test]
    fn safe_without_degree_rejected() {
        let text = r#"{"version":1,"seq":1,"msg_type":"MODULE_SIGNAL","sender":"core","ts_ms":0,"body":{"module":"camera","signal":{"kind":"SAFE"}}}"#;
        assert!(matches!(decode_json(text), Err(WireError::Protocol { .. })));
    }

    #[test]
    fn non_finite_joints_rejected_at_encode() {
        let env = Envelope::new(
            "c",
            1,
            0,
            Body::PhantomUpdate(PhantomUpdateBody {
                object_id: "p".into(),
                joints: crate::robot::JointConfig([f64::NAN; 6]),
                world_seq: 0,
            }),
        );
        assert!(matches!(encode_frame(&env), Err(WireError::Schema(_))));
    }

    #[test]
    fn seq_guard_per_sender() {
        let mut guard = SeqGuard::default();
        let mut a = SeqCounter::new("a");
        let mut b = SeqCounter::new("b");
        let a1 = a.envelope(0, Body::Ping(PingBody {}));
        guard.check(&a1).unwrap();
        guard.check(&b.envelope(0, Body::Ping(PingBody {}))).unwrap();
        guard.check(&a.envelope(0, Body::Ping(PingBody {}))).unwrap();
        assert!(guard.check(&a1).is_err());
    }

    #[test]
    fn decoder_handles_split_input() {
        let mut stream = Vec::new();
        for seq in 1..=3 {
            stream.extend(encode_frame(&Envelope::new("c", seq, seq, Body::Ping(PingBody {}))).unwrap());
        }
        let mut dec = FrameDecoder::default();
        let mut out = Vec::new();
        for chunk in stream.chunks(7) {
            dec.extend(chunk);
            while let Some(env) = dec.next_envelope().unwrap() {
                out.push(env.seq);
            }
        }
        assert_eq!(out, vec![1, 2, 3]);
        assert_eq!(dec.buffered(), 0);
    }
}
