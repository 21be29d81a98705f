//! TCP transport: framed connections and the session, robot and relay
//! network servers built on them.

pub mod client;
pub mod core_link;
pub mod relay_tcp;
pub mod robot_tcp;
pub mod session_tcp;

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::relay::wall_clock_ms;
use crate::wire::{encode_frame, Body, Envelope, FrameDecoder, SeqCounter, WireError, MAX_FRAME_LEN};

pub use client::{ClientError, TcpSessionClient};
pub use core_link::SessionCoreLink;
pub use relay_tcp::{serve_relay, TcpFrameSource, TcpStreamViewer};
pub use robot_tcp::{run_robot_peer, RemoteRobot, RobotPeerHandle};
pub use session_tcp::{serve_session, SessionPeer};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("unexpected message: {0}")]
    Unexpected(String),
}

/// Reading half of a framed connection.
pub struct FrameReader {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new(stream: TcpStream) -> Self {
        Self {
            stream,
            decoder: FrameDecoder::new(MAX_FRAME_LEN),
            buf: vec![0; 64 * 1024],
        }
    }

    /// Next envelope; `Ok(None)` on a clean end of stream between frames.
    pub fn recv(&mut self) -> Result<Option<Envelope>, NetError> {
        loop {
            if let Some(env) = self.decoder.next_envelope()? {
                return Ok(Some(env));
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return if self.decoder.buffered() == 0 {
                    Ok(None)
                } else {
                    Err(NetError::Closed)
                };
            }
            self.decoder.extend(&self.buf[..n]);
        }
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }
}

struct OutletInner {
    stream: TcpStream,
    seq: SeqCounter,
}

/// Writing half, shareable between threads. Assigns this side's sequence
/// numbers so that concurrent writers still emit a strictly increasing seq.
#[derive(Clone)]
pub struct Outlet {
    inner: Arc<Mutex<OutletInner>>,
}

impl Outlet {
    pub fn new(stream: TcpStream, sender: &str) -> Self {
        Self {
            inner: Arc::new(Mutex::new(OutletInner {
                stream,
                seq: SeqCounter::new(sender),
            })),
        }
    }

    /// Sends a body and returns the seq it went out with.
    pub fn send(&self, body: Body) -> Result<u64, NetError> {
        let mut inner = self.inner.lock();
        let env = inner.seq.envelope(wall_clock_ms(), body);
        let bytes = encode_frame(&env)?;
        inner.stream.write_all(&bytes)?;
        Ok(env.seq)
    }

    /// Forwards an envelope built elsewhere, keeping its seq and sender.
    pub fn forward(&self, env: &Envelope) -> Result<(), NetError> {
        let bytes = encode_frame(env)?;
        self.inner.lock().stream.write_all(&bytes)?;
        Ok(())
    }

    pub fn shutdown(&self) {
        let _ = self.inner.lock().stream.shutdown(Shutdown::Both);
    }
}

/// Opens a connection and splits it into reader and outlet.
pub fn connect(addr: impl ToSocketAddrs, sender: &str) -> Result<(FrameReader, Outlet), NetError> {
    let stream = TcpStream::connect(addr)?;
    split(stream, sender)
}

pub fn split(stream: TcpStream, sender: &str) -> Result<(FrameReader, Outlet), NetError> {
    stream.set_nodelay(true)?;
    let write_half = stream.try_clone()?;
    Ok((FrameReader::new(stream), Outlet::new(write_half, sender)))
}
