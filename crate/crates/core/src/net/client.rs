//! Blocking user client for the session server: requests wait for their
//! reply, and everything received on the way is applied to a local replica.

use std::net::ToSocketAddrs;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver};
use thiserror::Error;

use super::{connect, NetError, Outlet};
use crate::robot::{CommandReceipt, JointConfig};
use crate::session::{LockOutcome, Platform, Replica};
use crate::wire::{
    Body, Envelope, ErrorCode, JoinBody, LockReqBody, PhantomUpdateBody, PingBody, SnapshotBody, ValidateBody,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("server rejected request ({code:?}): {message}")]
    Rejected { code: ErrorCode, message: String },
}

pub struct TcpSessionClient {
    user_id: String,
    session_id: String,
    outlet: Outlet,
    inbox: Receiver<Envelope>,
    replica: Replica,
    log: Vec<Envelope>,
    timeout: Duration,
}

impl TcpSessionClient {
    pub fn connect(addr: impl ToSocketAddrs, user_id: &str, platform: Platform) -> Result<Self, ClientError> {
        let (mut reader, outlet) = connect(addr, user_id)?;
        let (tx, inbox) = unbounded();
        std::thread::spawn(move || {
            while let Ok(Some(env)) = reader.recv() {
                if tx.send(env).is_err() {
                    break;
                }
            }
        });
        let mut client = Self {
            user_id: user_id.to_string(),
            session_id: String::new(),
            outlet,
            inbox,
            replica: Replica::new(),
            log: Vec::new(),
            timeout: Duration::from_secs(10),
        };
        let seq = client.outlet.send(Body::Join(JoinBody {
            user_id: user_id.to_string(),
            platform,
            phantom: None,
            world_seq: None,
            departed: false,
        }))?;
        let reply = client.wait(seq, |b| matches!(b, Body::Snapshot(s) if s.session_id.is_some()))?;
        if let Body::Snapshot(SnapshotBody {
            session_id: Some(sid), ..
        }) = reply
        {
            client.session_id = sid;
        }
        Ok(client)
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    /// Every envelope received so far, in arrival order.
    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    fn take(&mut self, env: Envelope) -> Envelope {
        self.replica.apply(&env);
        self.log.push(env.clone());
        env
    }

    /// Reads until `done` matches a message or an ERROR answers `seq`.
    fn wait(&mut self, seq: u64, done: impl Fn(&Body) -> bool) -> Result<Body, ClientError> {
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let env = self.inbox.recv_timeout(left).map_err(|e| match e {
                crossbeam_channel::RecvTimeoutError::Timeout => NetError::Timeout(format!("reply to seq {seq}")),
                crossbeam_channel::RecvTimeoutError::Disconnected => NetError::Closed,
            })?;
            let env = self.take(env);
            match env.body {
                Body::Error(e) if e.ref_seq == Some(seq) => {
                    return Err(ClientError::Rejected {
                        code: e.code,
                        message: e.message,
                    })
                }
                body if done(&body) => return Ok(body),
                _ => {}
            }
        }
    }

    /// Applies whatever has arrived, waiting up to `timeout` for the first message.
    pub fn pump(&mut self, timeout: Duration) -> usize {
        let mut n = 0;
        if let Ok(env) = self.inbox.recv_timeout(timeout) {
            self.take(env);
            n += 1;
        }
        while let Ok(env) = self.inbox.try_recv() {
            self.take(env);
            n += 1;
        }
        n
    }

    /// Pumps until the replica has seen `world_seq`.
    pub fn wait_for_world_seq(&mut self, world_seq: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.replica.world_seq() < world_seq {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            self.pump(left.min(Duration::from_millis(50)));
        }
        true
    }

    /// Fire-and-forget; returns the request's envelope seq. The acknowledgment
    /// arrives later as a PHANTOM_UPDATE, a rejection as an ERROR naming that seq.
    pub fn update_phantom(&mut self, q: JointConfig) -> Result<u64, ClientError> {
        let object_id = crate::session::phantom_id(&self.user_id);
        Ok(self.outlet.send(Body::PhantomUpdate(PhantomUpdateBody {
            object_id,
            joints: q,
            world_seq: 0,
        }))?)
    }

    /// Sends an update and waits for its acknowledgment; returns the world_seq
    /// the server assigned.
    pub fn update_phantom_acked(&mut self, q: JointConfig) -> Result<u64, ClientError> {
        let object_id = crate::session::phantom_id(&self.user_id);
        let seq = self.update_phantom(q)?;
        let reply = self.wait(seq, |b| matches!(b, Body::PhantomUpdate(u) if u.object_id == object_id && u.joints == q))?;
        match reply {
            Body::PhantomUpdate(u) => Ok(u.world_seq),
            _ => unreachable!("wait only returns matching bodies"),
        }
    }

    pub fn lock(&mut self, object_id: &str) -> Result<LockOutcome, ClientError> {
        let seq = self.outlet.send(Body::LockReq(LockReqBody {
            object_id: object_id.to_string(),
            release: false,
        }))?;
        let me = self.user_id.clone();
        let reply = self.wait(seq, |b| match b {
            Body::LockGrant(g) => g.object_id == object_id && g.owner.as_deref() == Some(me.as_str()),
            Body::LockDeny(d) => d.object_id == object_id,
            _ => false,
        })?;
        Ok(match reply {
            Body::LockGrant(g) => LockOutcome::Granted { world_seq: g.world_seq },
            Body::LockDeny(d) => LockOutcome::Denied { owner: d.owner },
            _ => unreachable!("wait only returns matching bodies"),
        })
    }

    pub fn release(&mut self, object_id: &str) -> Result<u64, ClientError> {
        let seq = self.outlet.send(Body::LockReq(LockReqBody {
            object_id: object_id.to_string(),
            release: true,
        }))?;
        let reply = self.wait(seq, |b| matches!(b, Body::LockGrant(g) if g.object_id == object_id && g.owner.is_none()))?;
        match reply {
            Body::LockGrant(g) => Ok(g.world_seq),
            _ => unreachable!("wait only returns matching bodies"),
        }
    }

    pub fn validate(&mut self) -> Result<CommandReceipt, ClientError> {
        self.send_validate(None)
    }

    pub fn trajectory(&mut self, waypoints: Vec<JointConfig>) -> Result<CommandReceipt, ClientError> {
        self.send_validate(Some(waypoints))
    }

    fn send_validate(&mut self, waypoints: Option<Vec<JointConfig>>) -> Result<CommandReceipt, ClientError> {
        let seq = self.outlet.send(Body::Validate(ValidateBody {
            waypoints,
            receipt: None,
        }))?;
        match self.wait(seq, |b| matches!(b, Body::Validate(v) if v.receipt.is_some()))? {
            Body::Validate(ValidateBody {
                receipt: Some(receipt), ..
            }) => Ok(receipt),
            _ => unreachable!("wait only returns matching bodies"),
        }
    }

    pub fn ping(&mut self) -> Result<Duration, ClientError> {
        let start = Instant::now();
        let seq = self.outlet.send(Body::Ping(PingBody {}))?;
        self.wait(seq, |b| matches!(b, Body::Pong(p) if p.ping_seq == seq))?;
        Ok(start.elapsed())
    }

    /// Closes the connection; the server treats it as a leave.
    pub fn close(self) {
        self.outlet.shutdown();
    }
}
