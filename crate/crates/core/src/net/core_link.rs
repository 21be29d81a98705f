//! Core-side connection to a session server: forwards module state reports
//! and switches trajectory execution on the robot behind the session.

use std::net::ToSocketAddrs;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver};
use parking_lot::Mutex;

use super::session_tcp::wait_reply;
use super::{connect, NetError, Outlet};
use crate::runtime::{CoreSignal, ModuleStatus, StateReport, TrajectorySwitch, CORE_SENDER};
use crate::wire::{Body, ModuleSignalBody};

const REPLY_TIMEOUT: Duration = Duration::from_secs(5);

pub struct SessionCoreLink {
    outlet: Outlet,
    request: Mutex<()>,
    replies: Receiver<StateReport>,
}

impl SessionCoreLink {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, NetError> {
        let (mut reader, outlet) = connect(addr, CORE_SENDER)?;
        let (tx, replies) = bounded(16);
        std::thread::spawn(move || {
            while let Ok(Some(env)) = reader.recv() {
                match env.body {
                    Body::StateReport(r) => {
                        let _ = tx.try_send(r);
                    }
                    Body::Error(e) => log::warn!("session refused core message: {}", e.message),
                    _ => {}
                }
            }
        });
        Ok(Self {
            outlet,
            request: Mutex::new(()),
            replies,
        })
    }

    /// Broadcast to every client through the session server.
    pub fn forward_report(&self, report: StateReport) -> Result<(), NetError> {
        self.outlet.send(Body::StateReport(report)).map(|_| ())
    }
}

impl TrajectorySwitch for SessionCoreLink {
    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String> {
        let _one_at_a_time = self.request.lock();
        while self.replies.try_recv().is_ok() {}
        let signal = if enabled { CoreSignal::LOAD } else { CoreSignal::UNLOAD };
        self.outlet
            .send(Body::ModuleSignal(ModuleSignalBody {
                module: "trajectory".into(),
                signal,
            }))
            .map_err(|e| e.to_string())?;
        let report = wait_reply(&self.replies, REPLY_TIMEOUT, "trajectory status").map_err(|e| e.to_string())?;
        match report.status {
            ModuleStatus::Failed => Err(report.detail),
            _ => Ok(()),
        }
    }
}

impl Drop for SessionCoreLink {
    fn drop(&mut self) {
        self.outlet.shutdown();
    }
}
