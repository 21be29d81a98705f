//! The module interface and the built-in modules.

use std::sync::Arc;

use super::types::{CoreSignal, ModuleStatus, SignalKind, StateReport, Variant};
use crate::prototyper::ModuleDescriptor;
use crate::relay::{DeliveryMode, Relay};
use crate::robot::RobotServer;

/// An in-process functional module. A module answers a signal with a state
/// report, or returns `None` and reports later through [`Module::poll`].
pub trait Module: Send {
    fn on_signal(&mut self, signal: CoreSignal) -> Option<StateReport>;

    /// Late reports; called by the core once per control period.
    fn poll(&mut self) -> Option<StateReport> {
        None
    }
}

/// Builds module instances for descriptors.
pub trait ModuleFactory: Send {
    fn create(&self, descriptor: &ModuleDescriptor, variant: Variant, requested_units: u32) -> Box<dyn Module>;
}

fn report_for(name: &str, requested: u32, active: u32, detail: &str) -> StateReport {
    let status = if active < requested {
        ModuleStatus::Degraded
    } else {
        ModuleStatus::Ok
    };
    StateReport::new(name, status, active, detail)
}

/// Tracks units and does nothing else.
#[derive(Debug)]
pub struct GenericModule {
    name: String,
    requested: u32,
    active: u32,
}

impl GenericModule {
    pub fn new(name: &str, requested_units: u32) -> Self {
        Self {
            name: name.to_string(),
            requested: requested_units,
            active: 0,
        }
    }
}

impl Module for GenericModule {
    fn on_signal(&mut self, signal: CoreSignal) -> Option<StateReport> {
        match (signal.kind, signal.degree) {
            (SignalKind::Load, _) => self.active = self.requested,
            (SignalKind::Unload, _) => {
                self.active = 0;
                return Some(StateReport::new(&self.name, ModuleStatus::Ok, 0, "unloaded"));
            }
            (SignalKind::Safe, Some(d)) => self.active = d.min(self.requested),
            (SignalKind::Safe, None) => {}
        }
        Some(report_for(&self.name, self.requested, self.active, ""))
    }
}

/// Subscription control for one viewer on a relay.
pub trait StreamLink: Send + Sync {
    fn subscribe(&self, source_id: &str) -> Result<(), String>;
    /// Must guarantee that no frame of the source is delivered afterwards.
    fn unsubscribe(&self, source_id: &str) -> Result<(), String>;
}

/// A viewer client on an in-process relay.
#[derive(Clone)]
pub struct LocalStreamLink {
    pub relay: Relay,
    pub client_id: String,
}

impl StreamLink for LocalStreamLink {
    fn subscribe(&self, source_id: &str) -> Result<(), String> {
        self.relay
            .subscribe(&self.client_id, source_id, DeliveryMode::Unicast, None)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn unsubscribe(&self, source_id: &str) -> Result<(), String> {
        self.relay.unsubscribe(&self.client_id, source_id).map_err(|e| e.to_string())
    }
}

/// Uses one relay stream per unit: `active_units` is the number of camera
/// sources the viewer is subscribed to.
pub struct CameraModule {
    name: String,
    link: Arc<dyn StreamLink>,
    sources: Vec<String>,
    requested: u32,
    active: u32,
}

impl CameraModule {
    /// `sources` are used in order; units beyond their count cannot be granted.
    pub fn new(name: &str, link: Arc<dyn StreamLink>, sources: Vec<String>, requested_units: u32) -> Self {
        Self {
            name: name.to_string(),
            link,
            sources,
            requested: requested_units,
            active: 0,
        }
    }

    fn set_active(&mut self, target: u32) -> Result<(), String> {
        let target = target.min(self.requested).min(self.sources.len() as u32);
        while self.active > target {
            let source = &self.sources[self.active as usize - 1];
            self.link.unsubscribe(source)?;
            self.active -= 1;
        }
        while self.active < target {
            let source = &self.sources[self.active as usize];
            self.link.subscribe(source)?;
            self.active += 1;
        }
        Ok(())
    }
}

impl Module for CameraModule {
    fn on_signal(&mut self, signal: CoreSignal) -> Option<StateReport> {
        let target = match (signal.kind, signal.degree) {
            (SignalKind::Load, _) => self.requested,
            (SignalKind::Unload, _) => 0,
            (SignalKind::Safe, Some(d)) => d,
            (SignalKind::Safe, None) => self.active,
        };
        if let Err(e) = self.set_active(target) {
            return Some(StateReport::new(&self.name, ModuleStatus::Failed, self.active, e));
        }
        if signal.kind == SignalKind::Unload {
            return Some(StateReport::new(&self.name, ModuleStatus::Ok, 0, "streams closed"));
        }
        let detail = format!("{} of {} streams", self.active, self.requested);
        Some(report_for(&self.name, self.requested, self.active, &detail))
    }
}

/// Whatever can switch trajectory execution on the robot: the robot server
/// itself, the session server in front of it, or a network link to either.
pub trait TrajectorySwitch: Send + Sync {
    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String>;
}

impl TrajectorySwitch for RobotServer {
    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String> {
        RobotServer::set_trajectory_enabled(self, enabled);
        Ok(())
    }
}

impl TrajectorySwitch for crate::session::SessionServer {
    fn set_trajectory_enabled(&self, enabled: bool) -> Result<(), String> {
        self.set_robot_trajectory(enabled).map_err(|e| e.to_string())
    }
}

/// Enables trajectory execution on the robot while loaded.
pub struct TrajectoryModule {
    name: String,
    robot: Arc<dyn TrajectorySwitch>,
}

impl TrajectoryModule {
    pub fn new(name: &str, robot: Arc<dyn TrajectorySwitch>) -> Self {
        Self {
            name: name.to_string(),
            robot,
        }
    }
}

impl Module for TrajectoryModule {
    fn on_signal(&mut self, signal: CoreSignal) -> Option<StateReport> {
        let report = |status, units, detail: &str| Some(StateReport::new(&self.name, status, units, detail));
        match signal.kind {
            SignalKind::Load => match self.robot.set_trajectory_enabled(true) {
                Ok(()) => report(ModuleStatus::Ok, 1, "trajectory execution enabled"),
                Err(e) => report(ModuleStatus::Failed, 0, &e),
            },
            SignalKind::Unload => match self.robot.set_trajectory_enabled(false) {
                Ok(()) => report(ModuleStatus::Ok, 0, "trajectory execution disabled"),
                Err(e) => report(ModuleStatus::Failed, 0, &e),
            },
            SignalKind::Safe => report(ModuleStatus::Ok, 1, ""),
        }
    }
}

/// Reports FAILED on LOAD.
#[derive(Debug)]
pub struct FailingModule(pub String);

impl Module for FailingModule {
    fn on_signal(&mut self, _signal: CoreSignal) -> Option<StateReport> {
        Some(StateReport::new(&self.0, ModuleStatus::Failed, 0, "initialization failed"))
    }
}

/// Answers LOAD and then never reports again.
#[derive(Debug)]
pub struct SilentModule {
    name: String,
    units: u32,
    loaded: bool,
}

impl SilentModule {
    pub fn new(name: &str, units: u32) -> Self {
        Self {
            name: name.to_string(),
            units,
            loaded: false,
        }
    }
}

impl Module for SilentModule {
    fn on_signal(&mut self, signal: CoreSignal) -> Option<StateReport> {
        if signal.kind == SignalKind::Load && !self.loaded {
            self.loaded = true;
            return Some(StateReport::new(&self.name, ModuleStatus::Ok, self.units, ""));
        }
        None
    }
}

/// Maps descriptor names to the built-in modules. `camera` needs a stream
/// link, `trajectory` needs a robot switch; anything else, or a built-in
/// whose dependency is missing, becomes a [`GenericModule`].
#[derive(Default, Clone)]
pub struct BuiltinFactory {
    pub streams: Option<Arc<dyn StreamLink>>,
    pub camera_sources: Vec<String>,
    pub robot: Option<Arc<dyn TrajectorySwitch>>,
}

impl BuiltinFactory {
    /// Camera sources named `cam1` to `camN`.
    pub fn camera_source_ids(n: u32) -> Vec<String> {
        (1..=n).map(|i| format!("cam{i}")).collect()
    }
}

impl ModuleFactory for BuiltinFactory {
    fn create(&self, descriptor: &ModuleDescriptor, _variant: Variant, requested_units: u32) -> Box<dyn Module> {
        let name = descriptor.name.as_str();
        match (name, &self.streams, &self.robot) {
            ("camera", Some(link), _) => Box::new(CameraModule::new(
                name,
                Arc::clone(link),
                self.camera_sources.clone(),
                requested_units,
            )),
            ("trajectory", _, Some(robot)) => Box::new(TrajectoryModule::new(name, Arc::clone(robot))),
            _ => Box::new(GenericModule::new(name, requested_units)),
        }
    }
}
