//! The module runtime ("core"): loads modules, exchanges LOAD/UNLOAD/SAFE
//! signals and state reports with them, and degrades degradable modules
//! when the smoothed latency gets too high.

pub mod controller;
pub mod core;
pub mod modules;
mod types;

pub use self::core::{
    audit_conservation, audit_signal_discipline, safe_trace, timed_safe_trace, Core, LoadedModule, RuntimeError,
    CORE_SENDER,
};
pub use controller::{decide_degradation, ControllerConfig, LatencyEstimator, ModuleView};
pub use modules::{
    BuiltinFactory, CameraModule, FailingModule, GenericModule, LocalStreamLink, Module, ModuleFactory, SilentModule,
    StreamLink, TrajectoryModule, TrajectorySwitch,
};
pub use types::{CoreSignal, LatencySample, Mode, ModuleStatus, SignalKind, StateReport, Variant};
