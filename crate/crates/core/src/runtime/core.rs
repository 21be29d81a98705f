//! The core: module loader, signal log, and the degradation control loop.

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

use super::controller::{decide_degradation, ControllerConfig, LatencyEstimator, ModuleView};
use super::modules::{Module, ModuleFactory};
use super::types::{CoreSignal, LatencySample, Mode, ModuleStatus, SignalKind, StateReport, Variant};
use crate::prototyper::{AppModule, AppSpec, ModuleDescriptor};
use crate::wire::{encode_json, Body, Envelope, ModuleSignalBody, SeqCounter};

pub const CORE_SENDER: &str = "core";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("module '{module}' has no {variant} variant")]
    Variant { module: String, variant: Variant },
    #[error("module '{0}' is already loaded")]
    Conflict(String),
    #[error("module '{0}' is not loaded")]
    NotFound(String),
    #[error("module '{0}' is not degradable")]
    Capability(String),
    #[error("degree {degree} out of range 0..={max} for module '{module}'")]
    Range { module: String, degree: u32, max: u32 },
    #[error("requested units {units} exceed max-units {max} for module '{module}'")]
    Units { module: String, units: u32, max: u32 },
}

/// Public view of one loaded module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedModule {
    pub descriptor: ModuleDescriptor,
    pub variant: Variant,
    pub mode: Mode,
    pub requested_units: u32,
    pub granted_units: u32,
    pub last_report: StateReport,
}

struct Slot {
    info: LoadedModule,
    instance: Box<dyn Module>,
    /// Time a signal went unanswered, if one is outstanding.
    awaiting_since: Option<u64>,
    seq: SeqCounter,
}

/// Single-threaded state machine. Callers feed latency samples and control
/// ticks in time order; every signal and report lands in the signal log.
pub struct Core {
    config: ControllerConfig,
    factory: Box<dyn ModuleFactory>,
    slots: Vec<Slot>,
    priority: Vec<String>,
    estimator: LatencyEstimator,
    now_ms: u64,
    seq: SeqCounter,
    log: Vec<Envelope>,
}

impl Core {
    pub fn new(config: ControllerConfig, factory: Box<dyn ModuleFactory>) -> Self {
        Self {
            estimator: LatencyEstimator::new(config.beta),
            config,
            factory,
            slots: Vec::new(),
            priority: Vec::new(),
            now_ms: 0,
            seq: SeqCounter::new(CORE_SENDER),
            log: Vec::new(),
        }
    }

    /// Starts from an application spec, loading every module in order.
    /// Reports for modules that failed to load are returned alongside.
    pub fn from_app(
        spec: &AppSpec,
        config: ControllerConfig,
        factory: Box<dyn ModuleFactory>,
    ) -> Result<(Self, Vec<StateReport>), RuntimeError> {
        let mut core = Self::new(config, factory);
        core.priority = spec.degradation_priority.clone();
        let mut reports = Vec::new();
        for m in &spec.modules {
            reports.push(core.load_entry(m)?);
        }
        Ok((core, reports))
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn set_priority(&mut self, priority: Vec<String>) {
        self.priority = priority;
    }

    pub fn priority(&self) -> &[String] {
        &self.priority
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Moves the core clock forward; time never goes backwards.
    pub fn set_time(&mut self, now_ms: u64) {
        self.now_ms = self.now_ms.max(now_ms);
    }

    pub fn estimate(&self) -> Option<f64> {
        self.estimator.estimate()
    }

    pub fn modules(&self) -> Vec<LoadedModule> {
        self.slots.iter().map(|s| s.info.clone()).collect()
    }

    pub fn module(&self, name: &str) -> Option<&LoadedModule> {
        self.slots.iter().find(|s| s.info.descriptor.name == name).map(|s| &s.info)
    }

    pub fn signal_log(&self) -> &[Envelope] {
        &self.log
    }

    /// Writes the signal log as one JSON envelope per line.
    pub fn write_signal_log(&self, mut out: impl Write) -> std::io::Result<()> {
        for env in &self.log {
            let line = encode_json(env).map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Loads with the descriptor's default units.
    pub fn load_module(&mut self, descriptor: &ModuleDescriptor, variant: Variant) -> Result<StateReport, RuntimeError> {
        self.load(descriptor, variant, descriptor.default_units)
    }

    pub fn load_entry(&mut self, entry: &AppModule) -> Result<StateReport, RuntimeError> {
        self.load(&entry.descriptor, entry.variant, entry.requested_units)
    }

    /// Adds a module to a running application. Other modules are not
    /// signalled, so nothing in flight for them is touched. A degradable
    /// module missing from the priority list is appended to it.
    pub fn hot_add(
        &mut self,
        descriptor: &ModuleDescriptor,
        variant: Variant,
        requested_units: Option<u32>,
    ) -> Result<StateReport, RuntimeError> {
        let report = self.load(descriptor, variant, requested_units.unwrap_or(descriptor.default_units))?;
        if descriptor.degradable
            && report.status != ModuleStatus::Failed
            && !self.priority.contains(&descriptor.name)
        {
            self.priority.push(descriptor.name.clone());
        }
        Ok(report)
    }

    fn load(&mut self, descriptor: &ModuleDescriptor, variant: Variant, units: u32) -> Result<StateReport, RuntimeError> {
        let name = descriptor.name.clone();
        if !descriptor.supports(variant) {
            return Err(RuntimeError::Variant { module: name, variant });
        }
        if self.slots.iter().any(|s| s.info.descriptor.name == name) {
            return Err(RuntimeError::Conflict(name));
        }
        if units > descriptor.max_units {
            return Err(RuntimeError::Units {
                module: name,
                units,
                max: descriptor.max_units,
            });
        }
        let mut instance = self.factory.create(descriptor, variant, units);
        let mut seq = SeqCounter::new(name.clone());
        self.log_signal(&name, CoreSignal::LOAD);
        let report = instance
            .on_signal(CoreSignal::LOAD)
            .unwrap_or_else(|| StateReport::new(&name, ModuleStatus::Failed, 0, "no state report on LOAD"));
        self.log_report(&mut seq, &report);
        if report.status == ModuleStatus::Failed {
            log::warn!("module {name} failed to load: {}", report.detail);
            return Ok(report);
        }
        self.slots.push(Slot {
            info: LoadedModule {
                descriptor: descriptor.clone(),
                variant,
                mode: Mode::ClassicMode,
                requested_units: units,
                granted_units: units,
                last_report: report.clone(),
            },
            instance,
            awaiting_since: None,
            seq,
        });
        Ok(report)
    }

    pub fn unload_module(&mut self, name: &str) -> Result<StateReport, RuntimeError> {
        let idx = self.index(name)?;
        self.log_signal(name, CoreSignal::UNLOAD);
        let mut slot = self.slots.remove(idx);
        let report = slot
            .instance
            .on_signal(CoreSignal::UNLOAD)
            .unwrap_or_else(|| StateReport::new(name, ModuleStatus::Failed, 0, "no state report on UNLOAD"));
        self.log_report(&mut slot.seq, &report);
        Ok(report)
    }

    /// Sends SAFE. Returns the module's report, or `None` when the module
    /// has not answered yet.
    pub fn send_safe(&mut self, name: &str, degree: u32) -> Result<Option<StateReport>, RuntimeError> {
        let idx = self.index(name)?;
        let info = &self.slots[idx].info;
        if !info.descriptor.degradable {
            return Err(RuntimeError::Capability(name.to_string()));
        }
        if degree > info.descriptor.max_units {
            return Err(RuntimeError::Range {
                module: name.to_string(),
                degree,
                max: info.descriptor.max_units,
            });
        }
        self.log_signal(name, CoreSignal::safe(degree));
        let now = self.now_ms;
        let slot = &mut self.slots[idx];
        slot.info.granted_units = degree;
        slot.info.mode = if degree >= slot.info.requested_units {
            Mode::ClassicMode
        } else {
            Mode::SafeMode
        };
        match slot.instance.on_signal(CoreSignal::safe(degree)) {
            Some(report) => {
                self.accept_report(idx, report.clone());
                Ok(Some(report))
            }
            None => {
                if slot.awaiting_since.is_none() {
                    slot.awaiting_since = Some(now);
                }
                Ok(None)
            }
        }
    }

    pub fn observe_latency(&mut self, sample: &LatencySample) {
        self.set_time(sample.ts_ms);
        self.estimator.observe(sample.rtt_ms);
    }

    /// One control period: collect late reports, time out silent modules,
    /// then apply at most one degradation decision.
    pub fn tick(&mut self, now_ms: u64) -> Vec<(String, u32)> {
        self.set_time(now_ms);
        for idx in 0..self.slots.len() {
            if let Some(report) = self.slots[idx].instance.poll() {
                self.accept_report(idx, report);
            }
        }
        let limit = self.config.period_ms * self.config.report_timeout_periods;
        for idx in 0..self.slots.len() {
            let slot = &self.slots[idx];
            let expired = slot
                .awaiting_since
                .is_some_and(|since| self.now_ms.saturating_sub(since) >= limit);
            if expired && slot.info.last_report.status != ModuleStatus::Failed {
                let report = StateReport::new(
                    &slot.info.descriptor.name,
                    ModuleStatus::Failed,
                    slot.info.last_report.active_units,
                    format!("no state report within {} control periods", self.config.report_timeout_periods),
                );
                log::warn!("{}: {}", report.module, report.detail);
                self.accept_report(idx, report);
            }
        }
        let views = self.views();
        let decisions = decide_degradation(&self.config, self.estimate(), &views, &self.priority);
        for (name, degree) in &decisions {
            if let Err(e) = self.send_safe(name, *degree) {
                log::error!("controller decision {name} -> {degree} rejected: {e}");
            }
        }
        decisions
    }

    fn views(&self) -> Vec<ModuleView> {
        self.slots
            .iter()
            .map(|s| ModuleView {
                name: s.info.descriptor.name.clone(),
                degradable: s.info.descriptor.degradable,
                failed: s.info.last_report.status == ModuleStatus::Failed,
                requested_units: s.info.requested_units,
                granted_units: s.info.granted_units,
            })
            .collect()
    }

    fn accept_report(&mut self, idx: usize, report: StateReport) {
        let slot = &mut self.slots[idx];
        // A timeout-generated FAILED keeps the slot waiting, a real report clears it.
        if !(report.status == ModuleStatus::Failed && report.detail.starts_with("no state report")) {
            slot.awaiting_since = None;
        }
        let env = slot.seq.envelope(self.now_ms, Body::StateReport(report.clone()));
        self.log.push(env);
        slot.info.last_report = report;
    }

    fn log_signal(&mut self, module: &str, signal: CoreSignal) {
        let env = self.seq.envelope(
            self.now_ms,
            Body::ModuleSignal(ModuleSignalBody {
                module: module.to_string(),
                signal,
            }),
        );
        self.log.push(env);
    }

    fn log_report(&mut self, seq: &mut SeqCounter, report: &StateReport) {
        let env = seq.envelope(self.now_ms, Body::StateReport(report.clone()));
        self.log.push(env);
    }

    fn index(&self, name: &str) -> Result<usize, RuntimeError> {
        self.slots
            .iter()
            .position(|s| s.info.descriptor.name == name)
            .ok_or_else(|| RuntimeError::NotFound(name.to_string()))
    }
}

/// The SAFE degrees sent to `module`, in order.
pub fn safe_trace(log: &[Envelope], module: &str) -> Vec<u32> {
    log.iter()
        .filter_map(|env| match &env.body {
            Body::ModuleSignal(b) if b.module == module && b.signal.kind == SignalKind::Safe => b.signal.degree,
            _ => None,
        })
        .collect()
}

/// The SAFE signals with their timestamps.
pub fn timed_safe_trace(log: &[Envelope], module: &str) -> Vec<(u64, u32)> {
    log.iter()
        .filter_map(|env| match &env.body {
            Body::ModuleSignal(b) if b.module == module && b.signal.kind == SignalKind::Safe => {
                b.signal.degree.map(|d| (env.ts_ms, d))
            }
            _ => None,
        })
        .collect()
}

/// Checks that every module got exactly one LOAD before anything else and at
/// most one UNLOAD, with nothing after it. Returns the problems found.
pub fn audit_signal_discipline(log: &[Envelope]) -> Vec<String> {
    #[derive(PartialEq)]
    enum Phase {
        Loaded,
        Unloaded,
    }
    let mut phase: BTreeMap<&str, Phase> = BTreeMap::new();
    let mut problems = Vec::new();
    for env in log {
        let Body::ModuleSignal(b) = &env.body else {
            continue;
        };
        let m = b.module.as_str();
        match (b.signal.kind, phase.get(m)) {
            (SignalKind::Load, None) => {
                phase.insert(m, Phase::Loaded);
            }
            // Reloading after UNLOAD starts a new lifecycle.
            (SignalKind::Load, Some(Phase::Unloaded)) => {
                phase.insert(m, Phase::Loaded);
            }
            (SignalKind::Load, Some(Phase::Loaded)) => problems.push(format!("{m}: second LOAD at seq {}", env.seq)),
            (SignalKind::Unload, Some(Phase::Loaded)) => {
                phase.insert(m, Phase::Unloaded);
            }
            (SignalKind::Safe, Some(Phase::Loaded)) => {}
            (kind, state) => {
                let state = match state {
                    None => "before LOAD",
                    Some(Phase::Unloaded) => "after UNLOAD",
                    Some(Phase::Loaded) => "twice",
                };
                problems.push(format!("{m}: {kind:?} {state} at seq {}", env.seq));
            }
        }
    }
    problems
}

/// Checks that no report claims more active units than the module was granted
/// at the time. Per-module conservation implies the sum over modules holds.
pub fn audit_conservation(log: &[Envelope]) -> Vec<String> {
    let mut granted: BTreeMap<String, Option<u32>> = BTreeMap::new();
    let mut problems = Vec::new();
    for env in log {
        match &env.body {
            Body::ModuleSignal(b) => match b.signal.kind {
                SignalKind::Load => {
                    granted.insert(b.module.clone(), None);
                }
                SignalKind::Safe => {
                    granted.insert(b.module.clone(), b.signal.degree);
                }
                SignalKind::Unload => {
                    granted.insert(b.module.clone(), Some(0));
                }
            },
            Body::StateReport(r) => {
                if let Some(Some(g)) = granted.get(&r.module) {
                    if r.active_units > *g {
                        problems.push(format!("{}: {} active with {} granted at seq {}", r.module, r.active_units, g, env.seq));
                    }
                }
            }
            _ => {}
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::modules::{BuiltinFactory, FailingModule, GenericModule, SilentModule};

    struct TestFactory;

    impl ModuleFactory for TestFactory {
        fn create(&self, d: &ModuleDescriptor, _v: Variant, units: u32) -> Box<dyn Module> {
            match d.name.as_str() {
                "failing" => Box::new(FailingModule(d.name.clone())),
                "silent" => Box::new(SilentModule::new(&d.name, units)),
                _ => Box::new(GenericModule::new(&d.name, units)),
            }
        }
    }

    fn camera() -> ModuleDescriptor {
        ModuleDescriptor::new("camera", "1", &[Variant::Classic]).degradable("camera", 5, 5)
    }

    fn core() -> Core {
        let mut c = Core::new(ControllerConfig::default(), Box::new(TestFactory));
        c.set_priority(vec!["camera".into(), "silent".into()]);
        c
    }

    #[test]
    fn load_reports_requested_units() {
        let mut c = core();
        let r = c.load_module(&camera(), Variant::Classic).unwrap();
        assert_eq!((r.status, r.active_units), (ModuleStatus::Ok, 5));
        assert_eq!(
            c.load_module(&camera(), Variant::Classic),
            Err(RuntimeError::Conflict("camera".into()))
        );
        assert_eq!(c.modules().len(), 1);
        assert!(matches!(
            c.load_module(&camera(), Variant::Mobile),
            Err(RuntimeError::Variant { .. })
        ));
    }

    #[test]
    fn failed_load_is_not_listed() {
        let mut c = core();
        let d = ModuleDescriptor::new("failing", "1", &[Variant::Classic]);
        assert_eq!(c.load_module(&d, Variant::Classic).unwrap().status, ModuleStatus::Failed);
        assert!(c.modules().is_empty());
    }

    #[test]
    fn safe_signals_and_modes() {
        let mut c = core();
        c.load_module(&camera(), Variant::Classic).unwrap();
        let r = c.send_safe("camera", 4).unwrap().unwrap();
        assert_eq!((r.status, r.active_units), (ModuleStatus::Degraded, 4));
        assert_eq!(c.module("camera").unwrap().mode, Mode::SafeMode);
        let r = c.send_safe("camera", 5).unwrap().unwrap();
        assert_eq!(r.status, ModuleStatus::Ok);
        assert_eq!(c.module("camera").unwrap().mode, Mode::ClassicMode);
        assert_eq!(c.send_safe("camera", 0).unwrap().unwrap().active_units, 0);
        assert!(matches!(c.send_safe("camera", 6), Err(RuntimeError::Range { .. })));
        let plain = ModuleDescriptor::new("teleop", "1", &[Variant::Classic]);
        c.load_module(&plain, Variant::Classic).unwrap();
        assert_eq!(c.send_safe("teleop", 0), Err(RuntimeError::Capability("teleop".into())));
    }

    #[test]
    fn unload_and_discipline() {
        let mut c = core();
        c.load_module(&camera(), Variant::Classic).unwrap();
        c.send_safe("camera", 3).unwrap();
        c.unload_module("camera").unwrap();
        assert!(c.modules().is_empty());
        assert_eq!(c.unload_module("camera"), Err(RuntimeError::NotFound("camera".into())));
        assert!(audit_signal_discipline(c.signal_log()).is_empty());
        assert!(audit_conservation(c.signal_log()).is_empty());
    }

    #[test]
    fn silent_module_fails_after_two_periods() {
        let mut c = core();
        let d = ModuleDescriptor::new("silent", "1", &[Variant::Classic]).degradable("unit", 3, 3);
        c.load_module(&d, Variant::Classic).unwrap();
        c.set_time(1000);
        assert_eq!(c.send_safe("silent", 2).unwrap(), None);
        c.tick(1500);
        assert_eq!(c.module("silent").unwrap().last_report.status, ModuleStatus::Ok);
        c.tick(2000);
        assert_eq!(c.module("silent").unwrap().last_report.status, ModuleStatus::Failed);
    }

    #[test]
    fn oscillation_inside_band_emits_nothing() {
        let mut c = core();
        c.load_module(&camera(), Variant::Classic).unwrap();
        for i in 0..200u64 {
            let rtt = if i % 2 == 0 { 125.0 } else { 195.0 };
            c.observe_latency(&LatencySample {
                source: "probe".into(),
                rtt_ms: rtt,
                ts_ms: i * 100,
                timed_out: false,
            });
            if i % 5 == 4 {
                c.tick(i * 100);
            }
        }
        assert!(safe_trace(c.signal_log(), "camera").is_empty());
    }

    #[test]
    fn monotone_under_rising_latency() {
        let mut c = core();
        c.load_module(&camera(), Variant::Classic).unwrap();
        let mut last = 5;
        for i in 0..100u64 {
            c.observe_latency(&LatencySample {
                source: "probe".into(),
                rtt_ms: 50.0 + 10.0 * i as f64,
                ts_ms: i * 100,
                timed_out: false,
            });
            if i % 5 == 4 {
                c.tick(i * 100);
            }
            let g = c.module("camera").unwrap().granted_units;
            assert!(g <= last);
            last = g;
        }
        assert_eq!(last, 0);
    }

    #[test]
    fn signal_log_is_jsonl() {
        let mut c = Core::new(ControllerConfig::default(), Box::new(BuiltinFactory::default()));
        c.load_module(&camera(), Variant::Classic).unwrap();
        let mut out = Vec::new();
        c.write_signal_log(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"MODULE_SIGNAL\""));
        assert!(lines[1].contains("\"STATE_REPORT\""));
    }
}
