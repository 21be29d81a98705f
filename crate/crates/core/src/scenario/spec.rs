//! Scenario files.
//!
//! ```xml
//! <scenario name="collaborate" seed="7" probe="relay">
//!   <scene>
//!     <object id="cube" position="0.4 0 0.1"/>
//!   </scene>
//!   <core period-ms="500" probe-interval-ms="100" duration-ms="8000">
//!     <module name="camera" variant="CLASSIC" units="5"/>
//!     <hot-add at-ms="1000" name="trajectory" variant="CLASSIC"/>
//!     <latency-profile>
//!       <step t-ms="0" delay-ms="10"/>
//!       <step t-ms="5000" delay-ms="300"/>
//!     </latency-profile>
//!   </core>
//!   <clients>
//!     <client id="alice" platform="WEB">
//!       <join at-ms="0"/>
//!       <phantom at-ms="100" joints="0 0.2 0 0 0 0"/>
//!       <lock at-ms="200" object="cube"/>
//!       <validate at-ms="300" expect="ACCEPTED"/>
//!     </client>
//!   </clients>
//!   <assertions>
//!     <convergence/>
//!     <robot-provenance commands="1"/>
//!   </assertions>
//! </scenario>
//! ```
//!
//! Client actions: `join`, `phantom joints`, `random-updates count rate-hz`,
//! `lock object`, `release object`, `random-locks count rate-hz objects`,
//! `validate [expect]`, `trajectory waypoints [expect]` (waypoints separated
//! by `;`), `disconnect`. Assertions: `convergence`, `ordering`, `no-gaps`,
//! `robot-provenance [commands]`, `exactly-one-grant [object]
//! [require-contention]`, `degradation-trace module expect [within-periods]`.

use std::collections::BTreeSet;

use roxmltree::Node;

use crate::robot::{JointConfig, ReceiptStatus};
use crate::runtime::{ControllerConfig, Variant};
use crate::session::{Platform, SceneConfig, ShareableObject};
use crate::xml::{self, XmlError};

use super::ScenarioError;

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    Join,
    Phantom(JointConfig),
    RandomUpdates { count: u32, rate_hz: f64 },
    Lock(String),
    Release(String),
    RandomLocks { count: u32, rate_hz: f64, objects: Vec<String> },
    Validate { expect: Option<ReceiptStatus> },
    Trajectory { waypoints: Vec<JointConfig>, expect: Option<ReceiptStatus> },
    Disconnect,
}

impl ClientAction {
    pub fn name(&self) -> &'static str {
        match self {
            ClientAction::Join => "join",
            ClientAction::Phantom(_) => "phantom",
            ClientAction::RandomUpdates { .. } => "random-updates",
            ClientAction::Lock(_) => "lock",
            ClientAction::Release(_) => "release",
            ClientAction::RandomLocks { .. } => "random-locks",
            ClientAction::Validate { .. } => "validate",
            ClientAction::Trajectory { .. } => "trajectory",
            ClientAction::Disconnect => "disconnect",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedAction {
    pub at_ms: u64,
    pub action: ClientAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientScript {
    pub user_id: String,
    pub platform: Platform,
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreModule {
    pub name: String,
    pub variant: Variant,
    pub units: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotAdd {
    pub at_ms: u64,
    pub module: CoreModule,
}

/// Piecewise-constant injected delay.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyProfile {
    pub steps: Vec<(u64, f64)>,
}

impl LatencyProfile {
    /// Steps must start at or after 0, increase strictly in time, and carry
    /// finite non-negative delays.
    pub fn new(steps: Vec<(u64, f64)>) -> Result<Self, ScenarioError> {
        if steps.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(ScenarioError::Validation("latency profile t_ms must increase strictly".into()));
        }
        if steps.iter().any(|(_, d)| !d.is_finite() || *d < 0.0) {
            return Err(ScenarioError::Validation("latency profile delays must be finite and >= 0".into()));
        }
        Ok(Self { steps })
    }

    /// Delay in effect at `t_ms`; zero before the first step.
    pub fn delay_at(&self, t_ms: u64) -> f64 {
        self.steps
            .iter()
            .take_while(|(t, _)| *t <= t_ms)
            .last()
            .map_or(0.0, |(_, d)| *d)
    }
}

/// How latency samples are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// PING through the in-process relay plus the injected delay.
    Relay,
    /// Injected delay only; fully deterministic.
    Virtual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreSetup {
    pub controller: ControllerConfig,
    pub probe_interval_ms: u64,
    pub duration_ms: u64,
    pub modules: Vec<CoreModule>,
    pub hot_adds: Vec<HotAdd>,
    pub profile: LatencyProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Assertion {
    Convergence,
    Ordering,
    NoGaps,
    RobotProvenance { commands: Option<usize> },
    ExactlyOneGrant { object: Option<String>, require_contention: bool },
    DegradationTrace { module: String, expect: Vec<u32>, within_periods: u64 },
}

impl Assertion {
    pub fn name(&self) -> &'static str {
        match self {
            Assertion::Convergence => "convergence",
            Assertion::Ordering => "ordering",
            Assertion::NoGaps => "no-gaps",
            Assertion::RobotProvenance { .. } => "robot-provenance",
            Assertion::ExactlyOneGrant { .. } => "exactly-one-grant",
            Assertion::DegradationTrace { .. } => "degradation-trace",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub probe: ProbeMode,
    pub scene: Vec<ShareableObject>,
    pub core: Option<CoreSetup>,
    pub clients: Vec<ClientScript>,
    pub assertions: Vec<Assertion>,
}

impl Scenario {
    pub fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            seed: 0,
            probe: ProbeMode::Relay,
            scene: Vec::new(),
            core: None,
            clients: Vec::new(),
            assertions: Vec::new(),
        }
    }

    /// Checks cross-references: unique users, declared objects, a join before
    /// any other action and nothing after a disconnect.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let objects: BTreeSet<&str> = self.scene.iter().map(|o| o.object_id.as_str()).collect();
        let mut users = BTreeSet::new();
        for c in &self.clients {
            if !users.insert(c.user_id.as_str()) {
                return Err(ScenarioError::Validation(format!("client '{}' declared twice", c.user_id)));
            }
            let mut actions: Vec<&TimedAction> = c.actions.iter().collect();
            actions.sort_by_key(|a| a.at_ms);
            let mut joined = false;
            let mut left = false;
            for a in actions {
                let fail = |msg: String| ScenarioError::Validation(format!("client '{}': {msg}", c.user_id));
                if left {
                    return Err(fail(format!("{} at {} ms after disconnect", a.action.name(), a.at_ms)));
                }
                match &a.action {
                    ClientAction::Join if joined => return Err(fail("joins twice".into())),
                    ClientAction::Join => joined = true,
                    _ if !joined => return Err(fail(format!("{} at {} ms before join", a.action.name(), a.at_ms))),
                    ClientAction::Disconnect => left = true,
                    _ => {}
                }
                let refs: Vec<&String> = match &a.action {
                    ClientAction::Lock(o) | ClientAction::Release(o) => vec![o],
                    ClientAction::RandomLocks { objects, .. } => objects.iter().collect(),
                    _ => Vec::new(),
                };
                for o in refs {
                    if !objects.contains(o.as_str()) {
                        return Err(fail(format!("{} references undeclared object '{o}'", a.action.name())));
                    }
                }
                if let ClientAction::RandomUpdates { rate_hz, .. } | ClientAction::RandomLocks { rate_hz, .. } = &a.action {
                    if !(rate_hz.is_finite() && *rate_hz > 0.0) {
                        return Err(fail("rate-hz must be positive".into()));
                    }
                }
            }
        }
        for a in &self.assertions {
            match a {
                Assertion::ExactlyOneGrant { object: Some(o), .. } if !objects.contains(o.as_str()) => {
                    return Err(ScenarioError::Validation(format!("assertion references undeclared object '{o}'")));
                }
                Assertion::DegradationTrace { module, .. } => {
                    let known = self
                        .core
                        .as_ref()
                        .is_some_and(|c| c.modules.iter().chain(c.hot_adds.iter().map(|h| &h.module)).any(|m| &m.name == module));
                    if !known {
                        return Err(ScenarioError::Validation(format!(
                            "degradation-trace names module '{module}' that the core never loads"
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn parse_joints(node: Node<'_, '_>, text: &str) -> Result<JointConfig, XmlError> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|v| v.parse::<f64>().map_err(|_| XmlError::at(node, format!("invalid number '{v}'"))))
        .collect::<Result<_, _>>()?;
    let q: [f64; 6] = values
        .try_into()
        .map_err(|v: Vec<f64>| XmlError::at(node, format!("expected 6 joint values, got {}", v.len())))?;
    let q = JointConfig(q);
    if !q.is_finite() {
        return Err(XmlError::at(node, "joint values must be finite"));
    }
    Ok(q)
}

fn parse_expect(node: Node<'_, '_>) -> Result<Option<ReceiptStatus>, XmlError> {
    Ok(match node.attribute("expect") {
        None => None,
        Some("ACCEPTED") => Some(ReceiptStatus::Accepted),
        Some("BUSY") => Some(ReceiptStatus::Busy),
        Some("REJECTED") => Some(ReceiptStatus::Rejected),
        Some(other) => return Err(XmlError::at(node, format!("unknown receipt status '{other}'"))),
    })
}

fn parse_action(node: Node<'_, '_>) -> Result<TimedAction, XmlError> {
    let name = node.tag_name().name();
    let allowed: &[&str] = match name {
        "join" | "disconnect" => &["at-ms"],
        "phantom" => &["at-ms", "joints"],
        "random-updates" => &["at-ms", "count", "rate-hz"],
        "lock" | "release" => &["at-ms", "object"],
        "random-locks" => &["at-ms", "count", "rate-hz", "objects"],
        "validate" => &["at-ms", "expect"],
        "trajectory" => &["at-ms", "waypoints", "expect"],
        _ => unreachable!("filtered by the caller"),
    };
    xml::check_attrs(node, allowed)?;
    let at_ms: u64 = xml::parse_attr(node, "at-ms")?;
    let action = match name {
        "join" => ClientAction::Join,
        "disconnect" => ClientAction::Disconnect,
        "phantom" => ClientAction::Phantom(parse_joints(node, xml::req_attr(node, "joints")?)?),
        "random-updates" => ClientAction::RandomUpdates {
            count: xml::parse_attr(node, "count")?,
            rate_hz: xml::parse_attr(node, "rate-hz")?,
        },
        "lock" => ClientAction::Lock(xml::req_attr(node, "object")?.to_string()),
        "release" => ClientAction::Release(xml::req_attr(node, "object")?.to_string()),
        "random-locks" => ClientAction::RandomLocks {
            count: xml::parse_attr(node, "count")?,
            rate_hz: xml::parse_attr(node, "rate-hz")?,
            objects: xml::req_attr(node, "objects")?
                .split_whitespace()
                .map(str::to_string)
                .collect(),
        },
        "validate" => ClientAction::Validate {
            expect: parse_expect(node)?,
        },
        "trajectory" => ClientAction::Trajectory {
            waypoints: xml::req_attr(node, "waypoints")?
                .split(';')
                .map(|w| parse_joints(node, w))
                .collect::<Result<_, _>>()?,
            expect: parse_expect(node)?,
        },
        _ => unreachable!(),
    };
    if let ClientAction::RandomLocks { objects, .. } = &action {
        if objects.is_empty() {
            return Err(XmlError::at(node, "objects must list at least one object"));
        }
    }
    Ok(TimedAction { at_ms, action })
}

fn parse_core_module(node: Node<'_, '_>, extra: &[&str]) -> Result<CoreModule, XmlError> {
    let mut allowed = vec!["name", "variant", "units"];
    allowed.extend_from_slice(extra);
    xml::check_attrs(node, &allowed)?;
    Ok(CoreModule {
        name: xml::req_attr(node, "name")?.to_string(),
        variant: xml::parse_opt_attr(node, "variant")?.unwrap_or(Variant::Classic),
        units: xml::parse_opt_attr(node, "units")?,
    })
}

fn parse_core(node: Node<'_, '_>) -> Result<CoreSetup, ScenarioError> {
    xml::check_attrs(node, &["period-ms", "probe-interval-ms", "duration-ms", "high-ms", "low-ms", "beta"])?;
    let mut controller = ControllerConfig::default();
    if let Some(p) = xml::parse_opt_attr::<u64>(node, "period-ms")? {
        if p == 0 {
            return Err(XmlError::at(node, "period-ms must be positive").into());
        }
        controller.period_ms = p;
    }
    if let Some(h) = xml::parse_opt_attr(node, "high-ms")? {
        controller.high_ms = h;
    }
    if let Some(l) = xml::parse_opt_attr(node, "low-ms")? {
        controller.low_ms = l;
    }
    if let Some(b) = xml::parse_opt_attr(node, "beta")? {
        controller.beta = b;
    }
    let probe_interval_ms = xml::parse_opt_attr(node, "probe-interval-ms")?.unwrap_or(100);
    if probe_interval_ms == 0 {
        return Err(XmlError::at(node, "probe-interval-ms must be positive").into());
    }
    let duration_ms = xml::parse_opt_attr(node, "duration-ms")?.unwrap_or(0);
    let mut setup = CoreSetup {
        controller,
        probe_interval_ms,
        duration_ms,
        modules: Vec::new(),
        hot_adds: Vec::new(),
        profile: LatencyProfile::default(),
    };
    let mut saw_profile = false;
    for child in xml::elements(node, &["module", "hot-add", "latency-profile"])? {
        match child.tag_name().name() {
            "module" => setup.modules.push(parse_core_module(child, &[])?),
            "hot-add" => setup.hot_adds.push(HotAdd {
                at_ms: xml::parse_attr(child, "at-ms")?,
                module: parse_core_module(child, &["at-ms"])?,
            }),
            _ => {
                if saw_profile {
                    return Err(XmlError::at(child, "only one <latency-profile> is allowed").into());
                }
                saw_profile = true;
                xml::check_attrs(child, &[])?;
                let mut steps = Vec::new();
                for step in xml::elements(child, &["step"])? {
                    xml::check_attrs(step, &["t-ms", "delay-ms"])?;
                    steps.push((xml::parse_attr(step, "t-ms")?, xml::parse_attr(step, "delay-ms")?));
                }
                setup.profile = LatencyProfile::new(steps)?;
            }
        }
    }
    Ok(setup)
}

fn parse_assertion(node: Node<'_, '_>) -> Result<Assertion, XmlError> {
    let name = node.tag_name().name();
    Ok(match name {
        "convergence" | "ordering" | "no-gaps" => {
            xml::check_attrs(node, &[])?;
            match name {
                "convergence" => Assertion::Convergence,
                "ordering" => Assertion::Ordering,
                _ => Assertion::NoGaps,
            }
        }
        "robot-provenance" => {
            xml::check_attrs(node, &["commands"])?;
            Assertion::RobotProvenance {
                commands: xml::parse_opt_attr(node, "commands")?,
            }
        }
        "exactly-one-grant" => {
            xml::check_attrs(node, &["object", "require-contention"])?;
            Assertion::ExactlyOneGrant {
                object: node.attribute("object").map(str::to_string),
                require_contention: xml::parse_bool_attr(node, "require-contention")?.unwrap_or(true),
            }
        }
        "degradation-trace" => {
            xml::check_attrs(node, &["module", "expect", "within-periods"])?;
            let expect = xml::req_attr(node, "expect")?
                .split_whitespace()
                .map(|d| d.parse::<u32>().map_err(|_| XmlError::at(node, format!("invalid degree '{d}'"))))
                .collect::<Result<_, _>>()?;
            Assertion::DegradationTrace {
                module: xml::req_attr(node, "module")?.to_string(),
                expect,
                within_periods: xml::parse_opt_attr(node, "within-periods")?.unwrap_or(2),
            }
        }
        _ => unreachable!("filtered by the caller"),
    })
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let doc = xml::parse_document(text)?;
    let root = xml::root(&doc, "scenario")?;
    xml::check_attrs(root, &["name", "seed", "probe"])?;
    let mut scenario = Scenario::empty(xml::req_attr(root, "name")?);
    scenario.seed = xml::parse_opt_attr(root, "seed")?.unwrap_or(0);
    scenario.probe = match root.attribute("probe") {
        None | Some("relay") => ProbeMode::Relay,
        Some("virtual") => ProbeMode::Virtual,
        Some(other) => return Err(XmlError::at(root, format!("unknown probe mode '{other}'")).into()),
    };
    let children = xml::elements(root, &["scene", "core", "clients", "assertions"])?;
    if let Some(scene) = xml::single_child(root, &children, "scene")? {
        scenario.scene = SceneConfig::from_node(scene)?.objects;
    }
    if let Some(core) = xml::single_child(root, &children, "core")? {
        scenario.core = Some(parse_core(core)?);
    }
    if let Some(clients) = xml::single_child(root, &children, "clients")? {
        xml::check_attrs(clients, &[])?;
        for c in xml::elements(clients, &["client"])? {
            xml::check_attrs(c, &["id", "platform"])?;
            let actions = xml::elements(
                c,
                &[
                    "join",
                    "phantom",
                    "random-updates",
                    "lock",
                    "release",
                    "random-locks",
                    "validate",
                    "trajectory",
                    "disconnect",
                ],
            )?
            .into_iter()
            .map(parse_action)
            .collect::<Result<_, _>>()?;
            scenario.clients.push(ClientScript {
                user_id: xml::req_attr(c, "id")?.to_string(),
                platform: xml::parse_attr(c, "platform")?,
                actions,
            });
        }
    }
    if let Some(assertions) = xml::single_child(root, &children, "assertions")? {
        xml::check_attrs(assertions, &[])?;
        for a in xml::elements(
            assertions,
            &[
                "convergence",
                "ordering",
                "no-gaps",
                "robot-provenance",
                "exactly-one-grant",
                "degradation-trace",
            ],
        )? {
            scenario.assertions.push(parse_assertion(a)?);
        }
    }
    scenario.validate()?;
    Ok(scenario)
}
