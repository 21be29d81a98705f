//! Application specs: the composed XML file the core starts from.
//!
//! ```xml
//! <application name="demo" platform="WEB">
//!   <options>
//!     <option key="robot" value="127.0.0.1:7001"/>
//!   </options>
//!   <modules>
//!     <entry variant="CLASSIC" units="5">
//!       <module name="camera" version="1.0">...</module>
//!     </entry>
//!   </modules>
//!   <degradation-priority>
//!     <ref module="camera"/>
//!   </degradation-priority>
//! </application>
//! ```

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use super::descriptor::{descriptor_from_node, ModuleDescriptor};
use crate::runtime::Variant;
use crate::session::Platform;
use crate::xml::{self, XmlError, XmlWriter};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppModule {
    pub descriptor: ModuleDescriptor,
    pub variant: Variant,
    pub requested_units: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppSpec {
    pub name: String,
    pub platform: Platform,
    pub options: Vec<(String, String)>,
    pub modules: Vec<AppModule>,
    pub degradation_priority: Vec<String>,
}

impl AppSpec {
    pub fn module(&self, name: &str) -> Option<&AppModule> {
        self.modules.iter().find(|m| m.descriptor.name == name)
    }

    pub fn option(&self, key: &str) -> Option<&str> {
        self.options.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_xml(&self) -> String {
        let mut w = XmlWriter::new();
        w.open(
            "application",
            &[("name", self.name.clone()), ("platform", self.platform.as_str().to_string())],
        );
        w.open("options", &[]);
        for (key, value) in &self.options {
            w.empty("option", &[("key", key.clone()), ("value", value.clone())]);
        }
        w.close("options");
        w.open("modules", &[]);
        for m in &self.modules {
            w.open(
                "entry",
                &[
                    ("variant", m.variant.as_str().to_string()),
                    ("units", m.requested_units.to_string()),
                ],
            );
            m.descriptor.write_into(&mut w);
            w.close("entry");
        }
        w.close("modules");
        w.open("degradation-priority", &[]);
        for name in &self.degradation_priority {
            w.empty("ref", &[("module", name.clone())]);
        }
        w.close("degradation-priority");
        w.close("application");
        w.finish()
    }
}

/// Parses an application file. Schema problems are errors; semantic problems
/// (units out of range, incompatible variants) are left to [`validate_app`].
pub fn parse_app(text: &str) -> Result<AppSpec, XmlError> {
    let doc = xml::parse_document(text)?;
    let root = xml::root(&doc, "application")?;
    xml::check_attrs(root, &["name", "platform"])?;
    let name = xml::req_attr(root, "name")?.to_string();
    let platform: Platform = xml::parse_attr(root, "platform")?;
    let children = xml::elements(root, &["options", "modules", "degradation-priority"])?;

    let mut options = Vec::new();
    if let Some(node) = xml::single_child(root, &children, "options")? {
        xml::check_attrs(node, &[])?;
        for opt in xml::elements(node, &["option"])? {
            xml::check_attrs(opt, &["key", "value"])?;
            options.push((xml::req_attr(opt, "key")?.to_string(), xml::req_attr(opt, "value")?.to_string()));
        }
    }

    let modules_node = xml::required_child(root, &children, "modules")?;
    xml::check_attrs(modules_node, &[])?;
    let mut modules = Vec::new();
    for entry in xml::elements(modules_node, &["entry"])? {
        xml::check_attrs(entry, &["variant", "units"])?;
        let variant: Variant = xml::parse_attr(entry, "variant")?;
        let requested_units: u32 = xml::parse_attr(entry, "units")?;
        let inner = xml::elements(entry, &["module"])?;
        let module_node = xml::required_child(entry, &inner, "module")?;
        modules.push(AppModule {
            descriptor: descriptor_from_node(module_node)?,
            variant,
            requested_units,
        });
    }

    let mut degradation_priority = Vec::new();
    if let Some(node) = xml::single_child(root, &children, "degradation-priority")? {
        xml::check_attrs(node, &[])?;
        for r in xml::elements(node, &["ref"])? {
            xml::check_attrs(r, &["module"])?;
            degradation_priority.push(xml::req_attr(r, "module")?.to_string());
        }
    }

    Ok(AppSpec {
        name,
        platform,
        options,
        modules,
        degradation_priority,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub module: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.module {
            Some(m) => write!(f, "module '{m}': {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn platform_allows(platform: Platform, variant: Variant) -> bool {
    platform != Platform::Mobile || variant == Variant::Mobile
}

/// Checks every invariant and reports all violations.
pub fn validate_app(spec: &AppSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |module: Option<&str>, message: String| {
        out.push(Violation {
            module: module.map(str::to_string),
            message,
        })
    };
    if spec.name.is_empty() {
        push(None, "application name is empty".into());
    }
    let mut keys = BTreeSet::new();
    for (key, _) in &spec.options {
        if !keys.insert(key.as_str()) {
            push(None, format!("duplicate option key '{key}'"));
        }
    }
    let mut names = BTreeSet::new();
    for m in &spec.modules {
        let d = &m.descriptor;
        let name = Some(d.name.as_str());
        if !names.insert(d.name.as_str()) {
            push(name, "listed more than once".into());
        }
        if !d.supports(m.variant) {
            push(name, format!("variant {} not offered by the descriptor", m.variant));
        }
        if !platform_allows(spec.platform, m.variant) {
            push(name, format!("variant {} not allowed on platform {}", m.variant, spec.platform));
        }
        if m.requested_units > d.max_units {
            push(
                name,
                format!("requested units {} exceed max-units {}", m.requested_units, d.max_units),
            );
        }
        if d.default_units > d.max_units {
            push(name, "default-units exceeds max-units".into());
        }
        if d.degradable && !spec.degradation_priority.contains(&d.name) {
            push(name, "degradable module missing from the degradation priority list".into());
        }
    }
    let mut seen = BTreeSet::new();
    for p in &spec.degradation_priority {
        if !seen.insert(p.as_str()) {
            push(Some(p), "appears twice in the degradation priority list".into());
        }
        match spec.module(p) {
            None => push(Some(p), "priority entry names a module not in the application".into()),
            Some(m) if !m.descriptor.degradable => {
                push(Some(p), "priority entry names a non-degradable module".into())
            }
            Some(_) => {}
        }
    }
    out
}

/// Extra check that every embedded descriptor matches a registered one.
pub fn validate_against_registry(spec: &AppSpec, registry: &[ModuleDescriptor]) -> Vec<Violation> {
    spec.modules
        .iter()
        .filter(|m| !registry.iter().any(|r| r == &m.descriptor))
        .map(|m| Violation {
            module: Some(m.descriptor.name.clone()),
            message: format!("version {} is not registered", m.descriptor.version),
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("composition error: {0}")]
    Composition(String),
    #[error("compatibility error: module '{module}' variant {variant} on platform {platform}")]
    Compatibility {
        module: String,
        variant: Variant,
        platform: Platform,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub name: String,
    pub variant: Variant,
    /// Falls back to the descriptor's default units.
    pub units: Option<u32>,
}

impl Selection {
    pub fn new(name: impl Into<String>, variant: Variant, units: Option<u32>) -> Self {
        Self {
            name: name.into(),
            variant,
            units,
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = String;

    /// `name:VARIANT[:units]`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if !(2..=3).contains(&parts.len()) || parts[0].is_empty() {
            return Err(format!("expected name:VARIANT[:units], got '{s}'"));
        }
        let variant = parts[1].parse()?;
        let units = match parts.get(2) {
            Some(u) => Some(u.parse().map_err(|_| format!("invalid units '{u}'"))?),
            None => None,
        };
        Ok(Selection::new(parts[0], variant, units))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposeRequest {
    pub name: String,
    pub platform: Platform,
    pub options: Vec<(String, String)>,
    pub selection: Vec<Selection>,
}

/// Orders versions by their dot-separated parts, numerically where both are numbers.
pub fn compare_versions(a: &str, b: &str) -> Ordering {
    let mut left = a.split('.');
    let mut right = b.split('.');
    loop {
        match (left.next(), right.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) => {
                let ord = match (x.parse::<u64>(), y.parse::<u64>()) {
                    (Ok(p), Ok(q)) => p.cmp(&q),
                    _ => x.cmp(y),
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

/// Builds the spec for a selection. When several versions of a module are
/// registered the highest one is used.
pub fn build_app(registry: &[ModuleDescriptor], request: &ComposeRequest) -> Result<AppSpec, ComposeError> {
    let mut modules: Vec<AppModule> = Vec::new();
    for sel in &request.selection {
        if modules.iter().any(|m| m.descriptor.name == sel.name) {
            return Err(ComposeError::Composition(format!("module '{}' selected twice", sel.name)));
        }
        let descriptor = registry
            .iter()
            .filter(|d| d.name == sel.name)
            .max_by(|a, b| compare_versions(&a.version, &b.version))
            .ok_or_else(|| ComposeError::Composition(format!("module '{}' is not registered", sel.name)))?;
        if !descriptor.supports(sel.variant) || !platform_allows(request.platform, sel.variant) {
            return Err(ComposeError::Compatibility {
                module: sel.name.clone(),
                variant: sel.variant,
                platform: request.platform,
            });
        }
        let units = sel.units.unwrap_or(descriptor.default_units);
        if units > descriptor.max_units {
            return Err(ComposeError::Composition(format!(
                "module '{}' requests {units} units, max-units is {}",
                sel.name, descriptor.max_units
            )));
        }
        modules.push(AppModule {
            descriptor: descriptor.clone(),
            variant: sel.variant,
            requested_units: units,
        });
    }
    let mut keys = BTreeSet::new();
    for (key, _) in &request.options {
        if !keys.insert(key) {
            return Err(ComposeError::Composition(format!("option '{key}' given twice")));
        }
    }
    let degradation_priority = modules
        .iter()
        .filter(|m| m.descriptor.degradable)
        .map(|m| m.descriptor.name.clone())
        .collect();
    Ok(AppSpec {
        name: request.name.clone(),
        platform: request.platform,
        options: request.options.clone(),
        modules,
        degradation_priority,
    })
}

pub fn compose_app(registry: &[ModuleDescriptor], request: &ComposeRequest) -> Result<String, ComposeError> {
    Ok(build_app(registry, request)?.to_xml())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Vec<ModuleDescriptor> {
        vec![
            ModuleDescriptor::new("camera", "1.0", &[Variant::Classic, Variant::Mobile]).degradable("camera", 5, 5),
            ModuleDescriptor::new("teleop", "1.0", &[Variant::Classic]),
        ]
    }

    fn request(platform: Platform, selection: Vec<Selection>) -> ComposeRequest {
        ComposeRequest {
            name: "demo".into(),
            platform,
            options: vec![("robot".into(), "127.0.0.1:7001".into())],
            selection,
        }
    }

    #[test]
    fn camera_and_teleop_for_web() {
        let req = request(
            Platform::Web,
            vec![
                Selection::new("camera", Variant::Classic, Some(5)),
                Selection::new("teleop", Variant::Classic, None),
            ],
        );
        let text = compose_app(&registry(), &req).unwrap();
        let spec = parse_app(&text).unwrap();
        assert_eq!(spec.modules.len(), 2);
        assert_eq!(spec.modules[0].requested_units, 5);
        assert_eq!(spec.degradation_priority, vec!["camera".to_string()]);
        assert!(validate_app(&spec).is_empty());
        assert_eq!(spec.to_xml(), text);
    }

    #[test]
    fn classic_only_module_on_mobile_is_incompatible() {
        let req = request(Platform::Mobile, vec![Selection::new("teleop", Variant::Classic, None)]);
        assert!(matches!(
            build_app(&registry(), &req),
            Err(ComposeError::Compatibility { .. })
        ));
    }

    #[test]
    fn unknown_module_is_composition_error() {
        let req = request(Platform::Web, vec![Selection::new("lidar", Variant::Classic, None)]);
        assert!(matches!(build_app(&registry(), &req), Err(ComposeError::Composition(_))));
    }

    #[test]
    fn over_requested_units_is_one_violation() {
        let req = request(Platform::Web, vec![Selection::new("camera", Variant::Classic, Some(5))]);
        let mut spec = build_app(&registry(), &req).unwrap();
        spec.modules[0].requested_units = 6;
        let found = validate_app(&spec);
        assert_eq!(found.len(), 1, "{found:?}");
        assert_eq!(found[0].module.as_deref(), Some("camera"));
    }

    #[test]
    fn missing_priority_and_bad_variant_both_reported() {
        let req = request(Platform::Web, vec![Selection::new("camera", Variant::Classic, Some(5))]);
        let mut spec = build_app(&registry(), &req).unwrap();
        spec.degradation_priority.clear();
        spec.platform = Platform::Mobile;
        assert_eq!(validate_app(&spec).len(), 2);
    }

    #[test]
    fn highest_version_wins() {
        let mut reg = registry();
        reg.push(ModuleDescriptor::new("teleop", "1.10", &[Variant::Classic]));
        reg.push(ModuleDescriptor::new("teleop", "1.9", &[Variant::Classic]));
        let req = request(Platform::Web, vec![Selection::new("teleop", Variant::Classic, None)]);
        assert_eq!(build_app(&reg, &req).unwrap().modules[0].descriptor.version, "1.10");
    }

    #[test]
    fn selection_syntax() {
        let s: Selection = "camera:CLASSIC:5".parse().unwrap();
        assert_eq!(s, Selection::new("camera", Variant::Classic, Some(5)));
        let s: Selection = "teleop:MOBILE".parse().unwrap();
        assert_eq!(s.units, None);
        assert!("camera".parse::<Selection>().is_err());
    }
}
