//! Module descriptors: the XML description shipped with each module package.
//!
//! ```xml
//! <module name="camera" version="1.0">
//!   <variants>
//!     <variant>CLASSIC</variant>
//!     <variant>MOBILE</variant>
//!   </variants>
//!   <methods>
//!     <method name="set_rate">
//!       <arg name="fps" type="int"/>
//!     </method>
//!   </methods>
//!   <degradation degradable="true" unit="camera" max-units="5" default-units="5"/>
//! </module>
//! ```
//!
//! `<methods>` and `<degradation>` are optional; a module without `<degradation>`
//! is non-degradable with one unit.

use std::collections::BTreeSet;

use roxmltree::Node;

use crate::runtime::Variant;
use crate::xml::{self, XmlError, XmlWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArgType {
    Int,
    Float,
    String,
    Bool,
}

impl ArgType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArgType::Int => "int",
            ArgType::Float => "float",
            ArgType::String => "string",
            ArgType::Bool => "bool",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "int" => Some(ArgType::Int),
            "float" => Some(ArgType::Float),
            "string" => Some(ArgType::String),
            "bool" => Some(ArgType::Bool),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodArg {
    pub name: String,
    pub arg_type: ArgType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodSpec {
    pub name: String,
    pub args: Vec<MethodArg>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleDescriptor {
    pub name: String,
    pub version: String,
    /// Kept sorted and unique.
    pub variants: BTreeSet<Variant>,
    pub methods: Vec<MethodSpec>,
    pub degradable: bool,
    pub unit_name: String,
    pub max_units: u32,
    pub default_units: u32,
}

impl ModuleDescriptor {
    pub fn new(name: impl Into<String>, version: impl Into<String>, variants: &[Variant]) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
            variants: variants.iter().copied().collect(),
            methods: Vec::new(),
            degradable: false,
            unit_name: "unit".into(),
            max_units: 1,
            default_units: 1,
        }
    }

    pub fn degradable(mut self, unit_name: &str, max_units: u32, default_units: u32) -> Self {
        self.degradable = true;
        self.unit_name = unit_name.into();
        self.max_units = max_units;
        self.default_units = default_units;
        self
    }

    pub fn supports(&self, variant: Variant) -> bool {
        self.variants.contains(&variant)
    }

    pub fn to_xml(&self) -> String {
        let mut w = XmlWriter::new();
        self.write_into(&mut w);
        w.finish()
    }

    pub(crate) fn write_into(&self, w: &mut XmlWriter) {
        w.open(
            "module",
            &[("name", self.name.clone()), ("version", self.version.clone())],
        );
        w.open("variants", &[]);
        for v in &self.variants {
            w.text("variant", &[], v.as_str());
        }
        w.close("variants");
        if !self.methods.is_empty() {
            w.open("methods", &[]);
            for m in &self.methods {
                if m.args.is_empty() {
                    w.empty("method", &[("name", m.name.clone())]);
                    continue;
                }
                w.open("method", &[("name", m.name.clone())]);
                for a in &m.args {
                    w.empty(
                        "arg",
                        &[("name", a.name.clone()), ("type", a.arg_type.as_str().to_string())],
                    );
                }
                w.close("method");
            }
            w.close("methods");
        }
        w.empty(
            "degradation",
            &[
                ("degradable", self.degradable.to_string()),
                ("unit", self.unit_name.clone()),
                ("max-units", self.max_units.to_string()),
                ("default-units", self.default_units.to_string()),
            ],
        );
        w.close("module");
    }
}

/// Parses a standalone descriptor document.
pub fn parse_descriptor(text: &str) -> Result<ModuleDescriptor, XmlError> {
    let doc = xml::parse_document(text)?;
    let root = xml::root(&doc, "module")?;
    descriptor_from_node(root)
}

pub(crate) fn descriptor_from_node(node: Node<'_, '_>) -> Result<ModuleDescriptor, XmlError> {
    xml::check_attrs(node, &["name", "version"])?;
    let name = xml::req_attr(node, "name")?.to_string();
    if name.is_empty() || name.contains(char::is_whitespace) || name.contains(':') {
        return Err(XmlError::at(node, "module name must be non-empty without spaces or ':'"));
    }
    let version = xml::req_attr(node, "version")?.to_string();
    if version.is_empty() {
        return Err(XmlError::at(node, "version must be non-empty"));
    }
    let children = xml::elements(node, &["variants", "methods", "degradation"])?;

    let variants_node = xml::required_child(node, &children, "variants")?;
    xml::check_attrs(variants_node, &[])?;
    let mut variants = BTreeSet::new();
    for v in xml::elements(variants_node, &["variant"])? {
        xml::check_attrs(v, &[])?;
        let text = xml::leaf_text(v)?;
        let variant: Variant = text.parse().map_err(|e: String| XmlError::at(v, e))?;
        if !variants.insert(variant) {
            return Err(XmlError::at(v, format!("duplicate variant {variant}")));
        }
    }
    if variants.is_empty() {
        return Err(XmlError::at(variants_node, "at least one <variant> is required"));
    }

    let mut methods: Vec<MethodSpec> = Vec::new();
    if let Some(methods_node) = xml::single_child(node, &children, "methods")? {
        xml::check_attrs(methods_node, &[])?;
        for m in xml::elements(methods_node, &["method"])? {
            xml::check_attrs(m, &["name"])?;
            let mname = xml::req_attr(m, "name")?.to_string();
            if mname.is_empty() {
                return Err(XmlError::at(m, "method name must be non-empty"));
            }
            if methods.iter().any(|existing| existing.name == mname) {
                return Err(XmlError::at(m, format!("duplicate method '{mname}'")));
            }
            let mut args: Vec<MethodArg> = Vec::new();
            for a in xml::elements(m, &["arg"])? {
                xml::check_attrs(a, &["name", "type"])?;
                let aname = xml::req_attr(a, "name")?.to_string();
                if aname.is_empty() || args.iter().any(|x| x.name == aname) {
                    return Err(XmlError::at(a, format!("invalid or duplicate argument '{aname}'")));
                }
                let type_text = xml::req_attr(a, "type")?;
                let arg_type = ArgType::parse(type_text)
                    .ok_or_else(|| XmlError::at(a, format!("unknown argument type '{type_text}'")))?;
                args.push(MethodArg { name: aname, arg_type });
            }
            methods.push(MethodSpec { name: mname, args });
        }
    }

    let mut desc = ModuleDescriptor {
        name,
        version,
        variants,
        methods,
        degradable: false,
        unit_name: "unit".into(),
        max_units: 1,
        default_units: 1,
    };
    if let Some(d) = xml::single_child(node, &children, "degradation")? {
        xml::check_attrs(d, &["degradable", "unit", "max-units", "default-units"])?;
        if !d.children().all(|c| c.is_text() && c.text().is_some_and(|t| t.trim().is_empty())) {
            return Err(XmlError::at(d, "<degradation> takes no content"));
        }
        desc.degradable = xml::parse_bool_attr(d, "degradable")?
            .ok_or_else(|| XmlError::at(d, "missing required attribute 'degradable'"))?;
        desc.unit_name = xml::req_attr(d, "unit")?.to_string();
        desc.max_units = xml::parse_attr(d, "max-units")?;
        desc.default_units = xml::parse_attr(d, "default-units")?;
        if desc.default_units > desc.max_units {
            return Err(XmlError::at(d, "default-units exceeds max-units"));
        }
    }
    Ok(desc)
}
