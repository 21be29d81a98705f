//! Strict XML reading and canonical XML writing.
//!
//! Every XML document in this crate follows the same discipline: a closed set of
//! elements and attributes per parent, no stray text, and errors that carry the
//! element name and the 1-based line where it appears. Output is canonical:
//! fixed element order chosen by the caller, attributes in the order given,
//! two-space indentation, `\n` line endings.

use std::fmt::Write as _;
use std::str::FromStr;

use roxmltree::{Document, Node};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: <{element}>: {message}")]
pub struct XmlError {
    pub line: u32,
    pub element: String,
    pub message: String,
}

impl XmlError {
    pub fn at(node: Node<'_, '_>, message: impl Into<String>) -> Self {
        let pos = node.document().text_pos_at(node.range().start);
        Self {
            line: pos.row,
            element: element_name(node),
            message: message.into(),
        }
    }
}

fn element_name(node: Node<'_, '_>) -> String {
    if node.is_element() {
        node.tag_name().name().to_string()
    } else {
        "#document".to_string()
    }
}

pub fn parse_document(text: &str) -> Result<Document<'_>, XmlError> {
    Document::parse(text).map_err(|e| XmlError {
        line: e.pos().row,
        element: "#document".to_string(),
        message: e.to_string(),
    })
}

/// Checks the root element name and returns it.
pub fn root<'a, 'i>(doc: &'a Document<'i>, name: &str) -> Result<Node<'a, 'i>, XmlError> {
    let node = doc.root_element();
    if node.tag_name().name() != name {
        return Err(XmlError::at(
            node,
            format!("expected root element <{name}>"),
        ));
    }
    Ok(node)
}

/// Rejects any attribute not listed in `allowed`.
pub fn check_attrs(node: Node<'_, '_>, allowed: &[&str]) -> Result<(), XmlError> {
    for attr in node.attributes() {
        if attr.namespace().is_some() || !allowed.contains(&attr.name()) {
            return Err(XmlError::at(
                node,
                format!("unknown attribute '{}'", attr.name()),
            ));
        }
    }
    Ok(())
}

pub fn req_attr<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str, XmlError> {
    node.attribute(name)
        .ok_or_else(|| XmlError::at(node, format!("missing required attribute '{name}'")))
}

pub fn parse_attr<T: FromStr>(node: Node<'_, '_>, name: &str) -> Result<T, XmlError> {
    let raw = req_attr(node, name)?;
    raw.trim()
        .parse()
        .map_err(|_| XmlError::at(node, format!("attribute '{name}' has invalid value '{raw}'")))
}

pub fn parse_opt_attr<T: FromStr>(node: Node<'_, '_>, name: &str) -> Result<Option<T>, XmlError> {
    match node.attribute(name) {
        None => Ok(None),
        Some(_) => parse_attr(node, name).map(Some),
    }
}

pub fn parse_bool_attr(node: Node<'_, '_>, name: &str) -> Result<Option<bool>, XmlError> {
    match node.attribute(name) {
        None => Ok(None),
        Some("true") => Ok(Some(true)),
        Some("false") => Ok(Some(false)),
        Some(other) => Err(XmlError::at(
            node,
            format!("attribute '{name}' must be true or false, got '{other}'"),
        )),
    }
}

/// Parses a whitespace-separated list of floats of exactly `N` entries.
pub fn parse_float_list<const N: usize>(node: Node<'_, '_>, name: &str) -> Result<[f64; N], XmlError> {
    let raw = req_attr(node, name)?;
    let values: Vec<f64> = raw
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| XmlError::at(node, format!("attribute '{name}' is not a number list")))?;
    values.try_into().map_err(|v: Vec<f64>| {
        XmlError::at(
            node,
            format!("attribute '{name}' needs {N} numbers, got {}", v.len()),
        )
    })
}

/// Element children, rejecting unexpected elements and non-whitespace text.
pub fn elements<'a, 'i>(node: Node<'a, 'i>, allowed: &[&str]) -> Result<Vec<Node<'a, 'i>>, XmlError> {
    let mut out = Vec::new();
    for child in node.children() {
        if child.is_element() {
            if !allowed.contains(&child.tag_name().name()) {
                return Err(XmlError::at(child, "unexpected element"));
            }
            out.push(child);
        } else if child.is_text()
            && child.text().is_some_and(|t| !t.trim().is_empty()) {
                return Err(XmlError::at(node, "unexpected text content"));
            }
    }
    Ok(out)
}

/// Returns the single child element named `name`, or `None` if absent.
pub fn single_child<'a, 'i>(
    parent: Node<'a, 'i>,
    children: &[Node<'a, 'i>],
    name: &str,
) -> Result<Option<Node<'a, 'i>>, XmlError> {
    let mut found = children.iter().filter(|c| c.tag_name().name() == name);
    let first = found.next().copied();
    if let Some(dup) = found.next() {
        return Err(XmlError::at(*dup, format!("duplicate <{name}> inside <{}>", element_name(parent))));
    }
    Ok(first)
}

pub fn required_child<'a, 'i>(
    parent: Node<'a, 'i>,
    children: &[Node<'a, 'i>],
    name: &str,
) -> Result<Node<'a, 'i>, XmlError> {
    single_child(parent, children, name)?
        .ok_or_else(|| XmlError::at(parent, format!("missing required element <{name}>")))
}

/// Trimmed text of a leaf element; child elements are rejected.
pub fn leaf_text<'a>(node: Node<'a, '_>) -> Result<&'a str, XmlError> {
    if node.children().any(|c| c.is_element()) {
        return Err(XmlError::at(node, "expected text only"));
    }
    Ok(node.text().map(str::trim).unwrap_or(""))
}

pub fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for ch in value.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            c => out.push(c),
        }
    }
    out
}

/// Canonical XML emitter.
#[derive(Debug, Default)]
pub struct XmlWriter {
    out: String,
    depth: usize,
}

impl XmlWriter {
    pub fn new() -> Self {
        let mut out = String::new();
        out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        Self { out, depth: 0 }
    }

    fn start_tag(&mut self, name: &str, attrs: &[(&str, String)]) {
        for _ in 0..self.depth {
            self.out.push_str("  ");
        }
        self.out.push('<');
        self.out.push_str(name);
        for (key, value) in attrs {
            let _ = write!(self.out, " {key}=\"{}\"", escape(value));
        }
    }

    pub fn open(&mut self, name: &str, attrs: &[(&str, String)]) {
        self.start_tag(name, attrs);
        self.out.push_str(">\n");
        self.depth += 1;
    }

    pub fn empty(&mut self, name: &str, attrs: &[(&str, String)]) {
        self.start_tag(name, attrs);
        self.out.push_str("/>\n");
    }

    pub fn text(&mut self, name: &str, attrs: &[(&str, String)], text: &str) {
        self.start_tag(name, attrs);
        let _ = writeln!(self.out, ">{}</{name}>", escape(text));
    }

    pub fn close(&mut self, name: &str) {
        self.depth -= 1;
        for _ in 0..self.depth {
            self.out.push_str("  ");
        }
        let _ = writeln!(self.out, "</{name}>");
    }

    pub fn finish(self) -> String {
        debug_assert_eq!(self.depth, 0, "unbalanced XML writer");
        self.out
    }
}

/// Formats a float so that parsing it back yields the identical value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_floats(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")
}
