//! Initial scene configuration (`--scene PATH`).
//!
//! ```xml
//! <scene>
//!   <object id="peg-hole" position="0.45 0.10 0.05" orientation="1 0 0 0"/>
//! </scene>
//! ```

use crate::robot::Pose;
use crate::session::types::ShareableObject;
use crate::xml::{self, XmlError, XmlWriter};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneConfig {
    pub objects: Vec<ShareableObject>,
}

impl SceneConfig {
    pub fn from_xml(text: &str) -> Result<Self, XmlError> {
        let doc = xml::parse_document(text)?;
        Self::from_node(xml::root(&doc, "scene")?)
    }

    pub(crate) fn from_node(root: roxmltree::Node<'_, '_>) -> Result<Self, XmlError> {
        xml::check_attrs(root, &[])?;
        let mut objects: Vec<ShareableObject> = Vec::new();
        for node in xml::elements(root, &["object"])? {
            xml::check_attrs(node, &["id", "position", "orientation"])?;
            let id = xml::req_attr(node, "id")?;
            if id.is_empty() || id.starts_with("phantom:") {
                return Err(XmlError::at(node, "object id must be non-empty and not use the phantom: prefix"));
            }
            if objects.iter().any(|o| o.object_id == id) {
                return Err(XmlError::at(node, format!("duplicate object id '{id}'")));
            }
            let position = xml::parse_float_list::<3>(node, "position")?;
            let orientation = match node.attribute("orientation") {
                Some(_) => xml::parse_float_list::<4>(node, "orientation")?,
                None => [1.0, 0.0, 0.0, 0.0],
            };
            let pose = Pose::new(position, orientation);
            if !pose.is_finite() || !pose.is_normalized() {
                return Err(XmlError::at(node, "orientation must be a unit quaternion"));
            }
            objects.push(ShareableObject::scene(id, pose));
        }
        Ok(Self { objects })
    }

    pub fn to_xml(&self) -> String {
        let mut w = XmlWriter::new();
        w.open("scene", &[]);
        for object in &self.objects {
            if let Some(pose) = object.pose() {
                w.empty(
                    "object",
                    &[
                        ("id", object.object_id.clone()),
                        ("position", xml::fmt_floats(&pose.position)),
                        ("orientation", xml::fmt_floats(&pose.orientation)),
                    ],
                );
            }
        }
        w.close("scene");
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = r#"<scene>
  <object id="cube" position="0.4 0 0.1"/>
  <object id="hole" position="0.3 -0.2 0.0" orientation="0 1 0 0"/>
</scene>"#;
        let scene = SceneConfig::from_xml(text).unwrap();
        assert_eq!(scene.objects.len(), 2);
        assert_eq!(SceneConfig::from_xml(&scene.to_xml()).unwrap(), scene);
    }

    #[test]
    fn rejects_duplicates_and_bad_quaternions() {
        let dup = r#"<scene><object id="a" position="0 0 0"/><object id="a" position="0 0 0"/></scene>"#;
        assert!(SceneConfig::from_xml(dup).is_err());
        let bad = r#"<scene><object id="a" position="0 0 0" orientation="2 0 0 0"/></scene>"#;
        assert!(SceneConfig::from_xml(bad).is_err());
    }
}
