//! Robot configuration: DH table, joint limits, motion and fixture parameters.
//!
//! XML form (`--robot PATH`):
//!
//! ```xml
//! <robot>
//!   <joint index="1" a="0" d="0.33" alpha-deg="-90" min-deg="-170" max-deg="170"/>
//!   ... six joints ...
//!   <motion v-max="0.5" tick-ms="10"/>
//!   <fixtures r-on="0.10" r-off="0.15"/>
//! </robot>
//! ```

use crate::robot::types::{JointConfig, JOINT_COUNT};
use crate::xml::{self, XmlError};

/// Standard Denavit-Hartenberg parameters, one entry per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct DhTable {
    pub a: [f64; JOINT_COUNT],
    pub d: [f64; JOINT_COUNT],
    pub alpha: [f64; JOINT_COUNT],
}

impl Default for DhTable {
    fn default() -> Self {
        let deg = f64::to_radians;
        Self {
            a: [0.0, 0.30, 0.075, 0.0, 0.0, 0.0],
            d: [0.33, 0.0, 0.0, 0.32, 0.0, 0.08],
            alpha: [deg(-90.0), 0.0, deg(-90.0), deg(90.0), deg(-90.0), 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLimits {
    pub lower: [f64; JOINT_COUNT],
    pub upper: [f64; JOINT_COUNT],
}

impl Default for JointLimits {
    fn default() -> Self {
        let bound = 170f64.to_radians();
        Self {
            lower: [-bound; JOINT_COUNT],
            upper: [bound; JOINT_COUNT],
        }
    }
}

impl JointLimits {
    /// Index of the first joint outside its interval, if any.
    pub fn first_violation(&self, q: &JointConfig) -> Option<usize> {
        q.0.iter()
            .enumerate()
            .find(|(i, v)| !v.is_finite() || **v < self.lower[*i] || **v > self.upper[*i])
            .map(|(i, _)| i)
    }

    pub fn contains(&self, q: &JointConfig) -> bool {
        self.first_violation(q).is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureRadii {
    pub r_on: f64,
    pub r_off: f64,
}

impl Default for FixtureRadii {
    fn default() -> Self {
        Self {
            r_on: 0.10,
            r_off: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotConfig {
    pub dh: DhTable,
    pub limits: JointLimits,
    /// Per-joint speed limit, rad/s.
    pub v_max: f64,
    pub tick_ms: u64,
    pub fixtures: FixtureRadii,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            dh: DhTable::default(),
            limits: JointLimits::default(),
            v_max: 0.5,
            tick_ms: 10,
            fixtures: FixtureRadii::default(),
        }
    }
}

impl RobotConfig {
    pub fn from_xml(text: &str) -> Result<Self, XmlError> {
        let doc = xml::parse_document(text)?;
        let root = xml::root(&doc, "robot")?;
        xml::check_attrs(root, &[])?;
        let children = xml::elements(root, &["joint", "motion", "fixtures"])?;
        let mut cfg = RobotConfig::default();
        let mut seen = [false; JOINT_COUNT];
        for node in children.iter().filter(|n| n.has_tag_name("joint")) {
            xml::check_attrs(*node, &["index", "a", "d", "alpha-deg", "min-deg", "max-deg"])?;
            let index: usize = xml::parse_attr(*node, "index")?;
            if !(1..=JOINT_COUNT).contains(&index) {
                return Err(XmlError::at(*node, "joint index must be 1..6"));
            }
            let i = index - 1;
            if std::mem::replace(&mut seen[i], true) {
                return Err(XmlError::at(*node, format!("joint {index} declared twice")));
            }
            cfg.dh.a[i] = xml::parse_attr(*node, "a")?;
            cfg.dh.d[i] = xml::parse_attr(*node, "d")?;
            cfg.dh.alpha[i] = xml::parse_attr::<f64>(*node, "alpha-deg")?.to_radians();
            if let Some(lo) = xml::parse_opt_attr::<f64>(*node, "min-deg")? {
                cfg.limits.lower[i] = lo.to_radians();
            }
            if let Some(hi) = xml::parse_opt_attr::<f64>(*node, "max-deg")? {
                cfg.limits.upper[i] = hi.to_radians();
            }
            if cfg.limits.lower[i] >= cfg.limits.upper[i] {
                return Err(XmlError::at(*node, "min-deg must be below max-deg"));
            }
        }
        if seen.iter().any(|s| *s) && !seen.iter().all(|s| *s) {
            return Err(XmlError::at(root, "either all six joints or none must be declared"));
        }
        if let Some(node) = xml::single_child(root, &children, "motion")? {
            xml::check_attrs(node, &["v-max", "tick-ms"])?;
            if let Some(v) = xml::parse_opt_attr::<f64>(node, "v-max")? {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(XmlError::at(node, "v-max must be positive"));
                }
                cfg.v_max = v;
            }
            if let Some(t) = xml::parse_opt_attr::<u64>(node, "tick-ms")? {
                if t == 0 || t > 100 {
                    return Err(XmlError::at(node, "tick-ms must be in 1..=100"));
                }
                cfg.tick_ms = t;
            }
        }
        if let Some(node) = xml::single_child(root, &children, "fixtures")? {
            xml::check_attrs(node, &["r-on", "r-off"])?;
            let r_on: f64 = xml::parse_attr(node, "r-on")?;
            let r_off: f64 = xml::parse_attr(node, "r-off")?;
            if !(r_on > 0.0 && r_on < r_off) {
                return Err(XmlError::at(node, "need 0 < r-on < r-off"));
            }
            cfg.fixtures = FixtureRadii { r_on, r_off };
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides() {
        let text = r#"<robot>
  <motion v-max="1.0" tick-ms="5"/>
  <fixtures r-on="0.05" r-off="0.08"/>
</robot>"#;
        let cfg = RobotConfig::from_xml(text).unwrap();
        assert_eq!(cfg.v_max, 1.0);
        assert_eq!(cfg.tick_ms, 5);
        assert_eq!(cfg.fixtures.r_on, 0.05);
        assert_eq!(cfg.dh, DhTable::default());
    }

    #[test]
    fn rejects_inverted_band() {
        let err = RobotConfig::from_xml(r#"<robot><fixtures r-on="0.2" r-off="0.1"/></robot>"#).unwrap_err();
        assert_eq!(err.element, "fixtures");
    }

    #[test]
    fn limit_violation_names_joint() {
        let limits = JointLimits::default();
        let mut q = JointConfig::HOME;
        q.0[3] = 3.1;
        assert_eq!(limits.first_violation(&q), Some(3));
        q.0[3] = f64::NAN;
        assert_eq!(limits.first_violation(&q), Some(3));
    }
}
