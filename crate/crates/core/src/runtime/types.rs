use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SignalKind {
    Load,
    Unload,
    Safe,
}

/// Lifecycle signal from the core to a module. `degree` is present only for SAFE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSignal {
    pub kind: SignalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<u32>,
}

impl CoreSignal {
    pub const LOAD: CoreSignal = CoreSignal {
        kind: SignalKind::Load,
        degree: None,
    };
    pub const UNLOAD: CoreSignal = CoreSignal {
        kind: SignalKind::Unload,
        degree: None,
    };

    pub fn safe(degree: u32) -> Self {
        Self {
            kind: SignalKind::Safe,
            degree: Some(degree),
        }
    }

    pub fn is_well_formed(&self) -> bool {
        (self.kind == SignalKind::Safe) == self.degree.is_some()
    }
}

impl std::fmt::Display for CoreSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.kind, self.degree) {
            (SignalKind::Load, _) => f.write_str("LOAD"),
            (SignalKind::Unload, _) => f.write_str("UNLOAD"),
            (SignalKind::Safe, Some(d)) => write!(f, "SAFE {d}"),
            (SignalKind::Safe, None) => f.write_str("SAFE"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModuleStatus {
    Ok,
    Degraded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateReport {
    pub module: String,
    pub status: ModuleStatus,
    pub active_units: u32,
    pub detail: String,
}

impl StateReport {
    pub fn new(module: impl Into<String>, status: ModuleStatus, active_units: u32, detail: impl Into<String>) -> Self {
        Self {
            module: module.into(),
            status,
            active_units,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySample {
    pub source: String,
    pub rtt_ms: f64,
    pub ts_ms: u64,
    /// Set when the probe timed out and `rtt_ms` is the timeout value.
    #[serde(default)]
    pub timed_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Classic,
    Mobile,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Classic => "CLASSIC",
            Variant::Mobile => "MOBILE",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "CLASSIC" => Ok(Variant::Classic),
            "MOBILE" => Ok(Variant::Mobile),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    ClassicMode,
    SafeMode,
}
