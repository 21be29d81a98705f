//! Declarative scenarios: a scripted stack, timed client actions and
//! assertions evaluated after the run.

mod runner;
mod spec;

pub use runner::{
    builtin_descriptor, predicted_crossing, LockAttempt, run_scenario, AssertionOutcome, RunOptions, RunStats, ScenarioReport,
    Transport,
};
pub use spec::{
    parse_scenario, Assertion, ClientAction, ClientScript, CoreModule, CoreSetup, HotAdd, LatencyProfile, ProbeMode,
    Scenario, TimedAction,
};

use crate::xml::XmlError;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("setup failed: {0}")]
    Setup(String),
}
