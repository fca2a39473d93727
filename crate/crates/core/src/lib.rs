//! Co-simulation data broker.
//!
//! Bridges timestamped external data streams into a fixed-step co-simulation
//! and publishes simulation inputs back out. The output-selection policies
//! are parameterized by `maxage` (how long a record stays valid) and
//! `lookahead` (how many queued records one step may consume).

pub mod bridge;
pub mod clock;
pub mod ingress;
pub mod orchestrator;
pub mod scenario;
pub mod timebase;
pub mod transport;

pub use bridge::{BridgeConfig, BridgeError, BridgeUnit, Decision, Policy, SelectParams, StepOutcome, StepReport};
pub use clock::ClockMode;
pub use ingress::IngestMode;
pub use orchestrator::{run, run_with, RunError, RunFailure, RunOutcome, RunTrace, Scenario, Summary};
pub use timebase::{Duration, SimTime, Value, ValueKind, VariableDecl};
