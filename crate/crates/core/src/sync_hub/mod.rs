//! Synchronization hub: the session relay state machine, a deterministic
//! in-process simulator built on it, and random workload generation.

pub mod relay;
pub mod simulate;
pub mod workload;

pub use relay::{Action, ConnId, Relay, RelayError, SessionApp, SessionState, DEFAULT_BUFFER_LIMIT};
pub use simulate::{simulate, Scenario, SimulationError, SimulationReport};
pub use workload::{random_document, MutationGenerator};
