//! Worker registry, heartbeat-driven qubit ledger, failure eviction and
//! qubit-aware, load-aware circuit placement.

pub mod fleet;
pub mod server;
pub mod sim;
pub mod state;

pub use fleet::{FleetConfig, FleetWorker};
pub use server::{ClockMode, ManagerHandle, ServerConfig, ServerError};
pub use state::{
    AssignOutcome, CoManager, CompleteOutcome, Event, EventKind, HeartbeatOutcome, ManagerConfig, ManagerError,
    PendingCircuit, Placement, WorkerRecord, DEFAULT_HEARTBEAT_PERIOD,
};
