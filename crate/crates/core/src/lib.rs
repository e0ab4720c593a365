//! Distributed variational quantum learning.
//!
//! The crate bundles an exact statevector simulator, the circuit format the
//! trainer ships to remote workers, the training loop itself, and the
//! co-manager that places circuits on a fleet of simulated quantum workers.

pub mod circuit;
pub mod client;
pub mod comanager;
pub mod dataset;
pub mod experiment;
pub mod protocol;
pub mod record;
pub mod segmentation;
pub mod statevector;
pub mod trainer;
pub mod worker;
