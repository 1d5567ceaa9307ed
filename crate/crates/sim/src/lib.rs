//! Scenario files, the simulation loop, batch runs and CSV logging.

pub mod engine;
pub mod error;
pub mod log;
pub mod record;
pub mod scenario;

pub use engine::{Simulation, Snapshot};
pub use error::SimError;
pub use log::{run, RunLog};
pub use scenario::{builtin, builtin_scenarios, Scenario};
