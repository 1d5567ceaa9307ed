//! Real-time teleoperation: a paced simulation loop that takes leader
//! commands and streams snapshots over a WebSocket.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{CommandLimits, CommandMessage, Outbound, Validator, WireError};
pub use server::{run_paced, LoopStats, Server};
pub use session::{Event, TeleopConfig, TeleopLoop};
