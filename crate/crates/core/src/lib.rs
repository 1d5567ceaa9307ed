//! Dynamics, variation-based linearization and leader–follower control for a
//! team of quadcopters carrying a rigid payload on taut cables.
//!
//! Quadcopter 0 is the leader (flown by a human or a scripted policy); the
//! remaining quadcopters are followers that stabilise the payload attitude
//! and their own cable attitude.

pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod linearization;
pub mod manifold;
pub mod serde_rows;
pub mod synthesis;

pub use dynamics::{
    accelerations, energy, quad_position, step, ActuationCommand, Derivatives, QuadInput, QuadParams, SystemParams,
    SystemState,
};
pub use error::{ControlError, DynamicsError, LinearizationError, ManifoldError};
pub use manifold::{RotationMatrix, UnitVector};
