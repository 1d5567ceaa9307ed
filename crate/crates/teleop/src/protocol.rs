//! Wire frames for `/ws`. Inbound `cmd` frames carry the pilot's roll, pitch
//! and normalised throttle; outbound frames are `state` snapshots and `err`
//! replies.

use serde::{Deserialize, Serialize};

use tetherlift_core::controllers::LeaderInput;
use tetherlift_sim::Snapshot;

/// A pilot command as sent by a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMessage {
    pub seq: u64,
    pub t_ms: u64,
    /// Roll (rad).
    pub phi: f64,
    /// Pitch (rad).
    pub theta: f64,
    /// Throttle in [0, 1]; 0.5 is the leader's hover thrust.
    pub thrust: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub arm: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub disarm: bool,
    /// Snap the leader back to hover.
    #[serde(default, skip_serializing_if = "is_false")]
    pub reset: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl CommandMessage {
    pub fn new(seq: u64, phi: f64, theta: f64, thrust: f64) -> Self {
        Self { seq, t_ms: 0, phi, theta, thrust, arm: false, disarm: false, reset: false }
    }

    pub fn to_frame(&self) -> String {
        serde_json::to_string(&Inbound::Cmd(*self)).expect("serialisable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Inbound {
    Cmd(CommandMessage),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    State(Box<Snapshot>),
    Err(WireError),
}

impl Outbound {
    pub fn to_frame(&self) -> String {
        serde_json::to_string(self).expect("serialisable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub detail: String,
}

impl WireError {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }
}

/// Bounds a command must satisfy, and the throttle-to-thrust map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandLimits {
    pub max_tilt: f64,
    /// Thrust (N) at full throttle.
    pub max_thrust: f64,
}

impl CommandLimits {
    pub fn check(&self, cmd: &CommandMessage) -> Result<(), WireError> {
        for (name, v, bound) in [("phi", cmd.phi, self.max_tilt), ("theta", cmd.theta, self.max_tilt)] {
            if !(v.abs() <= bound) {
                return Err(WireError::new("out_of_range", format!("{name} = {v} rad outside ±{bound}")));
            }
        }
        if !(0.0..=1.0).contains(&cmd.thrust) {
            return Err(WireError::new("out_of_range", format!("thrust = {} outside [0, 1]", cmd.thrust)));
        }
        if cmd.arm && cmd.disarm {
            return Err(WireError::new("invalid", "arm and disarm in one command"));
        }
        Ok(())
    }

    pub fn input(&self, cmd: &CommandMessage) -> LeaderInput {
        LeaderInput { phi: cmd.phi, theta: cmd.theta, thrust: cmd.thrust * self.max_thrust }
    }

    /// Throttle that maps to `thrust` newtons.
    pub fn throttle(&self, thrust: f64) -> f64 {
        thrust / self.max_thrust
    }
}

/// Per-connection validation: parse, range-check and enforce increasing
/// sequence numbers.
#[derive(Debug, Clone)]
pub struct Validator {
    limits: CommandLimits,
    last_seq: Option<u64>,
}

impl Validator {
    pub fn new(limits: CommandLimits) -> Self {
        Self { limits, last_seq: None }
    }

    pub fn accept(&mut self, text: &str) -> Result<CommandMessage, WireError> {
        let Inbound::Cmd(cmd) = serde_json::from_str(text).map_err(|e| WireError::new("malformed", e.to_string()))?;
        self.limits.check(&cmd)?;
        if let Some(last) = self.last_seq {
            if cmd.seq <= last {
                return Err(WireError::new("stale", format!("seq {} not after {last}", cmd.seq)));
            }
        }
        self.last_seq = Some(cmd.seq);
        Ok(cmd)
    }
}

/// Error frame for anything other than a text frame.
pub fn non_text_frame() -> WireError {
    WireError::new("malformed", "expected a text frame")
}
