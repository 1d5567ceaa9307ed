//! Versioned scenario files (JSON) and the built-in scenarios.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use tetherlift_core::controllers::{ControlGains, LeaderInput};
use tetherlift_core::dynamics::default_quad_inertia;
use tetherlift_core::manifold::{e3, exp_so3, RotationMatrix, UnitVector};
use tetherlift_core::{QuadParams, SystemParams, SystemState};

use crate::error::SimError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub params: SystemParams,
    /// Payload position at hover (m).
    #[serde(default)]
    pub hover_position: [f64; 3],
    pub initial: InitialCondition,
    pub leader: LeaderPolicy,
    /// Synthesised from the linear model when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<ControlGains>,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default = "default_log_interval")]
    pub log_interval: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
}

fn default_dt() -> f64 {
    0.001
}

fn default_log_interval() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    Hover,
    /// Every cable tilted by `angle_deg` towards azimuth `azimuth_deg`
    /// (measured from e₁ in the horizontal plane); payload level, all at rest.
    TiltedCables {
        angle_deg: f64,
        #[serde(default)]
        azimuth_deg: f64,
    },
    /// Hover shape displaced by `offset` and the payload rotated by
    /// `rotation` (axis-angle, rad); cables vertical.
    OffsetPayload {
        #[serde(default)]
        offset: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
    State {
        state: SystemState,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LeaderPolicy {
    /// Leader holds its hover command.
    Hover,
    /// Commands arrive from outside (teleoperation); hover until then.
    Teleop,
    /// Point-to-point PD moving the payload through `points`.
    Waypoints {
        points: Vec<[f64; 3]>,
        /// Time to hold each waypoint after arrival (s).
        #[serde(default = "default_dwell")]
        dwell: f64,
        /// Payload distance that counts as arrival (m).
        #[serde(default = "default_arrival")]
        arrival_radius: f64,
    },
    /// Piecewise-constant leader commands; each segment holds from its
    /// start time until the next one begins.
    Script { segments: Vec<ScriptSegment> },
    /// Leader commands read from a teleop record file (JSON lines).
    Replay { file: String },
}

fn default_dwell() -> f64 {
    2.0
}

fn default_arrival() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSegment {
    pub t: f64,
    pub phi: f64,
    pub theta: f64,
    pub thrust: f64,
}

impl ScriptSegment {
    pub fn input(&self) -> LeaderInput {
        LeaderInput { phi: self.phi, theta: self.theta, thrust: self.thrust }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default = "yes")]
    pub pac: bool,
    #[serde(default = "yes")]
    pub cac: bool,
    /// Outer-loop rate (Hz); the attitude PID runs every integration step.
    #[serde(default = "default_control_hz")]
    pub control_hz: f64,
}

fn yes() -> bool {
    true
}

fn default_control_hz() -> f64 {
    100.0
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { pac: true, cac: true, control_hz: default_control_hz() }
    }
}

/// Zero-mean Gaussian noise on the state the outer loops see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Position (m).
    #[serde(default)]
    pub position: f64,
    /// Velocity (m/s).
    #[serde(default)]
    pub velocity: f64,
    /// Payload and cable attitude (rad).
    #[serde(default)]
    pub attitude: f64,
    /// Angular rates (rad/s).
    #[serde(default)]
    pub rate: f64,
}

/// Integer ratio `a / b`, if it is one to within rounding.
pub fn ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() <= 1e-9 * k).then_some(k as usize)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let s: Self = serde_json::from_str(text).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A built-in name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, SimError> {
        match builtin(name_or_path) {
            Some(s) => Ok(s),
            None => Self::load(name_or_path),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn hover_position(&self) -> Vector3<f64> {
        Vector3::from(self.hover_position)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.version != SCHEMA_VERSION {
            return bad(format!("unsupported version {} (expected {SCHEMA_VERSION})", self.version));
        }
        self.params.validate().map_err(|e| SimError::Scenario(e.to_string()))?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if !(self.dt > 0.0 && self.dt <= tetherlift_core::dynamics::MAX_STEP) {
            return bad(format!("dt must be in (0, 0.01], got {}", self.dt));
        }
        if ratio(self.log_interval, self.dt).is_none() {
            return bad(format!("log interval {} is not a multiple of dt {}", self.log_interval, self.dt));
        }
        if !(self.control.control_hz > 0.0) || ratio(1.0 / self.control.control_hz, self.dt).is_none() {
            return bad(format!("control period 1/{} Hz is not a multiple of dt {}", self.control.control_hz, self.dt));
        }
        if let Some(g) = &self.gains {
            g.validate(self.params.n()).map_err(|e| SimError::Scenario(e.to_string()))?;
        }
        match &self.leader {
            LeaderPolicy::Waypoints { points, dwell, arrival_radius } => {
                if points.is_empty() {
                    return bad("waypoint list is empty".into());
                }
                if !(*dwell >= 0.0) || !(*arrival_radius > 0.0) {
                    return bad("dwell must be ≥ 0 and arrival radius > 0".into());
                }
            }
            LeaderPolicy::Script { segments } => {
                if segments.is_empty() {
                    return bad("script has no segments".into());
                }
                if segments.windows(2).any(|w| w[1].t <= w[0].t) {
                    return bad("script segment times must increase".into());
                }
                if segments.iter().any(|s| s.thrust < 0.0 || !s.phi.is_finite() || !s.theta.is_finite()) {
                    return bad("script segments need finite angles and thrust ≥ 0".into());
                }
            }
            _ => {}
        }
        if let Some(n) = &self.noise {
            if [n.position, n.velocity, n.attitude, n.rate].iter().any(|s| !(*s >= 0.0)) {
                return bad("noise standard deviations must be ≥ 0".into());
            }
        }
        if let InitialCondition::State { state } = &self.initial {
            state.validate(&self.params).map_err(|e| SimError::Scenario(e.to_string()))?;
        }
        Ok(())
    }

    /// Initial state at the hover position `x0_e`.
    pub fn initial_state(&self) -> Result<SystemState, SimError> {
        let x0 = self.hover_position();
        let down = UnitVector::new(-e3()).expect("unit");
        let n = self.params.n();
        Ok(match &self.initial {
            InitialCondition::Hover => SystemState::at_rest(x0, RotationMatrix::identity(), &vec![down; n]),
            InitialCondition::TiltedCables { angle_deg, azimuth_deg } => {
                let az = azimuth_deg.to_radians();
                // rotating −e₃ about this axis moves the cable's lower end toward the azimuth
                let axis = Vector3::new(az.sin(), -az.cos(), 0.0);
                let q = exp_so3(&(axis * angle_deg.to_radians())).into_inner() * -e3();
                let q = UnitVector::new_normalize(q).map_err(|e| SimError::Scenario(e.to_string()))?;
                SystemState::at_rest(x0, RotationMatrix::identity(), &vec![q; n])
            }
            InitialCondition::OffsetPayload { offset, rotation } => {
                SystemState::at_rest(x0 + Vector3::from(*offset), exp_so3(&Vector3::from(*rotation)), &vec![down; n])
            }
            InitialCondition::State { state } => state.clone(),
        })
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["rod-2quad", "rod-2quad-square", "triangle-3quad", "single-quad-pendulum"];

pub fn builtin_scenarios() -> Vec<Scenario> {
    BUILTIN_NAMES.iter().map(|n| builtin(n).expect("builtin")).collect()
}

fn quad(attachment: Vector3<f64>) -> QuadParams {
    QuadParams { mass: 0.052, inertia: default_quad_inertia(), cable_length: 0.5, attachment }
}

/// 60 cm, 24 g strip carried at its ends.
pub fn rod_params() -> SystemParams {
    let (m, len) = (0.024, 0.6);
    let j = m * len * len / 12.0;
    SystemParams {
        payload_mass: m,
        // a 60 × 2.6 × 0.3 cm strip about its long axis
        payload_inertia: Matrix3::from_diagonal(&Vector3::new(4.68e-7, j, j)),
        quads: vec![quad(Vector3::new(-0.3, 0.0, 0.0)), quad(Vector3::new(0.3, 0.0, 0.0))],
        gravity: 9.81,
    }
}

/// 60 cm equilateral lamina, 23 g, carried at its vertices.
pub fn triangle_params() -> SystemParams {
    let (m, a) = (0.023, 0.6);
    let r = a / 3f64.sqrt();
    let j = m * a * a / 24.0;
    SystemParams {
        payload_mass: m,
        payload_inertia: Matrix3::from_diagonal(&Vector3::new(j, j, 2.0 * j)),
        quads: vec![
            quad(Vector3::new(-r, 0.0, 0.0)),
            quad(Vector3::new(0.5 * r, -0.5 * a, 0.0)),
            quad(Vector3::new(0.5 * r, 0.5 * a, 0.0)),
        ],
        gravity: 9.81,
    }
}

/// One quadcopter and a small point-like payload hanging below it.
pub fn pendulum_params() -> SystemParams {
    SystemParams {
        payload_mass: 0.024,
        payload_inertia: Matrix3::identity() * 1e-6,
        quads: vec![quad(Vector3::zeros())],
        gravity: 9.81,
    }
}

/// Open-loop leader stick pattern that carries the rod around a square of
/// roughly 2 m: after 2 s of hover, legs along +e₁, +e₂, −e₁, −e₂, each
/// tilting for 2 s, coasting 3 s, braking 2 s and pausing 0.5 s. Sideways
/// legs use a smaller tilt because the follower then pulls along.
pub fn square_script(hover_thrust: f64) -> Vec<ScriptSegment> {
    let (tilt, side) = (0.035, 0.55);
    let phases = [(1.0, 2.0), (0.0, 3.0), (-1.0, 2.0), (0.0, 0.5)];
    let mut t = 2.0;
    let mut out = vec![ScriptSegment { t: 0.0, phi: 0.0, theta: 0.0, thrust: hover_thrust }];
    for (ex, ey) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)] {
        for (sign, dur) in phases {
            let theta: f64 = sign * ex * tilt;
            let phi: f64 = -sign * ey * tilt * side;
            out.push(ScriptSegment { t, phi, theta, thrust: hover_thrust / (theta.cos() * phi.cos()) });
            t += dur;
        }
    }
    out
}

/// Payload waypoints O, A, B, C, D: the centre and corners of a 2 m square
/// at 1 m altitude.
pub fn square_waypoints() -> Vec<[f64; 3]> {
    vec![[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [-1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [1.0, -1.0, 1.0]]
}

pub fn builtin(name: &str) -> Option<Scenario> {
    let base = |name: &str, description: &str, params: SystemParams| Scenario {
        version: SCHEMA_VERSION,
        name: name.into(),
        description: description.into(),
        params,
        hover_position: [0.0; 3],
        initial: InitialCondition::Hover,
        leader: LeaderPolicy::Hover,
        gains: None,
        control: ControlConfig::default(),
        dt: 0.001,
        duration: 10.0,
        log_interval: 0.01,
        seed: 0,
        noise: None,
    };
    match name {
        "rod-2quad" => Some(Scenario {
            initial: InitialCondition::TiltedCables { angle_deg: 10.0, azimuth_deg: 0.0 },
            ..base(name, "two quadcopters carrying a 60 cm rod; cables start tilted 10°", rod_params())
        }),
        "rod-2quad-square" => {
            let params = rod_params();
            let thrust = (params.quads[0].mass + params.payload_mass / 2.0) * params.gravity;
            Some(Scenario {
                leader: LeaderPolicy::Script { segments: square_script(thrust) },
                duration: 32.0,
                ..base(name, "the rod carried around a 2 m square by scripted leader commands", params)
            })
        }
        "triangle-3quad" => Some(Scenario {
            hover_position: square_waypoints()[0],
            leader: LeaderPolicy::Waypoints { points: square_waypoints(), dwell: 2.0, arrival_radius: 0.1 },
            duration: 60.0,
            ..base(name, "three quadcopters carrying a triangular plate through a square", triangle_params())
        }),
        "single-quad-pendulum" => Some(base(name, "one quadcopter with a point-like payload", pendulum_params())),
        _ => None,
    }
}
