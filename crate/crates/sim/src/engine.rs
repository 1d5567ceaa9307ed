//! The simulation loop: outer loops at the control rate, attitude PID and
//! full-mode dynamics every step.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use tetherlift_core::controllers::{
    allocate, follower_terms, leader_pd, AttitudePid, ControlGains, FollowerCommand, LeaderInput,
};
use tetherlift_core::dynamics::{energy, quad_position, CableState};
use tetherlift_core::linearization::{build_equilibrium, HoverEquilibrium};
use tetherlift_core::manifold::{config_error_cable, config_error_payload, e3, exp_so3, RotationMatrix, UnitVector};
use tetherlift_core::synthesis::default_gains;
use tetherlift_core::{accelerations, step, ActuationCommand, QuadInput, SystemParams, SystemState};

use crate::error::SimError;
use crate::record::read_applied_inputs;
use crate::scenario::{ratio, ControlConfig, LeaderPolicy, NoiseConfig, Scenario};

/// Leader commands as a step-indexed schedule.
#[derive(Debug, Clone)]
enum LeaderDriver {
    Hold,
    External,
    Waypoints { points: Vec<Vector3<f64>>, dwell: f64, radius: f64, index: usize, arrived: Option<f64> },
    Schedule { entries: Vec<(u64, LeaderInput)>, next: usize },
}

/// Everything observable about the system at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub step: u64,
    pub state: SystemState,
    pub quad_positions: Vec<Vector3<f64>>,
    pub psi_q: Vec<f64>,
    pub psi_r0: f64,
    pub leader_input: LeaderInput,
    /// Attitude and thrust set-points, leader first.
    pub commands: Vec<FollowerCommand>,
    pub saturated: Vec<bool>,
    pub tensions: Vec<f64>,
    pub kinetic_energy: f64,
    pub potential_energy: f64,
    /// Index of the active waypoint, for waypoint scenarios.
    pub waypoint: Option<usize>,
}

/// Cable error against the hover direction −e₃.
pub fn psi_cable(q: &UnitVector) -> f64 {
    config_error_cable(&UnitVector::new(-e3()).expect("unit"), q)
}

/// Payload attitude error against the level attitude.
pub fn psi_payload(r: &RotationMatrix) -> f64 {
    config_error_payload(&RotationMatrix::identity(), r)
}

pub struct Simulation {
    params: SystemParams,
    eq: HoverEquilibrium,
    gains: ControlGains,
    control: ControlConfig,
    dt: f64,
    steps_per_tick: u64,
    state: SystemState,
    step: u64,
    driver: LeaderDriver,
    external: LeaderInput,
    leader_input: LeaderInput,
    commands: Vec<FollowerCommand>,
    saturated: Vec<bool>,
    pids: Vec<AttitudePid>,
    inputs: Vec<QuadInput>,
    noise: Option<(NoiseConfig, ChaCha8Rng)>,
}

impl Simulation {
    /// Builds the loop for `scenario`, synthesising gains if it has none.
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let eq = build_equilibrium(&scenario.params, scenario.hover_position())
            .map_err(|e| SimError::Scenario(e.to_string()))?;
        let gains = match &scenario.gains {
            Some(g) => g.clone(),
            None => default_gains(&scenario.params, &eq).map_err(|e| SimError::Scenario(format!("gain synthesis: {e}")))?,
        };
        Self::with_gains(scenario, gains)
    }

    pub fn with_gains(scenario: &Scenario, gains: ControlGains) -> Result<Self, SimError> {
        scenario.validate()?;
        let params = scenario.params.clone();
        let n = params.n();
        gains.validate(n).map_err(|e| SimError::Scenario(e.to_string()))?;
        let eq = build_equilibrium(&params, scenario.hover_position()).map_err(|e| SimError::Scenario(e.to_string()))?;
        if (scenario.control.pac || scenario.control.cac) && (1..n).any(|i| gains.follower(i).is_none()) {
            return Err(SimError::Scenario("every follower needs PAC/CAC gains".into()));
        }
        let dt = scenario.dt;
        let steps_per_tick = ratio(1.0 / scenario.control.control_hz, dt).expect("validated") as u64;
        let driver = match &scenario.leader {
            LeaderPolicy::Hover => LeaderDriver::Hold,
            LeaderPolicy::Teleop => LeaderDriver::External,
            LeaderPolicy::Waypoints { points, dwell, arrival_radius } => LeaderDriver::Waypoints {
                points: points.iter().map(|p| Vector3::from(*p)).collect(),
                dwell: *dwell,
                radius: *arrival_radius,
                index: 0,
                arrived: None,
            },
            LeaderPolicy::Script { segments } => LeaderDriver::Schedule {
                entries: segments.iter().map(|s| ((s.t / dt).round() as u64, s.input())).collect(),
                next: 0,
            },
            LeaderPolicy::Replay { file } => LeaderDriver::Schedule { entries: read_applied_inputs(file)?, next: 0 },
        };
        let state = scenario.initial_state()?;
        state.validate(&params).map_err(|e| SimError::Scenario(e.to_string()))?;
        let hover = LeaderInput::hover(eq.thrust[0]);
        let noise = scenario.noise.map(|c| (c, ChaCha8Rng::seed_from_u64(scenario.seed)));
        let mut sim = Self {
            eq,
            gains,
            control: scenario.control,
            dt,
            steps_per_tick,
            state,
            step: 0,
            driver,
            external: hover,
            leader_input: hover,
            commands: vec![hover.as_command(); n],
            saturated: vec![false; n],
            pids: vec![AttitudePid::new(); n],
            inputs: vec![QuadInput { thrust: 0.0, moment: Vector3::zeros() }; n],
            noise,
            params,
        };
        sim.control_tick()?;
        sim.attitude_loop();
        Ok(sim)
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn equilibrium(&self) -> &HoverEquilibrium {
        &self.eq
    }

    pub fn gains(&self) -> &ControlGains {
        &self.gains
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps_per_tick(&self) -> u64 {
        self.steps_per_tick
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    /// Leader input currently applied.
    pub fn leader_input(&self) -> LeaderInput {
        self.leader_input
    }

    /// Leader hover input.
    pub fn hover_input(&self) -> LeaderInput {
        LeaderInput::hover(self.eq.thrust[0])
    }

    /// Leader input for teleoperated scenarios; applied at the next control tick.
    pub fn set_leader_input(&mut self, input: LeaderInput) {
        self.external = input;
    }

    /// True when the last step (or construction) ran a control tick.
    pub fn at_control_tick(&self) -> bool {
        self.step.is_multiple_of(self.steps_per_tick)
    }

    /// Advances one integration step.
    pub fn step(&mut self) -> Result<(), SimError> {
        let cmd = ActuationCommand::Full(self.inputs.clone());
        self.state = step(&self.state, &cmd, &self.params, self.dt).map_err(|e| self.numeric(e.to_string()))?;
        self.step += 1;
        if self.at_control_tick() {
            self.control_tick()?;
        }
        self.attitude_loop();
        Ok(())
    }

    fn numeric(&self, message: String) -> SimError {
        SimError::Numeric { t: self.time(), message, last_state: Box::new(self.state.clone()) }
    }

    fn attitude_loop(&mut self) {
        for i in 0..self.params.n() {
            let q = &self.state.quads[i];
            let moment = self.pids[i].update(&q.r, &q.omega, &self.commands[i], &self.gains.pid, self.dt);
            self.inputs[i] = QuadInput { thrust: self.commands[i].thrust.max(0.0), moment };
        }
    }

    fn control_tick(&mut self) -> Result<(), SimError> {
        let measured = self.measured_state()?;
        let t = self.time();
        let step = self.step;
        let hover = self.hover_input();
        let mut leader_sat = false;
        let input = match &mut self.driver {
            LeaderDriver::Hold => hover,
            LeaderDriver::External => self.external,
            LeaderDriver::Waypoints { points, dwell, radius, index, arrived } => {
                let target = points[*index];
                if (measured.x0 - target).norm() <= *radius {
                    let since = *arrived.get_or_insert(t);
                    if t - since >= *dwell && *index + 1 < points.len() {
                        *index += 1;
                        *arrived = None;
                    }
                } else if *index + 1 < points.len() {
                    *arrived = None;
                }
                let qp = &self.params.quads[0];
                let leader_target = points[*index] + qp.attachment + e3() * qp.cable_length;
                let (li, sat) = leader_pd(&measured, &self.params, &self.eq, &leader_target, &self.gains);
                leader_sat = sat;
                li
            }
            LeaderDriver::Schedule { entries, next } => {
                while *next < entries.len() && entries[*next].0 <= step {
                    *next += 1;
                }
                if *next == 0 {
                    hover
                } else {
                    entries[*next - 1].1
                }
            }
        };
        let bound = self.gains.max_tilt;
        let clamped = LeaderInput {
            phi: input.phi.clamp(-bound, bound),
            theta: input.theta.clamp(-bound, bound),
            thrust: input.thrust.max(0.0),
        };
        self.saturated[0] = leader_sat || clamped != input;
        self.leader_input = clamped;
        self.commands[0] = clamped.as_command();

        for i in 1..self.params.n() {
            let mut u = self.eq.u[i];
            if self.control.pac || self.control.cac {
                let terms = follower_terms(&measured, &self.eq, &self.gains, i).map_err(|e| self.numeric(e.to_string()))?;
                if self.control.pac {
                    u += terms.pac;
                }
                if self.control.cac {
                    u += terms.cac;
                }
            }
            let (cmd, sat) = allocate(&u, self.params.quads[i].mass, self.params.gravity, bound);
            self.commands[i] = cmd;
            self.saturated[i] = sat;
        }
        Ok(())
    }

    /// The state the outer loops see: the true state, plus noise if configured.
    fn measured_state(&mut self) -> Result<SystemState, SimError> {
        let Some((cfg, rng)) = &mut self.noise else {
            return Ok(self.state.clone());
        };
        let mut draw = |sigma: f64| -> Vector3<f64> {
            if sigma == 0.0 {
                return Vector3::zeros();
            }
            let d = Normal::new(0.0, sigma).expect("σ ≥ 0");
            Vector3::from_fn(|_, _| d.sample(rng))
        };
        let mut s = self.state.clone();
        s.x0 += draw(cfg.position);
        s.v0 += draw(cfg.velocity);
        s.r0 = RotationMatrix::new(*s.r0 * *exp_so3(&draw(cfg.attitude))).map_err(|e| SimError::Scenario(e.to_string()))?;
        s.omega0 += draw(cfg.rate);
        for c in &mut s.cables {
            let q = UnitVector::new_normalize(*exp_so3(&draw(cfg.attitude)) * *c.q).map_err(|e| SimError::Scenario(e.to_string()))?;
            let w = c.omega + draw(cfg.rate);
            *c = CableState { q, omega: w - *q * w.dot(&q) };
        }
        Ok(s)
    }

    pub fn waypoint(&self) -> Option<usize> {
        match &self.driver {
            LeaderDriver::Waypoints { index, .. } => Some(*index),
            _ => None,
        }
    }

    pub fn snapshot(&self) -> Result<Snapshot, SimError> {
        let s = &self.state;
        let n = self.params.n();
        let d = accelerations(s, &ActuationCommand::Full(self.inputs.clone()), &self.params)
            .map_err(|e| self.numeric(e.to_string()))?;
        let e = energy(s, &self.params);
        Ok(Snapshot {
            t: self.time(),
            step: self.step,
            state: s.clone(),
            quad_positions: (0..n).map(|i| quad_position(s, &self.params, i)).collect(),
            psi_q: s.cables.iter().map(|c| psi_cable(&c.q)).collect(),
            psi_r0: psi_payload(&s.r0),
            leader_input: self.leader_input,
            commands: self.commands.clone(),
            saturated: self.saturated.clone(),
            tensions: d.tensions,
            kinetic_energy: e.kinetic,
            potential_energy: e.potential,
            waypoint: self.waypoint(),
        })
    }
}
