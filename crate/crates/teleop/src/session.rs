//! The single owner of simulation state. Network tasks talk to it only
//! through [`Event`]s; it advances one step per call, so tests can drive it
//! in virtual time.

use std::io::Write;

use tetherlift_core::controllers::{ControlGains, LeaderInput};
use tetherlift_sim::log::scenario_hash;
use tetherlift_sim::record::{RecordEntry, RecordWriter};
use tetherlift_sim::scenario::{ratio, LeaderPolicy};
use tetherlift_sim::{Scenario, SimError, Simulation, Snapshot};

use crate::protocol::{CommandLimits, CommandMessage};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeleopConfig {
    /// Snapshot rate (Hz).
    pub stream_hz: f64,
    /// Time to fade the leader back to hover once the last client leaves (s).
    pub failsafe: f64,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self { stream_hz: 50.0, failsafe: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Connected,
    Disconnected,
    /// A command that already passed [`crate::protocol::Validator`].
    Command(CommandMessage),
}

#[derive(Debug, Clone, Copy)]
struct Decay {
    from: LeaderInput,
    tick: u64,
    ticks: u64,
}

pub type Recorder = RecordWriter<Box<dyn Write + Send>>;

pub struct TeleopLoop {
    sim: Simulation,
    scenario: Scenario,
    limits: CommandLimits,
    target: LeaderInput,
    pending: Option<CommandMessage>,
    last_seq: Option<u64>,
    clients: usize,
    armed: bool,
    decay: Option<Decay>,
    failsafe_ticks: u64,
    stream_every: u64,
    recorder: Option<Recorder>,
    recorded: LeaderInput,
}

impl TeleopLoop {
    /// Builds the loop, synthesising gains when `gains` is `None` and the
    /// scenario carries none.
    pub fn new(scenario: &Scenario, gains: Option<ControlGains>, config: TeleopConfig) -> Result<Self, SimError> {
        if scenario.leader != LeaderPolicy::Teleop {
            return Err(SimError::Scenario("serving needs a scenario with the teleop leader policy".into()));
        }
        let sim = match gains {
            Some(g) => Simulation::with_gains(scenario, g)?,
            None => Simulation::new(scenario)?,
        };
        let stream_every = ratio(1.0 / config.stream_hz, scenario.dt)
            .ok_or_else(|| SimError::Scenario(format!("stream rate {} Hz is not a whole number of {} s steps", config.stream_hz, scenario.dt)))?;
        let tick = sim.steps_per_tick() as f64 * sim.dt();
        if !(config.failsafe >= 0.0) {
            return Err(SimError::Scenario("failsafe time must be non-negative".into()));
        }
        let hover = sim.hover_input();
        Ok(Self {
            limits: CommandLimits { max_tilt: sim.gains().max_tilt, max_thrust: 2.0 * hover.thrust },
            failsafe_ticks: (config.failsafe / tick).round().max(1.0) as u64,
            stream_every: stream_every as u64,
            target: hover,
            pending: None,
            last_seq: None,
            clients: 0,
            armed: true,
            decay: None,
            recorder: None,
            recorded: hover,
            scenario: scenario.clone(),
            sim,
        })
    }

    /// Starts a record file with its header line.
    pub fn set_recorder(&mut self, mut rec: Recorder) -> Result<(), SimError> {
        rec.write(&RecordEntry::Header {
            scenario: self.scenario.name.clone(),
            scenario_sha256: scenario_hash(&self.scenario),
            dt: self.sim.dt(),
            version: env!("CARGO_PKG_VERSION").into(),
        })?;
        self.recorder = Some(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), SimError> {
        self.recorder.as_mut().map_or(Ok(()), |r| r.flush())
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn limits(&self) -> CommandLimits {
        self.limits
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn stream_every(&self) -> u64 {
        self.stream_every
    }

    pub fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Connected => {
                self.clients += 1;
                self.last_seq = None;
            }
            Event::Disconnected => {
                self.clients = self.clients.saturating_sub(1);
                if self.clients == 0 {
                    self.pending = None;
                    self.start_decay();
                }
            }
            Event::Command(cmd) => {
                if self.last_seq.is_some_and(|s| cmd.seq <= s) {
                    return Ok(());
                }
                self.last_seq = Some(cmd.seq);
                if let Some(rec) = &mut self.recorder {
                    rec.write(&RecordEntry::Cmd {
                        step: self.sim.step_count(),
                        seq: cmd.seq,
                        t_ms: cmd.t_ms,
                        phi: cmd.phi,
                        theta: cmd.theta,
                        thrust: cmd.thrust,
                    })?;
                }
                self.pending = Some(cmd);
            }
        }
        Ok(())
    }

    fn start_decay(&mut self) {
        self.decay = Some(Decay { from: self.target, tick: 0, ticks: self.failsafe_ticks });
    }

    /// Leader input for the coming control tick.
    fn resolve(&mut self) -> LeaderInput {
        let hover = self.sim.hover_input();
        if let Some(cmd) = self.pending.take() {
            if cmd.arm {
                self.armed = true;
            }
            if cmd.reset {
                self.decay = None;
                self.target = hover;
            } else if cmd.disarm {
                self.armed = false;
                self.start_decay();
            } else if self.armed {
                self.decay = None;
                self.target = self.limits.input(&cmd);
            }
        }
        if let Some(d) = &mut self.decay {
            d.tick += 1;
            if d.tick >= d.ticks {
                self.target = hover;
                self.decay = None;
            } else {
                let s = d.tick as f64 / d.ticks as f64;
                let lerp = |a: f64, b: f64| a + (b - a) * s;
                self.target = LeaderInput {
                    phi: lerp(d.from.phi, hover.phi),
                    theta: lerp(d.from.theta, hover.theta),
                    thrust: lerp(d.from.thrust, hover.thrust),
                };
            }
        }
        self.target
    }

    /// Advances one simulation step; returns a snapshot on stream steps.
    pub fn step(&mut self) -> Result<Option<Snapshot>, SimError> {
        if (self.sim.step_count() + 1).is_multiple_of(self.sim.steps_per_tick()) {
            let input = self.resolve();
            self.sim.set_leader_input(input);
        }
        self.sim.step()?;
        let step = self.sim.step_count();
        if self.sim.at_control_tick() && self.sim.leader_input() != self.recorded {
            self.recorded = self.sim.leader_input();
            if let Some(rec) = &mut self.recorder {
                rec.write(&RecordEntry::applied(step, self.sim.time(), self.recorded))?;
            }
        }
        if !step.is_multiple_of(self.stream_every) {
            return Ok(None);
        }
        let snap = self.sim.snapshot()?;
        if let Some(rec) = &mut self.recorder {
            rec.write(&RecordEntry::State(Box::new(snap.clone())))?;
        }
        Ok(Some(snap))
    }
}
