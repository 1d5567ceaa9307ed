//! Batch runs and their CSV logs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::{Simulation, Snapshot};
use crate::error::SimError;
use crate::scenario::{ratio, Scenario};

/// Samples of one run at the scenario's log cadence.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub scenario: Scenario,
    pub samples: Vec<Snapshot>,
}

/// Runs `scenario` to completion.
pub fn run(scenario: &Scenario) -> Result<RunLog, SimError> {
    let mut sim = Simulation::new(scenario)?;
    run_simulation(scenario, &mut sim)
}

/// Runs an already constructed loop for the scenario's duration.
pub fn run_simulation(scenario: &Scenario, sim: &mut Simulation) -> Result<RunLog, SimError> {
    let every = ratio(scenario.log_interval, scenario.dt).expect("validated") as u64;
    let steps = (scenario.duration / scenario.dt).round() as u64;
    let mut samples = Vec::with_capacity((steps / every + 1) as usize);
    samples.push(sim.snapshot()?);
    while sim.step_count() < steps {
        sim.step()?;
        if sim.step_count().is_multiple_of(every) {
            samples.push(sim.snapshot()?);
        }
    }
    Ok(RunLog { scenario: scenario.clone(), samples })
}

/// SHA-256 of the scenario's compact JSON form.
pub fn scenario_hash(scenario: &Scenario) -> String {
    let json = serde_json::to_string(scenario).expect("scenario serialises");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

/// Column names of the CSV log for `n` quadcopters. Units are SI; rotation
/// matrices are written row by row.
pub fn columns(n: usize) -> Vec<String> {
    let mut c: Vec<String> = vec!["t".into()];
    let vec3 = |c: &mut Vec<String>, name: &str| c.extend(["x", "y", "z"].map(|a| format!("{name}_{a}")));
    let mat3 = |c: &mut Vec<String>, name: &str| {
        c.extend((1..=3).flat_map(|r| (1..=3).map(move |k| format!("{name}_r{r}{k}"))));
    };
    vec3(&mut c, "x0");
    vec3(&mut c, "v0");
    mat3(&mut c, "R0");
    vec3(&mut c, "Omega0");
    c.push("psi_R0".into());
    for i in 0..n {
        vec3(&mut c, &format!("q{i}"));
        vec3(&mut c, &format!("omega_q{i}"));
        c.push(format!("psi_q{i}"));
        c.push(format!("tension{i}"));
    }
    for i in 0..n {
        vec3(&mut c, &format!("quad{i}"));
        mat3(&mut c, &format!("R{i}"));
        vec3(&mut c, &format!("Omega{i}"));
        c.extend(["theta", "phi", "thrust"].map(|a| format!("cmd{i}_{a}")));
        c.push(format!("sat{i}"));
    }
    c.extend(["leader_phi", "leader_theta", "leader_thrust", "kinetic_energy", "potential_energy", "waypoint"].map(String::from));
    c
}

/// One CSV row, in the order of [`columns`].
pub fn row(s: &Snapshot) -> Vec<f64> {
    let st = &s.state;
    let mut r = vec![s.t];
    r.extend(st.x0.iter());
    r.extend(st.v0.iter());
    r.extend((0..3).flat_map(|i| (0..3).map(move |k| (*st.r0)[(i, k)])));
    r.extend(st.omega0.iter());
    r.push(s.psi_r0);
    for (i, c) in st.cables.iter().enumerate() {
        r.extend(c.q.iter());
        r.extend(c.omega.iter());
        r.push(s.psi_q[i]);
        r.push(s.tensions[i]);
    }
    for (i, q) in st.quads.iter().enumerate() {
        r.extend(s.quad_positions[i].iter());
        r.extend((0..3).flat_map(|a| (0..3).map(move |b| (*q.r)[(a, b)])));
        r.extend(q.omega.iter());
        let c = &s.commands[i];
        r.extend([c.theta, c.phi, c.thrust, if s.saturated[i] { 1.0 } else { 0.0 }]);
    }
    let li = &s.leader_input;
    r.extend([li.phi, li.theta, li.thrust, s.kinetic_energy, s.potential_energy, s.waypoint.map_or(-1.0, |w| w as f64)]);
    r
}

#[derive(Debug, Clone, Serialize)]
pub struct LogMetadata {
    pub scenario: String,
    pub scenario_sha256: String,
    pub seed: u64,
    pub code_version: String,
    pub dt: f64,
    pub log_interval: f64,
    pub samples: usize,
    pub columns: Vec<String>,
}

/// Sidecar path: `<log>.meta.json`.
pub fn metadata_path(log: &Path) -> PathBuf {
    let mut p = log.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

impl RunLog {
    pub fn metadata(&self) -> LogMetadata {
        LogMetadata {
            scenario: self.scenario.name.clone(),
            scenario_sha256: scenario_hash(&self.scenario),
            seed: self.scenario.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            dt: self.scenario.dt,
            log_interval: self.scenario.log_interval,
            samples: self.samples.len(),
            columns: columns(self.scenario.params.n()),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), SimError> {
        let io = |e: csv::Error| SimError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(columns(self.scenario.params.n())).map_err(io)?;
        for s in &self.samples {
            w.write_record(row(s).iter().map(|x| x.to_string())).map_err(io)?;
        }
        w.flush().map_err(|e| SimError::Io(e.to_string()))
    }

    /// Writes the CSV log and its metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        let io = |e: std::io::Error| SimError::Io(format!("{}: {e}", path.display()));
        let f = std::fs::File::create(path).map_err(io)?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let meta = serde_json::to_string_pretty(&self.metadata()).expect("metadata serialises");
        std::fs::write(metadata_path(path), meta + "\n").map_err(io)
    }
}
