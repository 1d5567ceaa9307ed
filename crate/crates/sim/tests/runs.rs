use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::Vector3;
use tetherlift_core::controllers::{ControlGains, LeaderInput};
use tetherlift_sim::log::{columns, metadata_path, run_simulation, scenario_hash};
use tetherlift_sim::record::{read_applied_inputs, read_record, RecordEntry, RecordWriter};
use tetherlift_sim::scenario::{InitialCondition, LeaderPolicy, NoiseConfig};
use tetherlift_sim::{builtin, RunLog, Scenario, SimError, Simulation};

/// Synthesis takes seconds; do it once per scenario for the whole binary.
fn gains_for(name: &str) -> ControlGains {
    static CACHE: OnceLock<Mutex<HashMap<String, ControlGains>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(g) = cache.lock().unwrap().get(name) {
        return g.clone();
    }
    let g = Simulation::new(&builtin(name).unwrap()).unwrap().gains().clone();
    cache.lock().unwrap().entry(name.into()).or_insert(g).clone()
}

fn run_with(s: &Scenario, gains_from: &str) -> Result<RunLog, SimError> {
    let mut sim = Simulation::with_gains(s, gains_for(gains_from))?;
    run_simulation(s, &mut sim)
}

fn csv_bytes(log: &RunLog) -> Vec<u8> {
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    out
}

#[test]
fn runs_are_bitwise_reproducible() {
    let mut s = builtin("rod-2quad").unwrap();
    s.duration = 2.0;
    s.noise = Some(NoiseConfig { position: 1e-3, velocity: 1e-3, attitude: 1e-3, rate: 1e-3 });
    s.seed = 7;
    let a = csv_bytes(&run_with(&s, "rod-2quad").unwrap());
    let b = csv_bytes(&run_with(&s, "rod-2quad").unwrap());
    assert_eq!(a, b);
    s.seed = 8;
    assert_ne!(a, csv_bytes(&run_with(&s, "rod-2quad").unwrap()));
}

#[test]
fn synthesis_is_deterministic() {
    let s = builtin("rod-2quad").unwrap();
    let g = Simulation::new(&s).unwrap().gains().clone();
    assert_eq!(g, gains_for("rod-2quad"));
}

#[test]
fn csv_psi_columns_match_logged_state() {
    let mut s = builtin("rod-2quad").unwrap();
    s.duration = 1.0;
    let log = run_with(&s, "rod-2quad").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rod.csv");
    log.save(&path).unwrap();

    let mut r = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, columns(2));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        let v = |name: &str| rec[col(name)].parse::<f64>().unwrap();
        for i in 0..2 {
            // 1 − q·(−e₃)
            let psi = 1.0 + v(&format!("q{i}_z"));
            assert!((psi - v(&format!("psi_q{i}"))).abs() <= 1e-12);
            let norm = (v(&format!("q{i}_x")).powi(2) + v(&format!("q{i}_y")).powi(2) + v(&format!("q{i}_z")).powi(2)).sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
        let trace = v("R0_r11") + v("R0_r22") + v("R0_r33");
        assert!((0.5 * (3.0 - trace) - v("psi_R0")).abs() <= 1e-12);
        assert_eq!(v("waypoint"), -1.0);
        rows += 1;
    }
    assert_eq!(rows, log.samples.len());
    assert_eq!(rows, 101);

    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(metadata_path(&path)).unwrap()).unwrap();
    assert_eq!(meta["scenario"], "rod-2quad");
    assert_eq!(meta["scenario_sha256"], scenario_hash(&s));
    assert_eq!(meta["samples"], 101);
    assert_eq!(meta["columns"].as_array().unwrap().len(), header.len());
}

#[test]
fn csv_floats_round_trip() {
    let mut s = builtin("single-quad-pendulum").unwrap();
    s.initial = InitialCondition::TiltedCables { angle_deg: 20.0, azimuth_deg: 30.0 };
    s.duration = 0.5;
    let log = run_with(&s, "single-quad-pendulum").unwrap();
    let text = String::from_utf8(csv_bytes(&log)).unwrap();
    let last = text.lines().last().unwrap();
    let x: Vec<f64> = last.split(',').map(|c| c.parse().unwrap()).collect();
    let expected = tetherlift_sim::log::row(log.samples.last().unwrap());
    assert_eq!(x, expected);
}

#[test]
fn controlled_hover_stays_put() {
    for name in ["rod-2quad", "triangle-3quad"] {
        let mut s = builtin(name).unwrap();
        s.initial = InitialCondition::Hover;
        s.leader = LeaderPolicy::Hover;
        s.duration = 10.0;
        s.log_interval = 1.0;
        let log = run_with(&s, name).unwrap();
        let first = &log.samples[0].state;
        for sample in &log.samples {
            let st = &sample.state;
            let mut drift = (st.x0 - first.x0).norm().max(st.v0.norm()).max((*st.r0 - *first.r0).norm());
            for (c, c0) in st.cables.iter().zip(&first.cables) {
                drift = drift.max((*c.q - *c0.q).norm()).max(c.omega.norm());
            }
            assert!(drift <= 1e-6, "{name}: drift {drift:e} at t = {}", sample.t);
        }
    }
}

#[test]
fn replayed_record_reproduces_the_run() {
    let mut s = builtin("rod-2quad-square").unwrap();
    s.duration = 8.0;
    let original = run_with(&s, "rod-2quad").unwrap();

    // record the leader inputs a teleop session would have applied
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let mut w = RecordWriter::new(std::fs::File::create(&path).unwrap());
    w.write(&RecordEntry::Header { scenario: s.name.clone(), scenario_sha256: scenario_hash(&s), dt: s.dt, version: "test".into() })
        .unwrap();
    let LeaderPolicy::Script { segments } = &s.leader else { unreachable!() };
    for seg in segments {
        let step = (seg.t / s.dt).round() as u64;
        w.write(&RecordEntry::Cmd { step, seq: step, t_ms: step, phi: 1.0, theta: 1.0, thrust: 1.0 }).unwrap();
        w.write(&RecordEntry::applied(step, seg.t, seg.input())).unwrap();
    }
    w.write(&RecordEntry::State(Box::new(original.samples[0].clone()))).unwrap();
    w.flush().unwrap();
    drop(w);

    let entries = read_record(path.to_str().unwrap()).unwrap();
    assert!(matches!(entries[0], RecordEntry::Header { .. }));
    assert!(matches!(entries.last().unwrap(), RecordEntry::State(_)));
    assert_eq!(read_applied_inputs(path.to_str().unwrap()).unwrap().len(), segments.len());

    let mut replay = s.clone();
    replay.leader = LeaderPolicy::Replay { file: path.to_str().unwrap().into() };
    let again = run_with(&replay, "rod-2quad").unwrap();
    assert_eq!(again.samples, original.samples);
}

#[test]
fn applied_inputs_take_the_last_entry_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let input = |x: f64| LeaderInput { phi: x, theta: 0.0, thrust: 0.6 };
    let mut w = RecordWriter::new(std::fs::File::create(&path).unwrap());
    for (step, x) in [(0, 0.0), (10, 0.1), (10, 0.2), (20, 0.0)] {
        w.write(&RecordEntry::applied(step, step as f64 * 1e-3, input(x))).unwrap();
    }
    drop(w);
    let a = read_applied_inputs(path.to_str().unwrap()).unwrap();
    assert_eq!(a, vec![(0, input(0.0)), (10, input(0.2)), (20, input(0.0))]);

    let mut w = RecordWriter::new(std::fs::OpenOptions::new().append(true).open(&path).unwrap());
    w.write(&RecordEntry::applied(5, 0.005, input(0.0))).unwrap();
    drop(w);
    assert!(read_applied_inputs(path.to_str().unwrap()).is_err());
    std::fs::write(&path, "{not json\n").unwrap();
    assert!(matches!(read_record(path.to_str().unwrap()), Err(SimError::Scenario(_))));
}

#[test]
fn teleop_leader_input_applies_at_the_next_tick() {
    let mut s = builtin("rod-2quad").unwrap();
    s.initial = InitialCondition::Hover;
    s.leader = LeaderPolicy::Teleop;
    let mut sim = Simulation::with_gains(&s, gains_for("rod-2quad")).unwrap();
    let hover = sim.hover_input();
    assert_eq!(sim.leader_input(), hover);
    let cmd = LeaderInput { phi: 0.05, theta: -0.02, thrust: hover.thrust };
    sim.set_leader_input(cmd);
    assert_eq!(sim.leader_input(), hover);
    while !sim.at_control_tick() || sim.step_count() == 0 {
        sim.step().unwrap();
        if !sim.at_control_tick() {
            assert_eq!(sim.leader_input(), hover);
        }
    }
    assert_eq!(sim.leader_input(), cmd);
    assert_eq!(sim.step_count(), sim.steps_per_tick());

    // out-of-range tilts are clamped and flagged
    sim.set_leader_input(LeaderInput { phi: 2.0, theta: 0.0, thrust: hover.thrust });
    for _ in 0..sim.steps_per_tick() {
        sim.step().unwrap();
    }
    assert_eq!(sim.leader_input().phi, sim.gains().max_tilt);
    assert!(sim.snapshot().unwrap().saturated[0]);
}

#[test]
fn waypoint_leader_moves_towards_the_first_target() {
    let mut s = builtin("triangle-3quad").unwrap();
    s.duration = 3.0;
    let log = run_with(&s, "triangle-3quad").unwrap();
    let start = log.samples[0].state.x0;
    // dwell at O first, then head for A
    assert_eq!(log.samples[100].waypoint, Some(0));
    assert!((log.samples[100].state.x0 - start).norm() < 1e-6);
    let end = log.samples.last().unwrap();
    assert_eq!(end.waypoint, Some(1));
    assert!((end.state.x0 - Vector3::new(1.0, 1.0, 1.0)).norm() < (start - Vector3::new(1.0, 1.0, 1.0)).norm());
}

#[test]
fn blow_up_is_a_numeric_error() {
    let mut s = builtin("rod-2quad").unwrap();
    s.control.pac = false;
    s.control.cac = false;
    let mut st = builtin("rod-2quad").unwrap().initial_state().unwrap();
    st.cables[0].omega = Vector3::new(0.0, 1e200, 0.0);
    st.cables[0].q = tetherlift_core::UnitVector::new(-Vector3::z()).unwrap();
    s.initial = InitialCondition::State { state: st };
    let err = run_with(&s, "rod-2quad").unwrap_err();
    let SimError::Numeric { t, ref last_state, .. } = err else { panic!("{err}") };
    assert_eq!(t, 0.0);
    assert_eq!(last_state.cables[0].omega.y, 1e200);
    assert_eq!(err.exit_code(), 2);
    let json = err.to_json();
    assert_eq!(json["error"], "numeric");
    assert!(json["last_state"]["cables"].is_array());
}

#[test]
fn waypoint_indices_are_logged() {
    let s = builtin("triangle-3quad").unwrap();
    let mut sim = Simulation::with_gains(&s, gains_for("triangle-3quad")).unwrap();
    assert_eq!(sim.waypoint(), Some(0));
    sim.step().unwrap();
    assert_eq!(sim.snapshot().unwrap().waypoint, Some(0));
}
