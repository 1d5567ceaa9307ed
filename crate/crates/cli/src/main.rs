//! `tetherlift`: run scenarios, inspect linear models, synthesise gains and
//! serve teleoperation sessions.
//!
//! Exit codes: 0 success, 1 scenario or input error, 2 numeric failure.
//! Failures print one JSON object on standard error.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tetherlift_core::controllers::{AttitudePidGains, ControlGains, LeaderPdGains, DEFAULT_MAX_TILT};
use tetherlift_core::linearization::{build_equilibrium, controllable_basis, linearize, KRYLOV_TOL};
use tetherlift_core::synthesis::{synthesize, LqrWeights};
use tetherlift_sim::record::RecordWriter;
use tetherlift_sim::scenario::LeaderPolicy;
use tetherlift_sim::{builtin_scenarios, Scenario, SimError};
use tetherlift_teleop::{Server, TeleopConfig, TeleopLoop};

#[derive(Parser)]
#[command(name = "tetherlift", version, about = "Cooperative cable-suspended payload transport simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario headless and write a CSV log plus a .meta.json sidecar.
    Run {
        /// Built-in scenario name or path to a scenario JSON file.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's noise seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Built-in scenarios.
    Scenarios {
        #[command(subcommand)]
        command: ScenariosCommand,
    },
    /// Linearize about hover and summarise the reduced model.
    Linearize {
        scenario: String,
        #[arg(long)]
        json: bool,
    },
    /// Follower gain synthesis.
    Gains {
        #[command(subcommand)]
        command: GainsCommand,
    },
    /// Serve a real-time teleoperation session on ws://<bind>:<port>/ws.
    Serve {
        scenario: String,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: std::net::IpAddr,
        #[arg(long, default_value_t = 50.0)]
        stream_hz: f64,
        /// Write commands, applied inputs and snapshots to a JSONL file.
        #[arg(long)]
        record: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScenariosCommand {
    /// Names and descriptions.
    List,
    /// Print a built-in scenario as JSON, e.g. as a starting point for a file.
    Show { name: String },
}

#[derive(Subcommand)]
enum GainsCommand {
    /// Synthesise follower gains; prints them as JSON, or with --out writes
    /// the scenario with the gains filled in.
    Synth {
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// `println!` that ends the process quietly when stdout has been closed,
/// e.g. by `| head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", json!({"error": "usage", "message": e.kind().to_string()}));
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), SimError> {
    match command {
        Command::Run { scenario, out, seed } => run(&scenario, &out, seed),
        Command::Scenarios { command: ScenariosCommand::List } => {
            for s in builtin_scenarios() {
                say!("{:<22} {}", s.name, s.description);
            }
            Ok(())
        }
        Command::Scenarios { command: ScenariosCommand::Show { name } } => {
            let s = builtin_scenarios()
                .into_iter()
                .find(|s| s.name == name)
                .ok_or_else(|| SimError::Scenario(format!("no built-in scenario named {name:?}")))?;
            say!("{}", s.to_json());
            Ok(())
        }
        Command::Linearize { scenario, json } => linearize_cmd(&scenario, json),
        Command::Gains { command: GainsCommand::Synth { scenario, out } } => synth(&scenario, out),
        Command::Serve { scenario, port, bind, stream_hz, record } => serve(&scenario, SocketAddr::new(bind, port), stream_hz, record),
    }
}

fn run(name: &str, out: &std::path::Path, seed: Option<u64>) -> Result<(), SimError> {
    let mut s = Scenario::resolve(name)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let log = tetherlift_sim::run(&s)?;
    log.save(out)?;
    say!("{} samples over {} s written to {}", log.samples.len(), s.duration, out.display());
    Ok(())
}

fn linearize_cmd(name: &str, as_json: bool) -> Result<(), SimError> {
    let s = Scenario::resolve(name)?;
    let eq = build_equilibrium(&s.params, s.hover_position()).map_err(|e| SimError::Scenario(e.to_string()))?;
    let model = linearize(&s.params, &eq).map_err(|e| SimError::Numeric {
        t: 0.0,
        message: e.to_string(),
        last_state: Box::new(eq.state.clone()),
    })?;
    let eig = model.a0.clone().complex_eigenvalues();
    let scale = model.a0.amax().max(1.0);
    let tol = 1e-7 * scale;
    let max_real = eig.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let unstable = eig.iter().filter(|z| z.re > tol).count();
    let marginal = eig.iter().filter(|z| z.re.abs() <= tol).count();
    let stable = eig.len() - unstable - marginal;
    let controllable = controllable_basis(&model.a0, &model.b0, KRYLOV_TOL).ncols();
    let mut sorted: Vec<_> = eig.iter().collect();
    sorted.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    if as_json {
        let summary = json!({
            "scenario": s.name,
            "n": s.params.n(),
            "a0": [model.a0.nrows(), model.a0.ncols()],
            "b0": [model.b0.nrows(), model.b0.ncols()],
            "controllable_dim": controllable,
            "max_real": max_real,
            "unstable": unstable,
            "marginal": marginal,
            "stable": stable,
            "eigenvalues": sorted.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        });
        say!("{summary}");
        return Ok(());
    }
    say!("scenario {} with {} quadcopters", s.name, s.params.n());
    say!("A0: {} x {}", model.a0.nrows(), model.a0.ncols());
    say!("B0: {} x {}", model.b0.nrows(), model.b0.ncols());
    say!("controllable subspace: {controllable}");
    say!("eigenvalues: {unstable} unstable, {marginal} marginal (|Re| <= {tol:.1e}), {stable} stable; max Re {max_real:.3e}");
    for z in sorted {
        say!("  {:>12.5e} {:+.5e}i", z.re, z.im);
    }
    Ok(())
}

fn synth(name: &str, out: Option<PathBuf>) -> Result<(), SimError> {
    let mut s = Scenario::resolve(name)?;
    let eq = build_equilibrium(&s.params, s.hover_position()).map_err(|e| SimError::Scenario(e.to_string()))?;
    let pid = AttitudePidGains::default();
    let syn = synthesize(&s.params, &eq, LqrWeights::default(), &pid).map_err(|e| SimError::Scenario(format!("gain synthesis: {e}")))?;
    let gains = ControlGains {
        followers: syn.followers,
        pid,
        leader: LeaderPdGains::default(),
        max_tilt: DEFAULT_MAX_TILT,
        human_gain: None,
    };
    eprintln!(
        "{}",
        json!({
            "scenario": s.name,
            "followers": gains.followers.len(),
            "hurwitz": syn.analysis.hurwitz,
            "max_real": syn.analysis.max_real,
            "controlled_dim": syn.analysis.controlled_dim,
            "with_attitude_loops": syn.inner_loop_abscissa,
        })
    );
    match out {
        Some(path) => {
            s.gains = Some(gains);
            std::fs::write(&path, s.to_json()).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        }
        None => say!("{}", serde_json::to_string_pretty(&gains).expect("serialisable")),
    }
    Ok(())
}

fn serve(name: &str, addr: SocketAddr, stream_hz: f64, record: Option<PathBuf>) -> Result<(), SimError> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut s = Scenario::resolve(name)?;
    if s.leader != LeaderPolicy::Teleop {
        tracing::info!("leader policy of {} replaced by teleop", s.name);
        s.leader = LeaderPolicy::Teleop;
    }
    if s.gains.is_none() && s.params.n() > 1 {
        tracing::info!("synthesising follower gains, this takes a few seconds");
    }
    let mut lp = TeleopLoop::new(&s, None, TeleopConfig { stream_hz, ..TeleopConfig::default() })?;
    if let Some(path) = record {
        let f = std::fs::File::create(&path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        lp.set_recorder(RecordWriter::new(Box::new(std::io::BufWriter::new(f))))?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| SimError::Io(e.to_string()))?;
    rt.block_on(async {
        let server = Server::start(lp, addr).await.map_err(|e| SimError::Io(format!("{addr}: {e}")))?;
        say!("listening on ws://{}/ws", server.local_addr());
        let stats = server
            .run_until(terminated())
            .await?;
        tracing::info!(
            steps = stats.steps,
            overruns = stats.overruns,
            mean_overrun_us = stats.mean_overrun * 1e6,
            max_lag_ms = stats.max_lag * 1e3,
            "stopped"
        );
        Ok(())
    })
}

async fn terminated() {
    let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
        Ok(s) => s,
        Err(_) => return std::future::pending().await,
    };
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = term.recv() => {}
    }
}
