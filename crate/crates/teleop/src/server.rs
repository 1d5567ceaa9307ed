//! Wall-clock pacing and the `/ws` endpoint.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use tetherlift_sim::SimError;

use crate::protocol::{non_text_frame, CommandLimits, Outbound, Validator};
use crate::session::{Event, TeleopLoop};

/// Pacing statistics of a real-time run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LoopStats {
    pub steps: u64,
    pub ticks: u64,
    /// Ticks whose physics finished more than one control period late.
    pub overruns: u64,
    /// Mean lateness beyond one control period, per step (s).
    pub mean_overrun: f64,
    /// Largest lag of simulation time behind wall time (s).
    pub max_lag: f64,
}

/// Runs `lp` against the wall clock until `stop` is set: each control period
/// the loop runs every step that has come due, draining the mailbox before
/// each one, so late periods are caught up rather than dropped.
pub fn run_paced(
    mut lp: TeleopLoop,
    mut events: mpsc::UnboundedReceiver<Event>,
    snapshots: broadcast::Sender<Utf8Bytes>,
    stop: Arc<AtomicBool>,
) -> Result<LoopStats, SimError> {
    let dt = lp.simulation().dt();
    let spt = lp.simulation().steps_per_tick();
    let period = dt * spt as f64;
    let mut stats = LoopStats::default();
    let mut overrun_total = 0.0;
    let mut last_warning: Option<Instant> = None;
    let publish = |snap| {
        let _ = snapshots.send(Outbound::State(Box::new(snap)).to_frame().into());
    };
    publish(lp.simulation().snapshot()?);
    let start = Instant::now();
    let result = loop {
        if stop.load(Ordering::Relaxed) {
            break Ok(());
        }
        let due = (start.elapsed().as_secs_f64() / dt) as u64;
        let mut failed = None;
        while lp.simulation().step_count() < due {
            while let Ok(ev) = events.try_recv() {
                if let Err(e) = lp.handle(ev) {
                    failed = Some(e);
                }
            }
            match lp.step() {
                Ok(Some(snap)) => publish(snap),
                Ok(None) => {}
                Err(e) => failed = Some(e),
            }
            if failed.is_some() {
                break;
            }
            stats.steps += 1;
            if lp.simulation().step_count().is_multiple_of(spt) {
                stats.ticks += 1;
            }
        }
        if let Some(e) = failed {
            break Err(e);
        }
        let lag = start.elapsed().as_secs_f64() - lp.simulation().time();
        stats.max_lag = stats.max_lag.max(lag);
        if lag > period {
            stats.overruns += 1;
            overrun_total += lag - period;
            if last_warning.is_none_or(|t| t.elapsed() >= Duration::from_secs(1)) {
                tracing::warn!(lag_ms = lag * 1e3, overruns = stats.overruns, "simulation loop behind wall clock, catching up");
                last_warning = Some(Instant::now());
            }
        }
        let next = (lp.simulation().step_count() / spt + 1) * spt;
        let wake = start + Duration::from_secs_f64(next as f64 * dt);
        std::thread::sleep(wake.saturating_duration_since(Instant::now()));
    };
    stats.mean_overrun = if stats.steps > 0 { overrun_total / stats.steps as f64 } else { 0.0 };
    lp.flush()?;
    result.map(|()| stats)
}

#[derive(Clone)]
struct AppState {
    events: mpsc::UnboundedSender<Event>,
    snapshots: broadcast::Sender<Utf8Bytes>,
    limits: CommandLimits,
    shutdown: watch::Receiver<bool>,
}

/// A running service: the paced loop on its own thread plus the HTTP server.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    shutdown: watch::Sender<bool>,
    done: oneshot::Receiver<Result<LoopStats, SimError>>,
    http: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    /// Binds `addr` and starts the loop.
    pub async fn start(lp: TeleopLoop, addr: SocketAddr) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();
        let (snap_tx, _) = broadcast::channel(64);
        let (sd_tx, sd_rx) = watch::channel(false);
        let app = AppState { events: ev_tx, snapshots: snap_tx.clone(), limits: lp.limits(), shutdown: sd_rx.clone() };

        let stop = Arc::new(AtomicBool::new(false));
        let (done_tx, done) = oneshot::channel();
        let flag = stop.clone();
        std::thread::Builder::new().name("sim-loop".into()).spawn(move || {
            let _ = done_tx.send(run_paced(lp, ev_rx, snap_tx, flag));
        })?;

        let router = Router::new().route("/ws", get(upgrade)).with_state(app);
        let mut sd = sd_rx;
        let http = tokio::spawn(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async move { stopped(&mut sd).await })
                .await
        });
        tracing::info!(%addr, "teleop service listening on /ws");
        Ok(Self { addr, stop, shutdown: sd_tx, done, http })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Serves until `signal` resolves or the loop fails, then shuts down.
    pub async fn run_until(mut self, signal: impl std::future::Future<Output = ()>) -> Result<LoopStats, SimError> {
        let early = tokio::select! {
            () = signal => None,
            r = &mut self.done => Some(r),
        };
        self.stop.store(true, Ordering::Relaxed);
        let result = match early {
            Some(r) => r,
            None => self.done.await,
        }
        .unwrap_or_else(|_| Err(SimError::Io("simulation loop thread exited".into())));
        let _ = self.shutdown.send(true);
        match self.http.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => tracing::warn!("http server: {e}"),
            Err(e) => tracing::warn!("http server task: {e}"),
        }
        result
    }

    pub async fn stop(self) -> Result<LoopStats, SimError> {
        self.run_until(async {}).await
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| session(socket, app))
}

async fn session(socket: WebSocket, mut app: AppState) {
    let mut snapshots = app.snapshots.subscribe();
    if app.events.send(Event::Connected).is_err() {
        return;
    }
    let mut validator = Validator::new(app.limits);
    let (mut tx, mut rx) = socket.split();
    loop {
        tokio::select! {
            msg = rx.next() => {
                let reply = match msg {
                    Some(Ok(Message::Text(text))) => match validator.accept(&text) {
                        Ok(cmd) => {
                            let _ = app.events.send(Event::Command(cmd));
                            None
                        }
                        Err(e) => Some(e),
                    },
                    Some(Ok(Message::Binary(_))) => Some(non_text_frame()),
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => None,
                };
                if let Some(err) = reply {
                    if tx.send(Message::Text(Outbound::Err(err).to_frame().into())).await.is_err() {
                        break;
                    }
                }
            }
            snap = snapshots.recv() => match snap {
                Ok(frame) => {
                    if tx.send(Message::Text(frame)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => break,
            },
            () = stopped(&mut app.shutdown) => break,
        }
    }
    let _ = tx.send(Message::Close(None)).await;
    let _ = app.events.send(Event::Disconnected);
}

async fn stopped(rx: &mut watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await;
}
