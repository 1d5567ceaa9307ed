use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

use tetherlift_sim::record::{read_record, RecordEntry, RecordWriter};
use tetherlift_sim::scenario::{InitialCondition, LeaderPolicy};
use tetherlift_sim::{builtin, Scenario, Simulation};
use tetherlift_teleop::{CommandMessage, Server, TeleopConfig, TeleopLoop};

type Client = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

fn scenario() -> Scenario {
    let mut s = builtin("rod-2quad").unwrap();
    s.initial = InitialCondition::Hover;
    s.leader = LeaderPolicy::Teleop;
    s
}

async fn next_json(ws: &mut Client) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("frame within 5 s").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn next_of(ws: &mut Client, kind: &str) -> Value {
    loop {
        let v = next_json(ws).await;
        if v["type"] == kind {
            return v;
        }
    }
}

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

/// Ψ recomputed from the attitudes carried in the frame itself.
fn check_psi(frame: &Value) {
    for (c, psi) in frame["state"]["cables"].as_array().unwrap().iter().zip(frame["psi_q"].as_array().unwrap()) {
        assert!((1.0 + f(&c["q"][2]) - f(psi)).abs() <= 1e-12);
    }
    let r = &frame["state"]["r0"];
    let trace = f(&r[0][0]) + f(&r[1][1]) + f(&r[2][2]);
    assert!((0.5 * (3.0 - trace) - f(&frame["psi_r0"])).abs() <= 1e-12);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_session() {
    let s = scenario();
    let gains = Simulation::new(&s).unwrap().gains().clone();
    let dir = tempfile::tempdir().unwrap();
    let record = dir.path().join("rec.jsonl");
    let mut lp = TeleopLoop::new(&s, Some(gains), TeleopConfig::default()).unwrap();
    lp.set_recorder(RecordWriter::new(Box::new(std::fs::File::create(&record).unwrap()))).unwrap();
    let hover = lp.simulation().hover_input();
    let server = Server::start(lp, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{}/ws", server.local_addr())).await.unwrap();

    // the stream: state frames, monotone time, self-consistent Ψ
    let mut last_t = -1.0;
    for _ in 0..10 {
        let frame = next_of(&mut ws, "state").await;
        assert!(f(&frame["t"]) > last_t);
        last_t = f(&frame["t"]);
        assert_eq!(frame["step"].as_u64().unwrap() % 20, 0);
        check_psi(&frame);
        assert_eq!(frame["saturated"].as_array().unwrap().len(), 2);
    }

    // out-of-range roll is refused and the session carries on
    ws.send(Message::text(CommandMessage::new(1, 1.0, 0.0, 0.5).to_frame())).await.unwrap();
    let err = next_of(&mut ws, "err").await;
    assert_eq!(err["code"], "out_of_range");
    let frame = next_of(&mut ws, "state").await;
    assert_eq!(f(&frame["leader_input"]["phi"]), 0.0);
    ws.send(Message::text("{oops")).await.unwrap();
    assert_eq!(next_of(&mut ws, "err").await["code"], "malformed");

    // a valid command is echoed back in the snapshot stream
    ws.send(Message::text(CommandMessage::new(2, 0.02, -0.01, 0.5).to_frame())).await.unwrap();
    let mut echoed = false;
    for _ in 0..50 {
        let frame = next_of(&mut ws, "state").await;
        if f(&frame["leader_input"]["phi"]) == 0.02 {
            assert_eq!(f(&frame["leader_input"]["theta"]), -0.01);
            assert_eq!(f(&frame["leader_input"]["thrust"]), hover.thrust);
            echoed = true;
            break;
        }
    }
    assert!(echoed);
    ws.send(Message::text(CommandMessage::new(2, 0.0, 0.0, 0.5).to_frame())).await.unwrap();
    assert_eq!(next_of(&mut ws, "err").await["code"], "stale");

    // hanging up starts the fade back to hover
    ws.close(None).await.unwrap();
    tokio::time::sleep(Duration::from_millis(800)).await;
    let started = std::time::Instant::now();
    let stats = server.stop().await.unwrap();
    assert!(started.elapsed() < Duration::from_secs(5));
    assert!(stats.steps > 0 && stats.ticks == stats.steps / 10);

    let entries = read_record(record.to_str().unwrap()).unwrap();
    assert!(matches!(entries[0], RecordEntry::Header { .. }));
    assert_eq!(entries.iter().filter(|e| matches!(e, RecordEntry::Cmd { .. })).count(), 1);
    let applied: Vec<_> = entries.iter().filter_map(|e| if let RecordEntry::Applied { phi, .. } = e { Some(*phi) } else { None }).collect();
    assert_eq!(applied.first(), Some(&0.02));
    assert_eq!(applied.last(), Some(&0.0));
    let RecordEntry::State(last) = entries.iter().rev().find(|e| matches!(e, RecordEntry::State(_))).unwrap() else { unreachable!() };
    assert_eq!(last.leader_input, hover);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn loop_keeps_pace_with_the_wall_clock() {
    let s = scenario();
    let gains = Simulation::new(&s).unwrap().gains().clone();
    let lp = TeleopLoop::new(&s, Some(gains), TeleopConfig::default()).unwrap();
    let server = Server::start(lp, "127.0.0.1:0".parse().unwrap()).await.unwrap();
    let started = std::time::Instant::now();
    let stats = server.run_until(tokio::time::sleep(Duration::from_millis(1500))).await.unwrap();
    let wall = started.elapsed().as_secs_f64();
    let sim = stats.steps as f64 * 1e-3;
    // sim time trails wall time by at most a control period or two
    assert!(sim <= wall + 1e-3 && sim >= wall - 0.1, "sim {sim} s vs wall {wall} s");
    assert!(stats.mean_overrun < 0.05e-3, "{stats:?}");
}
