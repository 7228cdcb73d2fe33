use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use timewarp_core::experiment::{read_log, ExperimentConfig, LogRecord};
use timewarp_lab::control::{self, ServiceHandle, ServiceOptions};
use timewarp_lab::protocol::{ServerMessage, StateBroadcast};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::{timeout, Instant};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const WAIT: Duration = Duration::from_secs(5);

async fn service(options: ServiceOptions) -> ServiceHandle {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    control::start(&ExperimentConfig::default(), options, addr).await.unwrap()
}

async fn connect(handle: &ServiceHandle) -> Ws {
    connect_async(handle.ws_url()).await.unwrap().0
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    loop {
        let msg = timeout(WAIT, ws.next()).await.expect("message in time").unwrap().unwrap();
        if let Message::Text(text) = msg {
            return serde_json::from_str(&text).unwrap();
        }
    }
}

async fn send(ws: &mut Ws, value: Value) {
    ws.send(Message::text(value.to_string())).await.unwrap();
}

async fn recv_state(ws: &mut Ws) -> StateBroadcast {
    loop {
        if let ServerMessage::State(s) = recv(ws).await {
            return s;
        }
    }
}

async fn ack(ws: &mut Ws) -> Option<Value> {
    loop {
        match recv(ws).await {
            ServerMessage::Ack(a) => return a.data,
            ServerMessage::Error(e) => panic!("unexpected error reply: {}", e.message),
            _ => {}
        }
    }
}

async fn error(ws: &mut Ws) -> String {
    loop {
        match recv(ws).await {
            ServerMessage::Error(e) => return e.message,
            ServerMessage::Ack(a) => panic!("expected an error, got ack for {}", a.cmd),
            _ => {}
        }
    }
}

/// Connects and consumes the hello and initial state.
async fn ready(handle: &ServiceHandle) -> (Ws, StateBroadcast) {
    let mut ws = connect(handle).await;
    assert!(matches!(recv(&mut ws).await, ServerMessage::Hello(_)));
    let state = recv_state(&mut ws).await;
    (ws, state)
}

async fn values(ws: &mut Ws) -> Value {
    send(ws, json!({"cmd": "values"})).await;
    ack(ws).await.unwrap()
}

#[tokio::test]
async fn connect_greets_with_config_then_state() {
    let handle = service(ServiceOptions::default()).await;
    let mut ws = connect(&handle).await;
    match recv(&mut ws).await {
        ServerMessage::Hello(h) => {
            assert_eq!(h.config, ExperimentConfig::default());
            assert!(!h.running);
            assert!(h.tunable.iter().any(|p| p == "epsilon"));
        }
        other => panic!("expected hello, got {other:?}"),
    }
    let state = recv_state(&mut ws).await;
    assert_eq!(state.time_index, 0);
    assert_eq!(state.state.x, 0.0);
    assert_eq!(state.discrete_id.map(|d| d.index()), Some(85));
    handle.shutdown();
}

#[tokio::test]
async fn step_advances_one_step_per_command() {
    let handle = service(ServiceOptions::default()).await;
    let (mut ws, first) = ready(&handle).await;
    for n in 1..=3 {
        send(&mut ws, json!({"cmd": "step"})).await;
        ack(&mut ws).await;
        let state = recv_state(&mut ws).await;
        assert_eq!(state.metrics.steps, n);
        assert!(state.seq > first.seq);
    }
    handle.shutdown();
}

#[tokio::test]
async fn pause_stops_broadcasts() {
    let options = ServiceOptions { start_running: true, steps_per_second: 200.0, ..Default::default() };
    let handle = service(options).await;
    let (mut ws, _) = ready(&handle).await;
    recv_state(&mut ws).await;
    send(&mut ws, json!({"cmd": "pause"})).await;
    loop {
        match recv(&mut ws).await {
            ServerMessage::Ack(a) if a.cmd == "pause" => break,
            ServerMessage::State(_) | ServerMessage::RewindEvent(_) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
    let quiet = timeout(Duration::from_millis(400), ws.next()).await;
    assert!(quiet.is_err(), "message after pause: {quiet:?}");

    send(&mut ws, json!({"cmd": "run"})).await;
    ack(&mut ws).await;
    recv_state(&mut ws).await;
    handle.shutdown();
}

#[tokio::test]
async fn rewind_steps_back_keeps_values() {
    let options = ServiceOptions { seed: 3, ..Default::default() };
    let handle = service(options).await;
    let (mut ws, mut state) = ready(&handle).await;
    while state.time_index < 20 {
        send(&mut ws, json!({"cmd": "step"})).await;
        ack(&mut ws).await;
        state = recv_state(&mut ws).await;
    }
    let t = state.time_index;
    let before = values(&mut ws).await;

    send(&mut ws, json!({"cmd": "rewind", "steps_back": 5})).await;
    let event = ack(&mut ws).await.unwrap();
    assert_eq!(event["target_time"], json!(t - 5));
    match recv(&mut ws).await {
        ServerMessage::RewindEvent(notice) => {
            assert!(notice.manual);
            assert_eq!(notice.event.restored_time, t - 5);
        }
        other => panic!("expected rewind event, got {other:?}"),
    }
    let after = recv_state(&mut ws).await;
    assert_eq!(after.time_index, t - 5);
    assert_eq!(after.metrics.steps, state.metrics.steps);
    assert_eq!(values(&mut ws).await, before);

    send(&mut ws, json!({"cmd": "rewind", "target_time": t})).await;
    assert!(error(&mut ws).await.contains("not before"));
    send(&mut ws, json!({"cmd": "rewind"})).await;
    assert!(error(&mut ws).await.contains("exactly one"));
    handle.shutdown();
}

#[tokio::test]
async fn set_param_whitelist_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("runs.jsonl");
    let handle = service(ServiceOptions { log_path: Some(log.clone()), ..Default::default() }).await;
    let (mut ws, _) = ready(&handle).await;

    send(&mut ws, json!({"cmd": "set_param", "name": "epsilon", "value": 0.05})).await;
    assert_eq!(ack(&mut ws).await.unwrap()["value"], json!(0.05));
    send(&mut ws, json!({"cmd": "metrics"})).await;
    ack(&mut ws).await;
    match recv(&mut ws).await {
        ServerMessage::Metrics(m) => assert_eq!(m.epsilon, 0.05),
        other => panic!("expected metrics, got {other:?}"),
    }

    send(&mut ws, json!({"cmd": "set_param", "name": "gamma", "value": 0.9})).await;
    assert!(error(&mut ws).await.contains("not runtime-tunable"));
    send(&mut ws, json!({"cmd": "set_param", "name": "epsilon", "value": 1.5})).await;
    assert!(error(&mut ws).await.contains("[0, 1]"));
    send(&mut ws, json!({"cmd": "set_speed", "steps_per_second": 120})).await;
    ack(&mut ws).await;

    let records = read_log(&log).unwrap();
    let changes: Vec<_> = records
        .iter()
        .map(|r| match r {
            LogRecord::ParamChange { name, value, .. } => (name.as_str(), value.clone()),
            other => panic!("unexpected record {other:?}"),
        })
        .collect();
    assert_eq!(changes, [("epsilon", json!(0.05)), ("steps_per_second", json!(120.0))]);
    handle.shutdown();
}

#[tokio::test]
async fn malformed_messages_get_error_replies() {
    let handle = service(ServiceOptions::default()).await;
    let (mut ws, _) = ready(&handle).await;
    ws.send(Message::text("{not json")).await.unwrap();
    assert!(error(&mut ws).await.contains("malformed"));
    send(&mut ws, json!({"cmd": "teleport"})).await;
    assert!(error(&mut ws).await.contains("malformed"));
    send(&mut ws, json!({"cmd": "step"})).await;
    ack(&mut ws).await;
    assert_eq!(recv_state(&mut ws).await.metrics.steps, 1);
    handle.shutdown();
}

#[tokio::test]
async fn fast_runs_are_throttled_but_metrics_exact() {
    let options = ServiceOptions { steps_per_second: 20_000.0, ..Default::default() };
    let handle = service(options).await;
    let (mut ws, _) = ready(&handle).await;
    send(&mut ws, json!({"cmd": "run"})).await;
    ack(&mut ws).await;

    let start = Instant::now();
    let mut states = Vec::new();
    while start.elapsed() < Duration::from_secs(1) {
        if let Ok(Some(Ok(Message::Text(text)))) = timeout(Duration::from_millis(100), ws.next()).await {
            if let ServerMessage::State(s) = serde_json::from_str(&text).unwrap() {
                states.push(s);
            }
        }
    }
    assert!(states.len() <= 62, "{} broadcasts in one second", states.len());
    assert!(states.len() >= 10, "only {} broadcasts", states.len());
    let last = states.last().unwrap();
    assert!(last.metrics.steps > 2_000, "only {} steps", last.metrics.steps);
    assert!(states.windows(2).all(|w| w[0].seq < w[1].seq));
    assert!(states.windows(2).all(|w| w[0].metrics.steps <= w[1].metrics.steps));
    handle.shutdown();
}

#[tokio::test]
async fn commands_are_echoed_to_other_clients() {
    let handle = service(ServiceOptions::default()).await;
    let (mut a, _) = ready(&handle).await;
    let (mut b, _) = ready(&handle).await;
    send(&mut a, json!({"cmd": "reset_trial"})).await;
    ack(&mut a).await;
    match recv(&mut b).await {
        ServerMessage::Command(echo) => assert_eq!(echo.command.name(), "reset_trial"),
        other => panic!("expected command echo, got {other:?}"),
    }
    recv_state(&mut b).await;
    handle.shutdown();
}

async fn http_get(addr: SocketAddr, path: &str) -> (String, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let request = format!("GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n");
    stream.write_all(request.as_bytes()).await.unwrap();
    let mut raw = String::new();
    timeout(WAIT, stream.read_to_string(&mut raw)).await.unwrap().unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    (head.lines().next().unwrap().to_string(), body.to_string())
}

#[tokio::test]
async fn snapshot_times_over_http_and_socket() {
    let handle = service(ServiceOptions::default()).await;
    let (mut ws, _) = ready(&handle).await;
    for _ in 0..4 {
        send(&mut ws, json!({"cmd": "step"})).await;
        ack(&mut ws).await;
    }
    send(&mut ws, json!({"cmd": "snapshots"})).await;
    let over_ws = ack(&mut ws).await.unwrap()["times"].clone();
    let times: Vec<u64> = serde_json::from_value(over_ws).unwrap();
    assert_eq!(times.first(), Some(&0));
    assert!(times.windows(2).all(|w| w[0] < w[1]));

    let (status, body) = http_get(handle.local_addr(), "/snapshot-times").await;
    assert!(status.contains("200"), "{status}");
    let over_http: Vec<u64> = serde_json::from_str(&body).unwrap();
    assert_eq!(over_http, times);
    handle.shutdown();
}

#[tokio::test]
async fn busy_port_is_reported() {
    let handle = service(ServiceOptions::default()).await;
    let err = control::start(&ExperimentConfig::default(), ServiceOptions::default(), handle.local_addr())
        .await
        .err()
        .expect("second bind fails");
    assert!(format!("{err:#}").contains("binding"));
    handle.shutdown();
}
