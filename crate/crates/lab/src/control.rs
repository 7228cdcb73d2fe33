//! Live control service: one timewarp session driven over a WebSocket.
//!
//! A single simulation task owns the session. Connections and HTTP handlers
//! talk to it through an ordered request queue, and it answers through one
//! bounded outbound queue per client, so every reply and broadcast a client
//! sees is in the order the loop produced it. Commands are applied between
//! simulation steps only.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde_json::{json, Value};
use timewarp_core::experiment::session::FailureHandling;
use timewarp_core::experiment::{ExperimentConfig, LogRecord, Session, SessionOptions, Variant};
use timewarp_core::timewarp::{RewindEvent, RewindKind, RewindPolicy};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::protocol::{
    Ack, CommandEcho, ErrorReply, Hello, LiveMetrics, RewindNotice, ServerMessage, SessionCommand,
    StateBroadcast, TUNABLE_PARAMS,
};

pub const DEFAULT_PORT: u16 = 7341;
/// Upper bound on state broadcasts per second.
pub const MAX_BROADCAST_HZ: f64 = 60.0;
pub const MAX_STEPS_PER_SECOND: f64 = 1_000_000.0;
const CLIENT_QUEUE: usize = 512;

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub seed: u64,
    pub variant: Variant,
    pub steps_per_second: f64,
    pub start_running: bool,
    /// Parameter changes are appended here as `runs.jsonl` records.
    pub log_path: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            variant: Variant::Timewarp,
            steps_per_second: 50.0,
            start_running: false,
            log_path: None,
        }
    }
}

fn unit_interval(name: &str, value: &Value) -> Result<f64, String> {
    let v = value.as_f64().ok_or_else(|| format!("{name} must be a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{name} must lie in [0, 1], got {v}"))
    }
}

fn rewind_kind(value: &Value) -> Result<RewindKind, String> {
    let value = match value {
        Value::String(kind) => json!({ "kind": kind }),
        other => other.clone(),
    };
    serde_json::from_value(value).map_err(|e| format!("invalid rewind policy: {e}"))
}

/// Applies a runtime parameter change to `session` (or to the loop speed)
/// and returns the value that took effect.
pub fn apply_param(
    session: &mut Session,
    steps_per_second: &mut f64,
    name: &str,
    value: &Value,
) -> Result<Value, String> {
    match name {
        "epsilon" => {
            let v = unit_interval(name, value)?;
            session.set_epsilon(v);
            Ok(json!(v))
        }
        "alpha" => {
            let v = unit_interval(name, value)?;
            session.set_alpha(v);
            Ok(json!(v))
        }
        "temperature" => match value.as_f64() {
            Some(v) if v > 0.0 && v.is_finite() => {
                session.set_temperature(v);
                Ok(json!(v))
            }
            _ => Err(format!("temperature must be a positive number, got {value}")),
        },
        "rewind_policy" => {
            let policy = RewindPolicy { kind: rewind_kind(value)?, ..session.config().rewind_policy };
            policy.validate().map_err(|e| e.to_string())?;
            session.set_rewind_policy(policy);
            Ok(serde_json::to_value(policy).expect("policy serializes"))
        }
        "rewind_escalation" => {
            let on = value.as_bool().ok_or("rewind_escalation must be true or false")?;
            let policy = RewindPolicy { escalation: on, ..session.config().rewind_policy };
            session.set_rewind_policy(policy);
            Ok(json!(on))
        }
        "steps_per_second" => {
            *steps_per_second = speed(value.as_f64())?;
            Ok(json!(*steps_per_second))
        }
        "gamma" | "lambda" => Err(format!(
            "{name} is not runtime-tunable: changing it mid-trial breaks trace reversal"
        )),
        _ => Err(format!("unknown parameter {name:?}; tunable: {}", TUNABLE_PARAMS.join(", "))),
    }
}

fn speed(value: Option<f64>) -> Result<f64, String> {
    match value {
        Some(v) if v > 0.0 && v <= MAX_STEPS_PER_SECOND => Ok(v),
        _ => Err(format!("steps_per_second must lie in (0, {MAX_STEPS_PER_SECOND}]")),
    }
}

enum Request {
    Subscribe(oneshot::Sender<Subscription>),
    Text { client: u64, text: String },
    Disconnect(u64),
    SnapshotTimes(oneshot::Sender<Vec<u64>>),
}

struct Subscription {
    id: u64,
    outbound: mpsc::Receiver<Utf8Bytes>,
}

struct Client {
    id: u64,
    outbound: mpsc::Sender<Utf8Bytes>,
}

struct Controller {
    session: Session,
    options: ServiceOptions,
    steps_per_second: f64,
    running: bool,
    seq: u64,
    clients: Vec<Client>,
    next_client: u64,
    pending_rewind: Option<RewindEvent>,
    coalesced: u64,
    log: Option<BufWriter<File>>,
}

impl Controller {
    fn new(config: &ExperimentConfig, options: ServiceOptions) -> anyhow::Result<Self> {
        let session_options = SessionOptions { record_snapshots: true, ..Default::default() };
        let session = Session::new(config, options.variant, options.seed, None, session_options)?;
        let log = match &options.log_path {
            Some(path) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .with_context(|| format!("opening {}", path.display()))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        Ok(Self {
            session,
            steps_per_second: speed(Some(options.steps_per_second)).map_err(anyhow::Error::msg)?,
            running: options.start_running,
            options,
            seq: 0,
            clients: Vec::new(),
            next_client: 0,
            pending_rewind: None,
            coalesced: 0,
            log,
        })
    }

    fn tick_period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.steps_per_second.min(MAX_BROADCAST_HZ))
    }

    fn hello(&self) -> ServerMessage {
        ServerMessage::Hello(Hello {
            config: self.session.config().clone(),
            variant: self.options.variant,
            seed: self.options.seed,
            running: self.running,
            steps_per_second: self.steps_per_second,
            tunable: TUNABLE_PARAMS.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn metrics(&self) -> LiveMetrics {
        let s = &self.session;
        LiveMetrics {
            steps: s.steps(),
            trials: s.trials(),
            rewinds: s.rewinds(),
            best_trial_steps: s.best_trial_steps(),
            unique_states: s.graph().unique_state_count() as u64,
            epsilon: s.epsilon(),
        }
    }

    fn state_message(&mut self) -> ServerMessage {
        self.seq += 1;
        let s = &self.session;
        let discrete_id = s.discrete_state();
        ServerMessage::State(StateBroadcast {
            seq: self.seq,
            state: *s.state(),
            discrete_id,
            time_index: s.state().time_index,
            trial: s.current_trial(),
            q_row: discrete_id.map_or([0.0; 2], |id| s.agent().row(id)),
            last_reward: s.last_reward(),
            metrics: self.metrics(),
            last_rewind: s.last_event(),
            running: self.running,
        })
    }

    fn send_to(&mut self, client: u64, message: &ServerMessage) {
        let text = Utf8Bytes::from(message.to_json());
        self.clients.retain(|c| c.id != client || c.outbound.try_send(text.clone()).is_ok());
    }

    /// Queues `message` for every client. A client whose queue is full
    /// misses state updates but is dropped if it cannot take anything else.
    fn send_all(&mut self, message: &ServerMessage, droppable: bool) {
        let text = Utf8Bytes::from(message.to_json());
        self.clients.retain(|c| match c.outbound.try_send(text.clone()) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => droppable,
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        });
    }

    fn send_others(&mut self, except: u64, message: &ServerMessage) {
        let text = Utf8Bytes::from(message.to_json());
        self.clients.retain(|c| c.id == except || c.outbound.try_send(text.clone()).is_ok());
    }

    fn broadcast_state(&mut self) {
        if let Some(event) = self.pending_rewind.take() {
            let notice = RewindNotice { event, manual: false, coalesced: std::mem::take(&mut self.coalesced) };
            self.send_all(&ServerMessage::RewindEvent(notice), true);
        }
        let state = self.state_message();
        self.send_all(&state, true);
    }

    fn advance(&mut self) -> anyhow::Result<()> {
        let report = self.session.step()?;
        if let Some(FailureHandling::Rewound(event)) = report.failure {
            if self.pending_rewind.replace(event).is_some() {
                self.coalesced += 1;
            }
        }
        Ok(())
    }

    fn log_param(&mut self, name: &str, value: &Value) {
        let record = LogRecord::ParamChange { step: self.session.steps(), name: name.to_string(), value: value.clone() };
        if let Some(log) = self.log.as_mut() {
            let written = writeln!(log, "{}", record.to_line()).and_then(|_| log.flush());
            if let Err(e) = written {
                tracing::warn!("could not log parameter change: {e}");
            }
        }
    }

    fn subscribe(&mut self) -> Subscription {
        let (tx, rx) = mpsc::channel(CLIENT_QUEUE);
        let id = self.next_client;
        self.next_client += 1;
        self.clients.push(Client { id, outbound: tx });
        let hello = self.hello();
        self.send_to(id, &hello);
        let state = self.state_message();
        self.send_to(id, &state);
        Subscription { id, outbound: rx }
    }

    fn handle(&mut self, request: Request) {
        match request {
            Request::Subscribe(reply) => {
                let sub = self.subscribe();
                if let Err(sub) = reply.send(sub) {
                    self.clients.retain(|c| c.id != sub.id);
                }
            }
            Request::Text { client, text } => match serde_json::from_str::<SessionCommand>(&text) {
                Ok(command) => self.command(client, command),
                Err(e) => {
                    let reply = ErrorReply { cmd: None, message: format!("malformed message: {e}") };
                    self.send_to(client, &ServerMessage::Error(reply));
                }
            },
            Request::Disconnect(client) => self.clients.retain(|c| c.id != client),
            Request::SnapshotTimes(reply) => {
                let _ = reply.send(self.session.store().times());
            }
        }
    }

    fn command(&mut self, client: u64, command: SessionCommand) {
        let name = command.name();
        match self.execute(client, &command) {
            Ok(data) => {
                self.send_to(client, &ServerMessage::Ack(Ack { cmd: name.to_string(), data }));
                if command.mutates() {
                    self.send_others(client, &ServerMessage::Command(CommandEcho { command: command.clone() }));
                }
                match command {
                    SessionCommand::Step | SessionCommand::ResetTrial => self.broadcast_state(),
                    SessionCommand::Rewind { .. } => {
                        if let Some(event) = self.session.last_event() {
                            let notice = RewindNotice { event, manual: true, coalesced: 0 };
                            self.send_all(&ServerMessage::RewindEvent(notice), false);
                        }
                        self.broadcast_state();
                    }
                    SessionCommand::Metrics => {
                        let metrics = self.metrics();
                        self.send_to(client, &ServerMessage::Metrics(metrics));
                    }
                    _ => {}
                }
            }
            Err(message) => {
                let reply = ErrorReply { cmd: Some(name.to_string()), message };
                self.send_to(client, &ServerMessage::Error(reply));
            }
        }
    }

    fn execute(&mut self, _client: u64, command: &SessionCommand) -> Result<Option<Value>, String> {
        match command {
            SessionCommand::Run => self.running = true,
            SessionCommand::Pause => self.running = false,
            SessionCommand::Step => {
                self.advance().map_err(|e| e.to_string())?;
                // A manual step reports any rewind it caused right away.
                if let Some(event) = self.pending_rewind {
                    return Ok(Some(json!({ "rewind": event })));
                }
            }
            SessionCommand::Rewind { target_time, steps_back } => {
                let event = match (target_time, steps_back) {
                    (Some(t), None) => self.session.rewind_to(*t),
                    (None, Some(n)) => self.session.rewind_steps(*n),
                    _ => return Err("rewind needs exactly one of target_time or steps_back".into()),
                }
                .map_err(|e| e.to_string())?;
                self.pending_rewind = None;
                self.coalesced = 0;
                return Ok(Some(serde_json::to_value(event).expect("event serializes")));
            }
            SessionCommand::SetParam { name, value } => {
                let applied = apply_param(&mut self.session, &mut self.steps_per_second, name, value)?;
                self.log_param(name, &applied);
                return Ok(Some(json!({ "name": name, "value": applied })));
            }
            SessionCommand::SetSpeed { steps_per_second } => {
                self.steps_per_second = speed(Some(*steps_per_second))?;
                self.log_param("steps_per_second", &json!(self.steps_per_second));
                return Ok(Some(json!({ "steps_per_second": self.steps_per_second })));
            }
            SessionCommand::ResetTrial => self.session.reset_trial(),
            SessionCommand::Snapshots => {
                return Ok(Some(json!({ "times": self.session.store().times() })));
            }
            SessionCommand::Metrics => {}
            SessionCommand::Values => {
                return Ok(Some(serde_json::to_value(&self.session.agent().learner).expect("tables serialize")));
            }
        }
        Ok(None)
    }

    /// Runs every simulation step due since `last`, applying queued
    /// requests between steps, then broadcasts the latest state once.
    fn tick(&mut self, carry: &mut f64, elapsed: Duration, requests: &mut mpsc::UnboundedReceiver<Request>) {
        *carry += self.steps_per_second * elapsed.as_secs_f64();
        let due = carry.floor();
        *carry -= due;
        let mut stepped = false;
        for _ in 0..due as u64 {
            while let Ok(request) = requests.try_recv() {
                self.handle(request);
            }
            if !self.running {
                break;
            }
            if let Err(e) = self.advance() {
                self.running = false;
                let reply = ErrorReply { cmd: None, message: format!("simulation stopped: {e}") };
                self.send_all(&ServerMessage::Error(reply), false);
                break;
            }
            stepped = true;
        }
        if stepped {
            self.broadcast_state();
        }
    }
}

async fn simulation_loop(mut ctl: Controller, mut requests: mpsc::UnboundedReceiver<Request>) {
    let mut carry = 0.0;
    let mut last = Instant::now();
    loop {
        if !ctl.running {
            match requests.recv().await {
                Some(request) => ctl.handle(request),
                None => break,
            }
            last = Instant::now();
            carry = 0.0;
            continue;
        }
        let deadline = last + ctl.tick_period();
        tokio::select! {
            request = requests.recv() => match request {
                Some(request) => ctl.handle(request),
                None => break,
            },
            _ = tokio::time::sleep_until(deadline) => {
                let now = Instant::now();
                let elapsed = (now - last).min(Duration::from_secs(1));
                last = now;
                ctl.tick(&mut carry, elapsed, &mut requests);
            }
        }
    }
}

#[derive(Clone)]
struct AppState {
    requests: mpsc::UnboundedSender<Request>,
}

async fn ws_handler(ws: WebSocketUpgrade, State(app): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, app.requests))
}

async fn connection(mut socket: WebSocket, requests: mpsc::UnboundedSender<Request>) {
    let (reply, subscribed) = oneshot::channel();
    if requests.send(Request::Subscribe(reply)).is_err() {
        return;
    }
    let Ok(mut sub) = subscribed.await else { return };
    tracing::debug!(client = sub.id, "client connected");
    loop {
        tokio::select! {
            outbound = sub.outbound.recv() => match outbound {
                Some(text) => {
                    if socket.send(Message::Text(text)).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let request = Request::Text { client: sub.id, text: text.to_string() };
                    if requests.send(request).is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = requests.send(Request::Disconnect(sub.id));
    tracing::debug!(client = sub.id, "client disconnected");
}

async fn snapshot_times(State(app): State<AppState>) -> Result<Json<Vec<u64>>, axum::http::StatusCode> {
    let (reply, times) = oneshot::channel();
    app.requests
        .send(Request::SnapshotTimes(reply))
        .map_err(|_| axum::http::StatusCode::SERVICE_UNAVAILABLE)?;
    times.await.map(Json).map_err(|_| axum::http::StatusCode::SERVICE_UNAVAILABLE)
}

/// A running service. Dropping the handle leaves it running; call
/// [`ServiceHandle::shutdown`] to stop it.
pub struct ServiceHandle {
    addr: SocketAddr,
    server: JoinHandle<std::io::Result<()>>,
    simulation: JoinHandle<()>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}/ws", self.addr)
    }

    /// Waits until the HTTP server stops.
    pub async fn wait(self) -> anyhow::Result<()> {
        self.server.await??;
        Ok(())
    }

    pub fn shutdown(self) {
        self.server.abort();
        self.simulation.abort();
    }
}

/// Binds `addr` and starts the session and its HTTP/WebSocket front end.
pub async fn start(config: &ExperimentConfig, options: ServiceOptions, addr: SocketAddr) -> anyhow::Result<ServiceHandle> {
    let controller = Controller::new(config, options)?;
    let listener = TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    let addr = listener.local_addr()?;
    let (requests, inbox) = mpsc::unbounded_channel();
    let simulation = tokio::spawn(simulation_loop(controller, inbox));
    let app = Router::new()
        .route("/ws", get(ws_handler))
        .route("/snapshot-times", get(snapshot_times))
        .with_state(AppState { requests });
    let server = tokio::spawn(async move { axum::serve(listener, app).await });
    tracing::info!(%addr, "control service listening");
    Ok(ServiceHandle { addr, server, simulation })
}
