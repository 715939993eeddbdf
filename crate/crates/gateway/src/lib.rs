//! Live-operation gateway: a WebSocket endpoint (`/ws`) that streams
//! simulation state to the operator cockpit and ingests handle poses and
//! between-trial factor edits, plus an HTTP health check (`/healthz`).
//!
//! The message schemas live in [`protocol`]; the simulation thread in
//! [`sim`].

pub mod protocol;
pub mod sim;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use buzzwire_core::arbitration::{EditDirection, FactorId, FactorSet};
use buzzwire_core::course::{resolve_course, CourseError};
use buzzwire_core::experiment::AdaptationConfig;
use buzzwire_core::session::{Mode, SimParams};
use futures_util::{SinkExt, StreamExt};
use protocol::{ingest_pose, parse_client, ClientMessage, ProtocolError, ServerBody, ServerMessage, PROTOCOL_VERSION};
use sim::{Accepted, Command, Rejection, SimHandle};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;
use tokio::sync::oneshot;

pub const DEFAULT_ADDR: &str = "127.0.0.1:8765";
pub const DEFAULT_FRAME_RATE: f64 = 60.0;

#[derive(Clone, Debug)]
pub struct GatewayConfig {
    pub addr: SocketAddr,
    /// built-in course id or descriptor path
    pub course: String,
    pub mode: Mode,
    pub factors: FactorSet,
    pub sim: SimParams,
    /// required in SC mode
    pub adaptation: Option<AdaptationConfig>,
    /// trial logs and `summary.jsonl` are written here when set
    pub log_dir: Option<PathBuf>,
    pub frame_rate: f64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            addr: DEFAULT_ADDR.parse().expect("default address"),
            course: "training".into(),
            mode: Mode::ScUser,
            factors: FactorSet::default(),
            sim: SimParams::default(),
            adaptation: None,
            log_dir: None,
            frame_rate: DEFAULT_FRAME_RATE,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Course(#[from] CourseError),
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("gateway io: {0}")]
    Io(#[from] std::io::Error),
}

struct App {
    sim: SimHandle,
    next_client: AtomicU64,
}

/// A bound, running gateway.
pub struct Gateway {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    server: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Gateway {
    /// Validates the config, starts the simulation thread and binds the
    /// listener. Use port 0 for an ephemeral port.
    pub async fn bind(config: GatewayConfig) -> Result<Gateway, GatewayError> {
        let course = resolve_course(&config.course)?;
        let problems = config.sim.problems(Some(&course));
        if let Some((field, reason)) = problems.first() {
            return Err(GatewayError::Config(format!("sim.{field}: {reason}")));
        }
        if config.mode == Mode::Sc && config.adaptation.is_none() {
            return Err(GatewayError::Config("adaptation (r_d, chi_nom) is required in sc mode".into()));
        }
        if !config.frame_rate.is_finite() || config.frame_rate <= 0.0 {
            return Err(GatewayError::Config("frame_rate must be > 0".into()));
        }
        let listener = tokio::net::TcpListener::bind(config.addr).await?;
        let addr = listener.local_addr()?;
        let app = Arc::new(App { sim: SimHandle::spawn(config, course), next_client: AtomicU64::new(1) });
        let router = Router::new().route("/ws", get(ws_upgrade)).route("/healthz", get(healthz)).with_state(app);
        let (tx, rx) = oneshot::channel::<()>();
        let server = tokio::spawn(async move {
            axum::serve(listener, router)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        });
        tracing::info!(%addr, "gateway listening");
        Ok(Gateway { addr, shutdown: Some(tx), server })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Serves until the server task ends (listener error) or `stop` resolves.
    pub async fn run_until(mut self, stop: impl std::future::Future<Output = ()>) -> std::io::Result<()> {
        tokio::select! {
            r = &mut self.server => return r.unwrap_or_else(|e| Err(std::io::Error::other(e))),
            _ = stop => {}
        }
        self.shutdown().await
    }

    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        (&mut self.server).await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

async fn healthz() -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok", "protocol_version": PROTOCOL_VERSION }))
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, app))
}

/// Outbound side of one connection: numbers messages and stamps the clock.
struct Outbox {
    seq: u64,
}

impl Outbox {
    fn wrap(&mut self, t: f64, body: ServerBody) -> Message {
        self.seq += 1;
        let msg = ServerMessage { seq: self.seq, t, body };
        Message::Text(serde_json::to_string(&msg).expect("server message serializes").into())
    }
}

async fn client(socket: WebSocket, app: Arc<App>) {
    let id = app.next_client.fetch_add(1, Ordering::Relaxed);
    tracing::debug!(client = id, "connected");
    let (mut sink, mut stream) = socket.split();
    let mut frames = app.sim.frames.clone();
    frames.mark_unchanged();
    let mut events = app.sim.events.subscribe();
    let mut out = Outbox { seq: 0 };
    loop {
        let outgoing = tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => {
                    let t = frames.borrow().0;
                    match handle_text(&app, id, &text).await {
                        Some(body) => out.wrap(t, body),
                        None => continue,
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let e = ProtocolError { request: None, reason: "parse", detail: "binary frames are not supported".into() };
                    out.wrap(frames.borrow().0, e.into_body())
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => continue,
            },
            changed = frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let (t, frame) = frames.borrow_and_update().clone();
                out.wrap(t, ServerBody::State(frame))
            }
            event = events.recv() => match event {
                Ok((t, body)) => out.wrap(t, body),
                Err(tokio::sync::broadcast::error::RecvError::Lagged(_)) => continue,
                Err(tokio::sync::broadcast::error::RecvError::Closed) => break,
            },
        };
        if sink.send(outgoing).await.is_err() {
            break;
        }
    }
    let _ = app.sim.send(Command::Disconnected(id));
    tracing::debug!(client = id, "disconnected");
}

async fn request<T>(app: &App, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Option<T> {
    let (tx, rx) = oneshot::channel();
    app.sim.send(make(tx)).ok()?;
    rx.await.ok()
}

fn reply(request: Option<u64>, result: Option<Result<Accepted, Rejection>>) -> ServerBody {
    match result.unwrap_or(Err(Rejection::Busy)) {
        Ok((trial_phase, factors)) => ServerBody::Ack { request, factors, trial_phase },
        Err(r) => ServerBody::Rejected { request, reason: r.reason().to_string() },
    }
}

fn invalid(request: Option<u64>, reason: &'static str, detail: String) -> ServerBody {
    ProtocolError { request, reason, detail }.into_body()
}

/// Applies one client message; returns the direct reply, if any.
async fn handle_text(app: &App, client: u64, text: &str) -> Option<ServerBody> {
    let msg = match parse_client(text) {
        Ok(m) => m,
        Err(e) => return Some(e.into_body()),
    };
    let request = msg.seq();
    match msg {
        ClientMessage::Hello { protocol_version, .. } => {
            if let Some(v) = protocol_version.filter(|v| *v != PROTOCOL_VERSION) {
                return Some(invalid(request, "protocol_version", format!("server speaks {PROTOCOL_VERSION}, client {v}")));
            }
            match request_snapshot(app).await {
                Some(s) => Some(ServerBody::Config(s)),
                None => Some(ServerBody::Rejected { request, reason: Rejection::Busy.reason().into() }),
            }
        }
        ClientMessage::Input { pose, .. } => match ingest_pose(&pose) {
            Ok(p) => {
                *app.sim.input.lock().expect("input slot") = Some((client, p));
                None
            }
            Err(e) => Some(invalid(request, "invalid_pose", e)),
        },
        ClientMessage::EditFactor { factor, direction, .. } => {
            let which: FactorId = match factor.parse() {
                Ok(f) => f,
                Err(e) => return Some(invalid(request, "invalid_field", format!("{e}"))),
            };
            let dir: EditDirection = match direction.parse() {
                Ok(d) => d,
                Err(e) => return Some(invalid(request, "invalid_field", format!("{e}"))),
            };
            Some(reply(request, request_cmd(app, |tx| Command::EditFactor(which, dir, tx)).await))
        }
        ClientMessage::StartTrial { .. } => Some(reply(request, request_cmd(app, Command::StartTrial).await)),
        ClientMessage::EndReview { .. } => Some(reply(request, request_cmd(app, Command::EndReview).await)),
    }
}

async fn request_snapshot(app: &App) -> Option<protocol::ConfigSnapshot> {
    request(app, Command::Snapshot).await
}

async fn request_cmd(
    app: &App,
    make: impl FnOnce(oneshot::Sender<Result<Accepted, Rejection>>) -> Command,
) -> Option<Result<Accepted, Rejection>> {
    request(app, make).await
}
