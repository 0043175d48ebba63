//! Loopback HTTP + WebSocket front end.
//!
//! | route | body |
//! |---|---|
//! | `POST /v1/rpc` | any request envelope; answers with one envelope |
//! | `POST /v1/sync` | `{session, messages, style_tag?}` -> sync ack |
//! | `GET /v1/memory`, `DELETE /v1/memory/{id}` | fact list / tombstone |
//! | `GET /v1/metrics` | engine metrics |
//! | `GET /v1/curation`, `POST /v1/curation` | status / start a run |
//! | `GET /v1/stream` | WebSocket carrying envelopes both ways |

use std::fs::File;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use ghostline_core::orchestrator::Message;
use serde::Deserialize;
use tokio::net::TcpListener;

use crate::config::ServiceConfig;
use crate::protocol::{
    dispatch, parse_envelope, Envelope, ErrorCode, MemoryDeleteBody, ProtocolError, Request, SequenceGate, SyncBody,
};
use crate::runtime::EngineHandle;

#[derive(Clone)]
pub struct AppState {
    engine: EngineHandle,
    debounce: Duration,
    stream_busy: Arc<AtomicBool>,
    recorder: Option<Arc<Mutex<File>>>,
}

impl AppState {
    pub fn new(engine: EngineHandle, config: &ServiceConfig) -> anyhow::Result<Self> {
        let recorder = match &config.record {
            Some(p) => Some(Arc::new(Mutex::new(File::options().create(true).append(true).open(p)?))),
            None => None,
        };
        Ok(Self { engine, debounce: config.debounce(), stream_busy: Arc::default(), recorder })
    }

    fn record(&self, env: &Envelope) {
        if let Some(file) = &self.recorder {
            let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
            let line = serde_json::to_string(env).expect("plain struct");
            if let Err(e) = writeln!(f, "{line}") {
                tracing::warn!(error = %e, "transcript write failed");
            }
        }
    }

    /// Records and runs one request on the foreground thread.
    async fn handle(&self, env: Envelope, req: Request) -> Envelope {
        self.record(&env);
        let (seq, session) = (env.seq, env.session);
        let fallback = session.clone();
        match self.engine.call(move |e| dispatch(e, seq, session, req)).await {
            Ok(resp) => resp,
            Err(err) => Envelope::error(seq, fallback, &err),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/rpc", post(rpc))
        .route("/v1/sync", post(sync))
        .route("/v1/memory", get(memory_list))
        .route("/v1/memory/{id}", delete(memory_delete))
        .route("/v1/metrics", get(metrics))
        .route("/v1/curation", get(curation_status).post(curation_run))
        .route("/v1/stream", get(stream))
        .with_state(state)
}

pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let (engine, _thread) = EngineHandle::spawn(config.engine_config()?, Some(config.idle_curation()))?;
    let listener = TcpListener::bind(config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    let app = router(AppState::new(engine, &config)?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn status_for(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::Malformed | ErrorCode::UnsupportedVersion | ErrorCode::OutOfOrder | ErrorCode::UnknownKind => {
            StatusCode::BAD_REQUEST
        }
        ErrorCode::UnknownStyle => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCode::NoSession | ErrorCode::NotFound => StatusCode::NOT_FOUND,
        ErrorCode::Busy => StatusCode::CONFLICT,
        ErrorCode::Capacity => StatusCode::INSUFFICIENT_STORAGE,
        ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(err: ProtocolError) -> Response {
    (status_for(err.code), Json(err)).into_response()
}

/// Runs a request built from a REST route and unwraps the payload.
async fn rest(state: &AppState, session: Option<String>, req: Request) -> Response {
    let env = req.to_envelope(0, session);
    let resp = state.handle(env, req).await;
    if resp.kind == "error" {
        match serde_json::from_value::<ProtocolError>(resp.payload) {
            Ok(err) => error_response(err),
            Err(e) => error_response(ProtocolError::new(ErrorCode::Internal, e.to_string())),
        }
    } else {
        Json(resp.payload).into_response()
    }
}

async fn rpc(State(state): State<AppState>, body: String) -> Response {
    match parse_envelope(&body) {
        Ok((env, req)) => {
            let resp = state.handle(env, req).await;
            let status = match serde_json::from_value::<ProtocolError>(resp.payload.clone()) {
                Ok(err) if resp.kind == "error" => status_for(err.code),
                _ => StatusCode::OK,
            };
            (status, Json(resp)).into_response()
        }
        Err((seq, err)) => (status_for(err.code), Json(Envelope::error(seq, None, &err))).into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct SyncHttpBody {
    session: String,
    messages: Vec<Message>,
    #[serde(default)]
    style_tag: Option<String>,
}

async fn sync(
    State(state): State<AppState>,
    body: Result<Json<SyncHttpBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    match body {
        Ok(Json(b)) => {
            let req = Request::Sync(SyncBody { messages: b.messages, style_tag: b.style_tag });
            rest(&state, Some(b.session), req).await
        }
        Err(e) => error_response(ProtocolError::new(ErrorCode::Malformed, e.body_text())),
    }
}

async fn memory_list(State(state): State<AppState>) -> Response {
    rest(&state, None, Request::MemoryList).await
}

async fn memory_delete(State(state): State<AppState>, Path(id): Path<u64>) -> Response {
    rest(&state, None, Request::MemoryDelete(MemoryDeleteBody { id })).await
}

async fn metrics(State(state): State<AppState>) -> Response {
    rest(&state, None, Request::Metrics).await
}

async fn curation_status(State(state): State<AppState>) -> Response {
    rest(&state, None, Request::CurationStatus).await
}

async fn curation_run(State(state): State<AppState>) -> Response {
    rest(&state, None, Request::CurationRun).await
}

/// Clears the single-stream flag when the connection ends.
struct StreamSlot(Arc<AtomicBool>);

impl Drop for StreamSlot {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn stream(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    if state.stream_busy.swap(true, Ordering::SeqCst) {
        return error_response(ProtocolError::new(ErrorCode::Busy, "another stream is open"));
    }
    let slot = StreamSlot(state.stream_busy.clone());
    ws.on_upgrade(move |socket| async move {
        let _slot = slot;
        run_stream(socket, state).await;
    })
}

async fn send(socket: &mut WebSocket, env: &Envelope) -> bool {
    let text = serde_json::to_string(env).expect("plain struct");
    socket.send(WsMessage::Text(text.into())).await.is_ok()
}

/// Keystrokes wait out the debounce window and only the newest of a burst
/// is run; any other request first flushes a waiting keystroke so order is
/// kept. Envelopes without a session use the last session seen.
async fn run_stream(mut socket: WebSocket, state: AppState) {
    let mut gate = SequenceGate::default();
    let mut session: Option<String> = None;
    let mut pending: Option<(Envelope, Request)> = None;
    let mut deadline = tokio::time::Instant::now();
    loop {
        let inbound = tokio::select! {
            msg = socket.recv() => msg,
            _ = tokio::time::sleep_until(deadline), if pending.is_some() => {
                let (env, req) = pending.take().expect("guarded");
                let resp = state.handle(env, req).await;
                if !send(&mut socket, &resp).await {
                    return;
                }
                continue;
            }
        };
        let text = match inbound {
            Some(Ok(WsMessage::Text(t))) => t,
            Some(Ok(WsMessage::Binary(_))) => {
                let err = ProtocolError::new(ErrorCode::Malformed, "binary frames are not accepted");
                if !send(&mut socket, &Envelope::error(0, session.clone(), &err)).await {
                    return;
                }
                continue;
            }
            Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
            Some(Ok(_)) => continue,
        };
        let (mut env, req) = match parse_envelope(text.as_str()) {
            Ok(parsed) => parsed,
            Err((seq, err)) => {
                if !send(&mut socket, &Envelope::error(seq, session.clone(), &err)).await {
                    return;
                }
                continue;
            }
        };
        if let Err(err) = gate.admit(env.seq) {
            if !send(&mut socket, &Envelope::error(env.seq, env.session.clone(), &err)).await {
                return;
            }
            continue;
        }
        match &env.session {
            Some(s) => session = Some(s.clone()),
            None => env.session = session.clone(),
        }
        if matches!(req, Request::Keystroke(_)) && !state.debounce.is_zero() {
            pending = Some((env, req));
            deadline = tokio::time::Instant::now() + state.debounce;
            continue;
        }
        if let Some((penv, preq)) = pending.take() {
            let resp = state.handle(penv, preq).await;
            if !send(&mut socket, &resp).await {
                return;
            }
        }
        let resp = state.handle(env, req).await;
        if !send(&mut socket, &resp).await {
            return;
        }
    }
}
