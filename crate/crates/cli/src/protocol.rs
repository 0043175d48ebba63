//! Versioned wire schema shared by the HTTP endpoints and the stream.
//!
//! Every message is an [`Envelope`]. Requests carry a per-connection `seq`
//! that must strictly increase; responses echo the `seq` of the request they
//! answer, so a client can drop events older than its latest keystroke.

use ghostline_core::memory::MemoryRecord;
use ghostline_core::orchestrator::{Engine, Message, SyncRequest};
use ghostline_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub seq: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default)]
    pub payload: Value,
}

impl Envelope {
    pub fn new(seq: u64, kind: &str, session: Option<String>, payload: Value) -> Self {
        Self { v: PROTOCOL_VERSION, seq, kind: kind.into(), session, payload }
    }

    pub fn error(seq: u64, session: Option<String>, err: &ProtocolError) -> Self {
        Self::new(seq, "error", session, serde_json::to_value(err).expect("plain struct"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncBody {
    pub messages: Vec<Message>,
    /// Defaults to the engine's default style.
    #[serde(default)]
    pub style_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeystrokeBody {
    /// The whole composing line after the keystroke.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptBody {
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryDeleteBody {
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecords {
    pub records: Vec<MemoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationStarted {
    /// Traces handed to the background context by this request.
    pub handed_over: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Sync(SyncBody),
    Keystroke(KeystrokeBody),
    Accept(AcceptBody),
    MemoryList,
    MemoryDelete(MemoryDeleteBody),
    Metrics,
    CurationStatus,
    CurationRun,
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Sync(_) => "sync",
            Request::Keystroke(_) => "keystroke",
            Request::Accept(_) => "accept",
            Request::MemoryList => "memory_list",
            Request::MemoryDelete(_) => "memory_delete",
            Request::Metrics => "metrics",
            Request::CurationStatus => "curation_status",
            Request::CurationRun => "curation_run",
        }
    }

    /// The one response kind answering this request (besides `error`).
    pub fn response_kind(&self) -> &'static str {
        match self {
            Request::Sync(_) => "sync_ack",
            Request::Keystroke(_) => "candidate_event",
            Request::Accept(_) => "accept_ack",
            Request::MemoryList => "memory_records",
            Request::MemoryDelete(_) => "memory_deleted",
            Request::Metrics => "metrics_report",
            Request::CurationStatus => "curation_report",
            Request::CurationRun => "curation_started",
        }
    }

    fn parse(kind: &str, payload: Value) -> Result<Self, ProtocolError> {
        fn body<T: DeserializeOwned>(payload: Value) -> Result<T, ProtocolError> {
            serde_json::from_value(payload).map_err(|e| ProtocolError::new(ErrorCode::Malformed, e.to_string()))
        }
        Ok(match kind {
            "sync" => Request::Sync(body(payload)?),
            "keystroke" => Request::Keystroke(body(payload)?),
            "accept" => Request::Accept(body(payload)?),
            "memory_list" => Request::MemoryList,
            "memory_delete" => Request::MemoryDelete(body(payload)?),
            "metrics" => Request::Metrics,
            "curation_status" => Request::CurationStatus,
            "curation_run" => Request::CurationRun,
            other => return Err(ProtocolError::new(ErrorCode::UnknownKind, format!("unknown kind {other:?}"))),
        })
    }

    pub fn to_envelope(&self, seq: u64, session: Option<String>) -> Envelope {
        let kind = self.kind();
        let payload = match self {
            Request::Sync(b) => serde_json::to_value(b),
            Request::Keystroke(b) => serde_json::to_value(b),
            Request::Accept(b) => serde_json::to_value(b),
            Request::MemoryDelete(b) => serde_json::to_value(b),
            Request::MemoryList | Request::Metrics | Request::CurationStatus | Request::CurationRun => Ok(Value::Null),
        }
        .expect("plain structs");
        Envelope::new(seq, kind, session, payload)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    OutOfOrder,
    UnknownKind,
    UnknownStyle,
    NoSession,
    NotFound,
    Capacity,
    Busy,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub message: String,
}

impl ProtocolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for ProtocolError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::UnknownStyle(_) => ErrorCode::UnknownStyle,
            Error::NoSession(_) => ErrorCode::NoSession,
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::Capacity { .. } | Error::SequencesExhausted => ErrorCode::Capacity,
            Error::Validation(_) => ErrorCode::Malformed,
            _ => ErrorCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

/// A parsed inbound message. On failure the error carries the `seq` to echo
/// (0 when the envelope itself is unreadable).
pub fn parse_envelope(text: &str) -> Result<(Envelope, Request), (u64, ProtocolError)> {
    let env: Envelope =
        serde_json::from_str(text).map_err(|e| (0, ProtocolError::new(ErrorCode::Malformed, e.to_string())))?;
    if env.v != PROTOCOL_VERSION {
        let msg = format!("version {} (this server speaks {PROTOCOL_VERSION})", env.v);
        return Err((env.seq, ProtocolError::new(ErrorCode::UnsupportedVersion, msg)));
    }
    let req = Request::parse(&env.kind, env.payload.clone()).map_err(|e| (env.seq, e))?;
    Ok((env, req))
}

/// Per-connection check that sequence numbers strictly increase.
#[derive(Debug, Default)]
pub struct SequenceGate {
    last: Option<u64>,
}

impl SequenceGate {
    pub fn admit(&mut self, seq: u64) -> Result<(), ProtocolError> {
        if let Some(last) = self.last {
            if seq <= last {
                return Err(ProtocolError::new(ErrorCode::OutOfOrder, format!("seq {seq} after {last}")));
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}

fn required(session: Option<&str>) -> Result<&str, ProtocolError> {
    session.ok_or_else(|| ProtocolError::new(ErrorCode::NoSession, "this kind needs a session"))
}

/// Runs one request against the engine and returns the response envelope.
pub fn dispatch(engine: &mut Engine, seq: u64, session: Option<String>, req: Request) -> Envelope {
    let kind = req.response_kind();
    match run(engine, session.as_deref(), req) {
        Ok(payload) => Envelope::new(seq, kind, session, payload),
        Err(e) => Envelope::error(seq, session, &e),
    }
}

fn run(engine: &mut Engine, session: Option<&str>, req: Request) -> Result<Value, ProtocolError> {
    let json =
        |r: Result<Value, serde_json::Error>| r.map_err(|e| ProtocolError::new(ErrorCode::Internal, e.to_string()));
    match req {
        Request::Sync(body) => {
            let style_tag = body.style_tag.unwrap_or_else(|| engine.config().default_style.clone());
            let req = SyncRequest { session: required(session)?.to_string(), messages: body.messages, style_tag };
            json(serde_json::to_value(engine.handle_sync(req)?))
        }
        Request::Keystroke(body) => {
            json(serde_json::to_value(engine.generate_candidates(required(session)?, &body.text)?))
        }
        Request::Accept(body) => json(serde_json::to_value(engine.accept_candidate(required(session)?, body.index)?)),
        Request::MemoryList => json(serde_json::to_value(MemoryRecords { records: engine.memory_list()? })),
        Request::MemoryDelete(body) => {
            engine.memory_delete(body.id)?;
            json(serde_json::to_value(body))
        }
        Request::Metrics => json(serde_json::to_value(engine.metrics()?)),
        Request::CurationStatus => json(serde_json::to_value(engine.curation_status()?)),
        Request::CurationRun => json(serde_json::to_value(CurationStarted { handed_over: engine.start_curation()? })),
    }
}
