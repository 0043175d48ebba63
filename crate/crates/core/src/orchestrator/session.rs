//! Session state and the fixed context template.
//!
//! A formatted context is a style header followed by one line per message:
//!
//! ```text
//! [STYLE:casual]
//! U: are you coming tonight?
//! A: yes, after work
//! U: <composing text>
//! ```
//!
//! The last line is the message being composed. Retrieved memory blocks are
//! spliced in directly before it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::SeqId;
use crate::model::Logits;
use crate::model::Token;

use super::CandidateSet;

pub const USER_MARKER: &str = "U: ";
pub const ASSISTANT_MARKER: &str = "A: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn marker(self) -> &'static str {
        match self {
            Role::User => USER_MARKER,
            Role::Assistant => ASSISTANT_MARKER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRequest {
    pub session: String,
    pub messages: Vec<Message>,
    pub style_tag: String,
}

/// A unit of buffered interaction handed to background curation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTrace {
    pub id: u64,
    pub session: String,
    pub role: Role,
    pub text: String,
    pub style_tag: Option<String>,
}

impl InteractionTrace {
    /// The trace as it appears in the context template.
    pub fn prompt(&self) -> String {
        format!("{}{}", self.role.marker(), one_line(&self.text))
    }
}

pub fn style_header(style: &str) -> String {
    format!("[STYLE:{style}]\n")
}

/// Messages are single template lines.
pub fn one_line(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

pub fn format_history(style: &str, messages: &[Message]) -> String {
    let mut out = style_header(style);
    for m in messages {
        out.push_str(m.role.marker());
        out.push_str(&one_line(&m.text));
        out.push('\n');
    }
    out
}

/// The composing line for `typed`, without a trailing newline.
pub fn compose_line(typed: &str) -> String {
    format!("{USER_MARKER}{}", one_line(typed))
}

/// History that fits `limit` bytes (byte-level tokens) once the composing
/// marker is appended. Oldest messages are dropped first; a lone message
/// that is still too long keeps its tail. Returns the kept messages and how
/// many were dropped.
pub fn fit_history(style: &str, messages: &[Message], limit: usize) -> Result<(Vec<Message>, usize)> {
    let fixed = style_header(style).len() + USER_MARKER.len();
    if fixed > limit {
        return Err(Error::Capacity { capacity: limit });
    }
    let line_len = |m: &Message| m.role.marker().len() + one_line(&m.text).len() + 1;
    let mut total = fixed;
    let mut start = messages.len();
    while start > 0 && total + line_len(&messages[start - 1]) <= limit {
        start -= 1;
        total += line_len(&messages[start]);
    }
    let mut kept = messages[start..].to_vec();
    if kept.is_empty() && !messages.is_empty() {
        let last = messages.last().expect("nonempty");
        let room = limit - fixed;
        let overhead = last.role.marker().len() + 1;
        if room > overhead {
            let text = one_line(&last.text);
            let mut cut = text.len() - (room - overhead);
            while !text.is_char_boundary(cut) {
                cut += 1;
            }
            kept.push(Message { role: last.role, text: text[cut..].to_string() });
            start = messages.len() - 1;
        }
    }
    Ok((kept, start))
}

/// The single active session of an engine.
#[derive(Debug, Clone)]
pub struct SessionState {
    pub id: String,
    pub history: Vec<Message>,
    pub style_tag: String,
    /// Holds `context` at all times.
    pub seq0: SeqId,
    /// Scratch sequence for the per-keystroke context.
    pub gen_seq: SeqId,
    /// Interaction traces not yet handed to curation.
    pub traces: Vec<InteractionTrace>,
    /// Formatted history: style header plus complete message lines.
    pub base: Vec<Token>,
    /// Text committed to the composing line through accepted candidates.
    pub composing: String,
    /// `base` followed by the composing line.
    pub context: Vec<Token>,
    pub seq0_logits: Option<Logits>,
    pub last_candidates: Option<CandidateSet>,
    pub accepted_chars: u64,
    pub committed_chars: u64,
    /// False for sessions opened without a SYNC.
    pub synced: bool,
}

impl SessionState {
    /// Fraction of committed user text that arrived through accepted
    /// candidates.
    pub fn ksr(&self) -> f64 {
        if self.committed_chars == 0 {
            0.0
        } else {
            (self.accepted_chars as f64 / self.committed_chars as f64).min(1.0)
        }
    }
}
