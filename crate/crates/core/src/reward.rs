//! Rule-based rewards for policy outputs and in-group advantage normalization.
//!
//! All reward constants are multiples of 0.1, so scores are kept as integer
//! tenths ([`Reward`]) and compared exactly.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::tokenizer::{TAG_MEM_RETRIEVAL, TAG_MEM_RETRIEVAL_END, TAG_NO_MEM, TAG_THINK, TAG_THINK_END};

pub const MAX_THINK_CHARS: usize = 300;
/// Body length (whitespace words) above which the quality penalty applies.
pub const LONG_BODY_WORDS: usize = 32;
pub const REPEAT_THRESHOLD: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskClass {
    /// Direct completion.
    A,
    /// Memory retrieval.
    B,
    /// Memory extraction.
    C1,
    /// Invalid-information refusal.
    C2,
}

impl fmt::Display for TaskClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskClass::A => "A",
            TaskClass::B => "B",
            TaskClass::C1 => "C1",
            TaskClass::C2 => "C2",
        })
    }
}

/// Reward in tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reward(pub i32);

impl Reward {
    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

impl std::ops::Add for Reward {
    type Output = Reward;
    fn add(self, rhs: Reward) -> Reward {
        Reward(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Reward {
    type Output = Reward;
    fn sub(self, rhs: Reward) -> Reward {
        Reward(self.0 - rhs.0)
    }
}

impl fmt::Display for Reward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.value())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TagIntegrity {
    Intact,
    Broken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoMem {
    Absent,
    /// The body is exactly the token.
    Pure,
    /// The token appears alongside other text.
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatScore {
    Perfect,
    Partial,
    Wrong,
}

impl FormatScore {
    pub fn reward(self) -> Reward {
        match self {
            FormatScore::Perfect => Reward(25),
            FormatScore::Partial => Reward(3),
            FormatScore::Wrong => Reward(-10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub raw: String,
    /// Content of the first well-ordered think pair.
    pub think: Option<String>,
    /// Character count of `think`.
    pub think_len: usize,
    pub tags: TagIntegrity,
    /// Output with the think block removed, trimmed.
    pub body: String,
    pub retrieval_tag: bool,
    pub query: Option<String>,
    pub format: FormatScore,
    /// Non-whitespace text outside the retrieval tag pair.
    pub text_outside_tags: bool,
    /// Whether the body contains a `{...}` span at all.
    pub json_attempted: bool,
    /// Field count when the span parses as a JSON object.
    pub json_fields: Option<usize>,
    pub no_mem: NoMem,
}

fn count(hay: &str, needle: &str) -> usize {
    hay.matches(needle).count()
}

/// Total parse: every string yields an output, malformed pieces only set
/// flags.
pub fn parse_output(raw: &str) -> PolicyOutput {
    let opens = count(raw, TAG_THINK);
    let closes = count(raw, TAG_THINK_END);
    let pair = raw.find(TAG_THINK).and_then(|o| {
        let inner = o + TAG_THINK.len();
        raw[inner..].find(TAG_THINK_END).map(|c| (o, inner, inner + c))
    });
    let tags = match (opens, closes, pair) {
        (0, 0, _) | (1, 1, Some(_)) => TagIntegrity::Intact,
        _ => TagIntegrity::Broken,
    };
    let (think, body) = match pair {
        Some((open, inner, close)) => {
            let content = raw[inner..close].trim().to_string();
            let body = format!("{}{}", &raw[..open], &raw[close + TAG_THINK_END.len()..]);
            (Some(content), body)
        }
        None => (None, raw.to_string()),
    };
    let body = body.trim().to_string();
    let think_len = think.as_deref().map_or(0, |t| t.chars().count());

    let (retrieval_tag, query, format, text_outside_tags) = parse_retrieval(&body);

    let json_span = body.find('{').and_then(|s| body.rfind('}').filter(|&e| e > s).map(|e| &body[s..=e]));
    let json_fields = json_span
        .and_then(|s| serde_json::from_str::<serde_json::Value>(s).ok())
        .and_then(|v| v.as_object().map(serde_json::Map::len));

    let no_mem = if !body.contains(TAG_NO_MEM) {
        NoMem::Absent
    } else if body == TAG_NO_MEM {
        NoMem::Pure
    } else {
        NoMem::Noisy
    };

    PolicyOutput {
        raw: raw.to_string(),
        think,
        think_len,
        tags,
        retrieval_tag,
        query,
        format,
        text_outside_tags,
        json_attempted: json_span.is_some(),
        json_fields,
        no_mem,
        body,
    }
}

/// Retrieval-tag grading:
/// perfect: exactly one open and one close tag, in order, non-empty query;
/// partial: an open tag followed by recoverable query text;
/// wrong: anything else.
fn parse_retrieval(body: &str) -> (bool, Option<String>, FormatScore, bool) {
    let Some(open) = body.find(TAG_MEM_RETRIEVAL) else {
        return (false, None, FormatScore::Wrong, !body.is_empty());
    };
    let after = &body[open + TAG_MEM_RETRIEVAL.len()..];
    let opens = count(body, TAG_MEM_RETRIEVAL);
    let closes = count(body, TAG_MEM_RETRIEVAL_END);
    match after.find(TAG_MEM_RETRIEVAL_END) {
        Some(close) => {
            let query = after[..close].trim().to_string();
            let outside = format!("{}{}", &body[..open], &after[close + TAG_MEM_RETRIEVAL_END.len()..]);
            let well_formed = opens == 1 && closes == 1 && !query.is_empty();
            let format = if well_formed {
                FormatScore::Perfect
            } else if !query.is_empty() {
                FormatScore::Partial
            } else {
                FormatScore::Wrong
            };
            (true, Some(query).filter(|q| !q.is_empty()), format, !outside.trim().is_empty())
        }
        None => {
            let recovered = after.split('<').next().unwrap_or("").trim().to_string();
            let format = if recovered.is_empty() { FormatScore::Wrong } else { FormatScore::Partial };
            let rest = &after[after.find('<').unwrap_or(after.len())..];
            let outside = !body[..open].trim().is_empty() || !rest.trim().is_empty();
            (true, Some(recovered).filter(|q| !q.is_empty()), format, outside)
        }
    }
}

/// Quality penalty in tenths: 1.5 for an empty body, plus 0.5 for more than
/// [`LONG_BODY_WORDS`] words, plus 0.5 when some word 3-gram occurs at least
/// [`REPEAT_THRESHOLD`] times; capped at 1.5.
pub fn quality_penalty(body: &str) -> Reward {
    let words: Vec<&str> = body.split_whitespace().collect();
    let mut p = 0;
    if words.is_empty() {
        p += 15;
    }
    if words.len() > LONG_BODY_WORDS {
        p += 5;
    }
    let mut grams: HashMap<&[&str], usize> = HashMap::new();
    for w in words.windows(3) {
        *grams.entry(w).or_default() += 1;
    }
    if grams.values().any(|&c| c >= REPEAT_THRESHOLD) {
        p += 5;
    }
    Reward(p.min(15))
}

pub fn r_think(out: &PolicyOutput) -> (Reward, &'static str) {
    let valid = out.tags == TagIntegrity::Intact && out.think.is_some();
    if valid && out.think_len > 0 && out.think_len <= MAX_THINK_CHARS {
        (Reward(2), "valid_think")
    } else if out.think_len > MAX_THINK_CHARS || out.body.is_empty() {
        (Reward(-2), "long_think_or_no_body")
    } else if out.tags == TagIntegrity::Broken {
        (Reward(-5), "broken_tags")
    } else {
        (Reward(0), "other")
    }
}

pub fn r_task(out: &PolicyOutput, class: TaskClass) -> (Reward, &'static str) {
    match class {
        TaskClass::A => {
            if out.retrieval_tag {
                (Reward(-15), "a_retrieval_emitted")
            } else {
                (Reward(15) - quality_penalty(&out.body), "a_completion")
            }
        }
        TaskClass::B => {
            let mut r = out.format.reward();
            if out.query.is_some() {
                r = r + Reward(5);
            }
            if out.text_outside_tags {
                r = r - Reward(10);
            }
            let label = match out.format {
                FormatScore::Perfect => "b_perfect",
                FormatScore::Partial => "b_partial",
                FormatScore::Wrong => "b_wrong",
            };
            (r, label)
        }
        TaskClass::C1 => match (out.no_mem, out.json_fields) {
            (NoMem::Pure, _) => (Reward(-15), "c1_pure_no_mem"),
            (_, Some(n)) => (Reward(15 + 2 * n as i32), "c1_valid_json"),
            (_, None) => (Reward(-10), "c1_invalid_json"),
        },
        TaskClass::C2 => match (out.no_mem, out.json_fields) {
            (NoMem::Pure, _) => (Reward(15), "c2_pure_no_mem"),
            (_, Some(_)) => (Reward(-10), "c2_json"),
            (NoMem::Noisy, None) => (Reward(0), "c2_noisy_no_mem"),
            (NoMem::Absent, None) => (Reward(-10), "c2_no_refusal"),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub class: TaskClass,
    pub r_think: Reward,
    pub r_task: Reward,
    pub total: Reward,
    pub think_branch: String,
    pub task_branch: String,
}

pub fn total_reward(out: &PolicyOutput, class: TaskClass) -> RewardBreakdown {
    let (think, think_branch) = r_think(out);
    let (task, task_branch) = r_task(out, class);
    RewardBreakdown {
        class,
        r_think: think,
        r_task: task,
        total: think + task,
        think_branch: think_branch.into(),
        task_branch: task_branch.into(),
    }
}

pub fn score(raw: &str, class: TaskClass) -> RewardBreakdown {
    total_reward(&parse_output(raw), class)
}

/// `(r - mean) / std` with the population std; all zeros when std < 1e-8.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}
