//! Deterministic rule/n-gram backend.
//!
//! The model is a pure function of the byte history of a sequence. Working on
//! the current line (text after the last newline) it:
//!
//! 1. finishes a `<MEM_RETRIEVAL>query</MEM_RETRIEVAL>` tag once one is open,
//! 2. opens such a tag when the line contains a trigger cue and the previous
//!    line is not a memory block,
//! 3. continues with fact templates when a memory block precedes the line,
//! 4. otherwise continues the line with word-trigram statistics.
//!
//! Control tokens are literal byte strings here, so the cells carry no K/V.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};

use super::tokenizer::{TAG_MEM_RETRIEVAL, TAG_MEM_RETRIEVAL_END};
use super::{check_token, ForwardCounters, LanguageModel, Logits, ModelConfig, Token};

const FLOOR_LOGIT: f32 = -30.0;
const MEM_OPEN: &[u8] = b"<MEM";
const MAX_VALUE_WORDS: usize = 3;
/// Pseudo-word closing every corpus line.
const END: &str = "\n";

/// `(field, cue)` pairs of the built-in personal-fact vocabulary.
pub const STANDARD_ATTRIBUTES: [(&str, &str); 8] = [
    ("favorite_color", "favorite color"),
    ("favorite_food", "favorite food"),
    ("hometown", "hometown"),
    ("pet_name", "pet name"),
    ("employer", "employer"),
    ("hobby", "hobby"),
    ("birthday_month", "birthday month"),
    ("favorite_team", "favorite team"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerRule {
    /// Lowercase phrase that signals a need for a stored fact.
    pub cue: String,
    /// Record field whose value answers the cue.
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseTemplate {
    /// Continuation text; `{value}` is replaced by the fact's entity.
    pub text: String,
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRules {
    pub triggers: Vec<TriggerRule>,
    pub phrases: Vec<PhraseTemplate>,
    /// Style tag -> text appended to every fact phrase. The style content is
    /// synthetic; it only makes the style header observable in output.
    pub style_suffixes: BTreeMap<String, String>,
}

impl TemplateRules {
    pub fn new(triggers: Vec<TriggerRule>) -> Self {
        let phrase = |text: &str, weight| PhraseTemplate { text: text.into(), weight };
        Self {
            triggers,
            phrases: vec![
                phrase(" {value}", 4.0),
                phrase(" {value}!", 2.0),
                phrase(" definitely {value}", 1.0),
                phrase(" {value}, of course", 1.0),
            ],
            style_suffixes: BTreeMap::from([
                ("playful".to_string(), " :)".to_string()),
                ("formal".to_string(), ".".to_string()),
            ]),
        }
    }

    /// Rules for [`STANDARD_ATTRIBUTES`].
    pub fn standard() -> Self {
        Self::new(
            STANDARD_ATTRIBUTES
                .iter()
                .map(|(field, cue)| TriggerRule { cue: cue.to_string(), field: field.to_string() })
                .collect(),
        )
    }

    pub fn trigger_for(&self, line: &[u8]) -> Option<&TriggerRule> {
        let lower = line.to_ascii_lowercase();
        self.triggers.iter().find(|r| find(&lower, r.cue.as_bytes()).is_some())
    }
}

/// Renders a retrieved fact as the memory block spliced into the context.
pub fn render_memory_block(fields: &BTreeMap<String, String>, text: &str) -> String {
    let mut out = String::from("<MEM");
    for (k, v) in fields {
        out.push_str(&format!(" {k}=\"{}\"", v.replace('"', "'")));
    }
    out.push('>');
    out.push_str(&text.replace('\n', " "));
    out.push_str("</MEM>\n");
    out
}

/// Block spliced in when retrieval found nothing.
pub const EMPTY_MEMORY_BLOCK: &str = "<MEM></MEM>\n";

/// Attributes of a memory block line.
pub fn parse_memory_attrs(line: &[u8]) -> Option<BTreeMap<String, String>> {
    let rest = line.strip_prefix(MEM_OPEN)?;
    let close = rest.iter().position(|&b| b == b'>')?;
    let mut attrs = BTreeMap::new();
    let mut s = &rest[..close];
    loop {
        while let [b' ', tail @ ..] = s {
            s = tail;
        }
        let Some(eq) = find(s, b"=\"") else { break };
        let key = String::from_utf8_lossy(&s[..eq]).trim().to_string();
        let after = &s[eq + 2..];
        let Some(end) = after.iter().position(|&b| b == b'"') else {
            break;
        };
        attrs.insert(key, String::from_utf8_lossy(&after[..end]).into_owned());
        s = &after[end + 1..];
    }
    Some(attrs)
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

fn rfind(hay: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).rposition(|w| w == needle)
}

/// Strips a `U: ` / `A: ` speaker marker.
fn line_content(line: &[u8]) -> &[u8] {
    for marker in [b"U: ", b"A: "] {
        if let Some(rest) = line.strip_prefix(marker.as_slice()) {
            return rest;
        }
    }
    line
}

#[derive(Debug, Default, Clone)]
struct WordTrigrams {
    tri: BTreeMap<(String, String), BTreeMap<String, u32>>,
    bi: BTreeMap<String, BTreeMap<String, u32>>,
    uni: BTreeMap<String, u32>,
}

impl WordTrigrams {
    fn train(&mut self, text: &str) {
        for line in text.lines() {
            let words: Vec<&str> = line_content(line.as_bytes())
                .split(|b| b.is_ascii_whitespace())
                .filter(|w| !w.is_empty())
                .map(|w| std::str::from_utf8(w).unwrap_or(""))
                .filter(|w| !w.is_empty())
                .chain([END])
                .collect();
            for (i, w) in words.iter().enumerate() {
                if *w == END && i == 0 {
                    break;
                }
                *self.uni.entry(w.to_string()).or_default() += 1;
                if i >= 1 {
                    *self.bi.entry(words[i - 1].to_string()).or_default().entry(w.to_string()).or_default() += 1;
                }
                if i >= 2 {
                    *self
                        .tri
                        .entry((words[i - 2].to_string(), words[i - 1].to_string()))
                        .or_default()
                        .entry(w.to_string())
                        .or_default() += 1;
                }
            }
        }
    }

    fn end_fraction(&self, word: &str) -> f32 {
        let Some(next) = self.bi.get(word) else {
            return 1.0;
        };
        let total: u32 = next.values().sum();
        next.get(END).map_or(0.0, |&c| c as f32 / total as f32)
    }

    /// Next-byte weights for a line, backing off trigram -> bigram -> unigram
    /// until some known word extends the partial word.
    fn next_bytes(&self, content: &[u8]) -> BTreeMap<u8, f32> {
        let ends_in_space = content.last().is_none_or(|b| b.is_ascii_whitespace());
        let mut words: Vec<String> = content
            .split(|b| b.is_ascii_whitespace())
            .filter(|w| !w.is_empty())
            .map(|w| String::from_utf8_lossy(w).into_owned())
            .collect();
        let partial = if ends_in_space { String::new() } else { words.pop().unwrap_or_default() };
        let n = words.len();
        let mut tables: Vec<&BTreeMap<String, u32>> = Vec::new();
        if n >= 2 {
            if let Some(t) = self.tri.get(&(words[n - 2].clone(), words[n - 1].clone())) {
                tables.push(t);
            }
        }
        if n >= 1 {
            if let Some(t) = self.bi.get(&words[n - 1]) {
                tables.push(t);
            }
        }
        tables.push(&self.uni);
        for table in tables {
            let mut out = BTreeMap::new();
            for (word, &count) in table {
                let w = word.as_bytes();
                if word == END {
                    if partial.is_empty() {
                        *out.entry(b'\n').or_insert(0.0) += count as f32;
                    }
                    continue;
                }
                if !w.starts_with(partial.as_bytes()) {
                    continue;
                }
                if w.len() > partial.len() {
                    *out.entry(w[partial.len()]).or_insert(0.0) += count as f32;
                } else {
                    // A finished word either ends the line or takes a space.
                    let end_frac = self.end_fraction(word);
                    *out.entry(b'\n').or_insert(0.0) += count as f32 * end_frac;
                    *out.entry(b' ').or_insert(0.0) += count as f32 * (1.0 - end_frac);
                }
            }
            out.retain(|_, w| *w > 0.0);
            if !out.is_empty() {
                return out;
            }
        }
        BTreeMap::new()
    }
}

#[derive(Debug)]
pub struct TemplateModel {
    config: ModelConfig,
    rules: TemplateRules,
    ngrams: WordTrigrams,
    counters: ForwardCounters,
}

impl TemplateModel {
    pub fn new(corpus: &[&str], rules: TemplateRules) -> Result<Self> {
        if corpus.iter().all(|t| t.trim().is_empty()) {
            return Err(Error::Config("template model needs a non-empty corpus".into()));
        }
        let mut ngrams = WordTrigrams::default();
        for text in corpus {
            ngrams.train(text);
        }
        Ok(Self { config: ModelConfig::stateless(8192), rules, ngrams, counters: ForwardCounters::default() })
    }

    pub fn rules(&self) -> &TemplateRules {
        &self.rules
    }

    /// Next-byte weights given the full byte history.
    pub fn next_byte_weights(&self, text: &[u8]) -> BTreeMap<u8, f32> {
        let line_start = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let line = &text[line_start..];
        let prev_line = if line_start == 0 {
            &[][..]
        } else {
            let body = &text[..line_start - 1];
            &body[body.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1)..]
        };
        let newline = || BTreeMap::from([(b'\n', 1.0)]);

        if let Some(open) = rfind(line, TAG_MEM_RETRIEVAL.as_bytes()) {
            let query = String::from_utf8_lossy(line_content(&line[..open])).trim().to_string();
            let plan = format!("{query}{TAG_MEM_RETRIEVAL_END}");
            let emitted = &line[open + TAG_MEM_RETRIEVAL.len()..];
            return match plan.as_bytes().strip_prefix(emitted) {
                Some([next, ..]) => BTreeMap::from([(*next, 1.0)]),
                _ => newline(),
            };
        }

        let trigger = self.rules.trigger_for(line_content(line));
        let memory = parse_memory_attrs(prev_line);
        match (trigger, memory) {
            (Some(_), None) => suffix_plan(line, &[(TAG_MEM_RETRIEVAL.to_string(), 1.0)]),
            (Some(rule), Some(attrs)) => {
                let value =
                    attrs.get(&rule.field).or_else(|| attrs.iter().find(|(k, _)| *k != "subject").map(|(_, v)| v));
                match value {
                    Some(value) => {
                        let suffix = self.style_suffix(text);
                        let plans: Vec<(String, f32)> = self
                            .rules
                            .phrases
                            .iter()
                            .map(|p| (format!("{}{suffix}", p.text.replace("{value}", value)), p.weight))
                            .collect();
                        suffix_plan(line, &plans)
                    }
                    None => self.ngram_or_stop(line),
                }
            }
            _ => self.ngram_or_stop(line),
        }
    }

    fn ngram_or_stop(&self, line: &[u8]) -> BTreeMap<u8, f32> {
        let out = self.ngrams.next_bytes(line_content(line));
        if out.is_empty() {
            BTreeMap::from([(b'\n', 1.0)])
        } else {
            out
        }
    }

    fn style_suffix(&self, text: &[u8]) -> &str {
        let header = text.split(|&b| b == b'\n').next().unwrap_or_default();
        header
            .strip_prefix(b"[STYLE:")
            .and_then(|rest| rest.strip_suffix(b"]"))
            .and_then(|tag| self.rules.style_suffixes.get(String::from_utf8_lossy(tag).as_ref()))
            .map_or("", String::as_str)
    }

    /// Rule-driven fact extraction: `<subject>'s <cue> is <value>` or
    /// `my <cue> is <value>`.
    pub fn extract_fields(&self, text: &str) -> BTreeMap<String, String> {
        let bytes = text.as_bytes();
        let lower = text.to_ascii_lowercase();
        let lower = lower.as_bytes();
        let mut fields = BTreeMap::new();
        for rule in &self.rules.triggers {
            let cue = rule.cue.as_bytes();
            let mut from = 0;
            while let Some(off) = find(&lower[from..], cue) {
                let at = from + off;
                from = at + cue.len();
                let Some(value) = extract_value(&bytes[from..]) else {
                    continue;
                };
                let before = &lower[..at];
                let subject = if before.ends_with(b"my ") {
                    Some("me".to_string())
                } else if let Some(head) = before.strip_suffix(b"'s ") {
                    let start = head.iter().rposition(|b| !b.is_ascii_alphanumeric()).map_or(0, |i| i + 1);
                    (start < head.len()).then(|| String::from_utf8_lossy(&bytes[start..head.len()]).into_owned())
                } else {
                    None
                };
                let Some(subject) = subject else { continue };
                fields.entry("subject".to_string()).or_insert(subject);
                fields.insert(rule.field.clone(), value);
                break;
            }
        }
        fields
    }

    fn logits_for(&self, kv: &KvStore, seq: SeqId, pos: usize) -> Logits {
        let text: Vec<u8> = kv.context(seq, pos).into_iter().map(|c| kv.cell(c).token.0 as u8).collect();
        let mut values = vec![FLOOR_LOGIT; self.config.vocab_size];
        for (b, w) in self.next_byte_weights(&text) {
            values[b as usize] = w.ln();
        }
        Logits { values, position: pos, sequence: seq }
    }
}

/// `" is teal, ..."` -> `teal`.
fn extract_value(after_cue: &[u8]) -> Option<String> {
    let rest = after_cue.strip_prefix(b" is ")?;
    let end = rest.iter().position(|b| matches!(b, b'.' | b',' | b'!' | b'?' | b';' | b'\n')).unwrap_or(rest.len());
    let words: Vec<&[u8]> = rest[..end].split(|b| b.is_ascii_whitespace()).filter(|w| !w.is_empty()).collect();
    if words.is_empty() || words.len() > MAX_VALUE_WORDS {
        return None;
    }
    Some(words.iter().map(|w| String::from_utf8_lossy(w)).collect::<Vec<_>>().join(" "))
}

/// Next-byte weights for plans given what the line already ends with. Each
/// plan is aligned by the longest prefix of it that ends the line; only the
/// plans with the longest alignment vote, for their next byte or for newline
/// when fully emitted.
fn suffix_plan(line: &[u8], plans: &[(String, f32)]) -> BTreeMap<u8, f32> {
    let aligned: Vec<(usize, &[u8], f32)> = plans
        .iter()
        .map(|(plan, weight)| {
            let p = plan.as_bytes();
            let k = (0..=p.len().min(line.len())).rev().find(|&k| line.ends_with(&p[..k])).unwrap_or(0);
            (k, p, *weight)
        })
        .collect();
    let best = aligned.iter().map(|a| a.0).max().unwrap_or(0);
    let mut out = BTreeMap::new();
    for (k, p, weight) in aligned {
        if k == best {
            *out.entry(p.get(k).copied().unwrap_or(b'\n')).or_insert(0.0) += weight;
        }
    }
    if out.is_empty() {
        out.insert(b'\n', 1.0);
    }
    out
}

impl LanguageModel for TemplateModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn name(&self) -> &'static str {
        "template"
    }

    fn decode_one(
        &self,
        kv: &mut KvStore,
        token: Token,
        pos: usize,
        seq: SeqId,
        want_logits: bool,
    ) -> Result<Option<Logits>> {
        check_token(&self.config, token)?;
        kv.check_slot(seq, pos)?;
        kv.alloc_cell(seq, pos, token)?;
        self.counters.record(1, want_logits);
        Ok(want_logits.then(|| self.logits_for(kv, seq, pos)))
    }

    fn prefill(&self, kv: &mut KvStore, tokens: &[Token], seq: SeqId, start_pos: usize) -> Result<Logits> {
        if tokens.is_empty() {
            return Err(Error::Validation("cannot run a forward pass over zero tokens".into()));
        }
        for &t in tokens {
            check_token(&self.config, t)?;
        }
        kv.check_slot(seq, start_pos)?;
        let last = start_pos + tokens.len() - 1;
        if let Some(pos) = (start_pos + 1..=last).find(|&p| kv.cell_at(seq, p).is_some()) {
            return Err(Error::Overlap { seq, pos });
        }
        for (i, &t) in tokens.iter().enumerate() {
            kv.alloc_cell(seq, start_pos + i, t)?;
        }
        self.counters.record(tokens.len(), true);
        Ok(self.logits_for(kv, seq, last))
    }

    fn counters(&self) -> &ForwardCounters {
        &self.counters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sampling::{greedy_continue, sample_candidates, SamplingParams};
    use crate::model::tokenizer::{decode, encode};

    fn rules() -> TemplateRules {
        TemplateRules::new(vec![
            TriggerRule { cue: "favorite color".into(), field: "favorite_color".into() },
            TriggerRule { cue: "hometown".into(), field: "hometown".into() },
        ])
    }

    fn model() -> TemplateModel {
        TemplateModel::new(&["see you at the park tomorrow\nsee you at the station later"], rules()).unwrap()
    }

    fn greedy(m: &TemplateModel, text: &str) -> String {
        let mut kv = KvStore::for_model(m.config()).unwrap();
        let logits = m.prefill(&mut kv, &encode(text), SeqId(0), 0).unwrap();
        decode(&greedy_continue(m, &mut kv, SeqId(0), &logits, 80, |_| true).unwrap())
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(TemplateModel::new(&["  "], rules()), Err(Error::Config(_))));
    }

    #[test]
    fn ngram_continues_prefix() {
        assert_eq!(greedy(&model(), "U: see you at the st"), "ation later\n");
    }

    #[test]
    fn trigger_emits_retrieval_tag() {
        let out = greedy(&model(), "[STYLE:casual]\nU: Alice's favorite color is");
        assert_eq!(out, "<MEM_RETRIEVAL>Alice's favorite color is</MEM_RETRIEVAL>\n");
    }

    #[test]
    fn memory_block_grounds_continuation() {
        let fields = BTreeMap::from([
            ("subject".to_string(), "Alice".to_string()),
            ("favorite_color".to_string(), "teal".to_string()),
        ]);
        let block = render_memory_block(&fields, "Alice's favorite color is teal.");
        let ctx = format!("[STYLE:casual]\n{block}U: Alice's favorite color is");
        assert_eq!(greedy(&model(), &ctx), " teal\n");
        let ctx = format!("[STYLE:playful]\n{block}U: Alice's favorite color is te");
        assert_eq!(greedy(&model(), &ctx), "al :)\n");

        let m = model();
        let mut kv = KvStore::for_model(m.config()).unwrap();
        let ctx = format!("[STYLE:casual]\n{block}U: Alice's favorite color is");
        let logits = m.prefill(&mut kv, &encode(&ctx), SeqId(0), 0).unwrap();
        let params = SamplingParams { temperature: 1.0, seed: 5, max_tokens: 16 };
        let cands = sample_candidates(&m, &mut kv, SeqId(0), &logits, 4, &params).unwrap();
        assert!(cands.iter().all(|c| c.text.contains("teal")));
    }

    #[test]
    fn memory_attrs_round_trip() {
        let fields = BTreeMap::from([("a".to_string(), "x y".to_string())]);
        let block = render_memory_block(&fields, "t");
        assert_eq!(parse_memory_attrs(block.trim_end().as_bytes()), Some(fields));
        assert_eq!(parse_memory_attrs(EMPTY_MEMORY_BLOCK.trim_end().as_bytes()), Some(BTreeMap::new()));
    }

    #[test]
    fn empty_memory_falls_back_to_ngrams() {
        let ctx = format!("{EMPTY_MEMORY_BLOCK}U: my hometown is");
        let out = greedy(&model(), &ctx);
        assert!(!out.starts_with('<'), "{out}");
    }

    #[test]
    fn extraction_rules() {
        let m = model();
        let f = m.extract_fields("oh btw, Alice's favorite color is teal. nice");
        assert_eq!(f["subject"], "Alice");
        assert_eq!(f["favorite_color"], "teal");
        let f = m.extract_fields("My hometown is Porto");
        assert_eq!(f["subject"], "me");
        assert_eq!(f["hometown"], "Porto");
        assert!(m.extract_fields("what is Alice's favorite color?").is_empty());
        assert!(m.extract_fields("lol ok see you").is_empty());
    }
}
