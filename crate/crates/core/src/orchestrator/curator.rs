//! Background curation: interaction traces become L3 trajectory entries,
//! accepted extractions become L2 facts, and frequently retrieved facts are
//! compiled into L1 blobs.
//!
//! Each trace is processed at most once, keyed by its id. The set of
//! processed ids is rebuilt from the L3 log on startup, and cancellation is
//! only observed between traces, so an interrupted run followed by a resumed
//! one inserts exactly the facts of an uninterrupted run.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kv::{KvStore, SeqId};
use crate::memory::{compile_l1_blob, FactStore, L1Blob, MemoryRecord, TrajectoryLog};
use crate::model::sampling::greedy_continue;
use crate::model::template::render_memory_block;
use crate::model::tokenizer::{self, decode, encode, TAG_NO_MEM, TAG_THINK, TAG_THINK_END};
use crate::model::{ModelHandle, TemplateModel, Token};
use crate::reward::{parse_output, score, NoMem, TaskClass};

use super::session::InteractionTrace;

/// Foreground-owned preemption signal. Each signal bumps an epoch; a run
/// holds a ticket for the epoch it started in and counts as cancelled once
/// the epoch moves on, so a signal sent before the run began is not lost.
#[derive(Debug, Clone, Default)]
pub struct Preemption(Arc<AtomicU64>);

impl Preemption {
    pub fn signal(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn epoch(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    pub fn ticket(&self) -> CancelTicket {
        CancelTicket { source: self.clone(), epoch: self.epoch() }
    }
}

#[derive(Debug, Clone)]
pub struct CancelTicket {
    source: Preemption,
    epoch: u64,
}

impl CancelTicket {
    pub fn is_cancelled(&self) -> bool {
        self.source.epoch() != self.epoch
    }
}

/// What the curation policy made of one trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationDecision {
    pub class: TaskClass,
    /// Raw policy output, scored by the reward engine.
    pub output: String,
}

pub trait CurationPolicy: Send {
    fn decide(&mut self, trace: &InteractionTrace) -> Result<CurationDecision>;
}

/// Rule-driven policy over the template backend's fact extractor.
pub struct RulePolicy {
    extractor: Arc<TemplateModel>,
}

impl RulePolicy {
    pub fn new(extractor: Arc<TemplateModel>) -> Self {
        Self { extractor }
    }
}

impl CurationPolicy for RulePolicy {
    fn decide(&mut self, trace: &InteractionTrace) -> Result<CurationDecision> {
        let fields = self.extractor.extract_fields(&trace.text);
        let attrs: Vec<&str> = fields.keys().filter(|k| *k != "subject").map(String::as_str).collect();
        if attrs.is_empty() {
            return Ok(CurationDecision {
                class: TaskClass::C2,
                output: format!("{TAG_THINK}no stable personal fact stated{TAG_THINK_END}{TAG_NO_MEM}"),
            });
        }
        let subject = fields.get("subject").map_or("someone", String::as_str);
        Ok(CurationDecision {
            class: TaskClass::C1,
            output: format!(
                "{TAG_THINK}states {} of {subject}{TAG_THINK_END}{}",
                attrs.join(", "),
                serde_json::to_string(&fields)?
            ),
        })
    }
}

/// Sampled policy over an arbitrary backend: greedy decisions from the
/// model's own next-token preferences after a curation prompt.
pub struct SampledPolicy {
    model: ModelHandle,
    max_tokens: usize,
}

impl SampledPolicy {
    pub fn new(model: ModelHandle) -> Self {
        Self { model, max_tokens: 48 }
    }
}

impl CurationPolicy for SampledPolicy {
    fn decide(&mut self, trace: &InteractionTrace) -> Result<CurationDecision> {
        let prompt = encode(&format!("[CURATE]\n{}\n", trace.prompt()));
        let budget = self.model.config().max_positions;
        let prompt = &prompt[prompt.len().saturating_sub(budget - self.max_tokens - 1)..];
        let mut kv = KvStore::new(self.model.config(), prompt.len() + self.max_tokens + 1, 4)?;
        let logits = self.model.prefill(&mut kv, prompt, SeqId(0), 0)?;
        let refuse = if self.model.has_control_tokens() { tokenizer::NO_MEM } else { Token(u32::from(b'<')) };
        let extract = Token(u32::from(b'{'));
        if logits.values[refuse.0 as usize] >= logits.values[extract.0 as usize] {
            return Ok(CurationDecision { class: TaskClass::C2, output: TAG_NO_MEM.to_string() });
        }
        let mut forced = logits;
        forced.values.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
        forced.values[extract.0 as usize] = 0.0;
        let body = greedy_continue(&*self.model, &mut kv, SeqId(0), &forced, self.max_tokens, |_| true)?;
        Ok(CurationDecision { class: TaskClass::C1, output: decode(&body).trim_end().to_string() })
    }
}

/// String-valued fields of the output's JSON object, when it has one.
pub fn extraction_fields(output: &str) -> Option<BTreeMap<String, String>> {
    let body = output.rsplit(TAG_THINK_END).next().unwrap_or(output);
    let span = &body[body.find('{')?..=body.rfind('}')?];
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(span).ok()?;
    let fields: BTreeMap<String, String> = map
        .into_iter()
        .filter_map(|(k, v)| match v {
            serde_json::Value::String(s) if !s.trim().is_empty() => Some((k, s.trim().to_string())),
            serde_json::Value::Number(n) => Some((k, n.to_string())),
            _ => None,
        })
        .collect();
    fields.keys().any(|k| k != "subject").then_some(fields)
}

/// `Alice's favorite color is teal. Alice's hometown is Porto.`
pub fn declarative_text(fields: &BTreeMap<String, String>) -> Option<String> {
    let subject = match fields.get("subject").map(String::as_str) {
        None | Some("me") => "The user".to_string(),
        Some(s) => s.to_string(),
    };
    let parts: Vec<String> = fields
        .iter()
        .filter(|(k, _)| *k != "subject")
        .map(|(k, v)| format!("{subject}'s {} is {v}.", k.replace('_', " ")))
        .collect();
    (!parts.is_empty()).then(|| parts.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOutcome {
    pub trace_id: u64,
    pub class: TaskClass,
    pub output: String,
    pub reward: f64,
    pub think_branch: String,
    pub task_branch: String,
    pub entry_id: u64,
    pub fact_id: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub processed: usize,
    pub inserted: Vec<u64>,
    pub refused: usize,
    /// C1 decisions whose output carried no usable fields.
    pub rejected: usize,
    pub remaining: usize,
    pub preempted: bool,
    pub outcomes: Vec<TraceOutcome>,
}

/// Read-only view of the memory tiers for the foreground.
#[derive(Debug, Clone)]
pub struct MemorySnapshot {
    pub version: u64,
    pub facts: FactStore,
    pub blobs: BTreeMap<u64, Arc<L1Blob>>,
    /// First trace id not yet seen by curation.
    pub next_trace_id: u64,
}

pub struct Curator {
    policy: Box<dyn CurationPolicy>,
    model: ModelHandle,
    facts: FactStore,
    log: TrajectoryLog,
    processed: HashSet<u64>,
    pending: VecDeque<InteractionTrace>,
    blobs: BTreeMap<u64, Arc<L1Blob>>,
    hit_threshold: u32,
    next_trace_id: u64,
    version: u64,
}

impl Curator {
    /// `model` compiles L1 blobs; it should not be the foreground instance,
    /// so background work never shows up in foreground counters.
    pub fn new(
        policy: Box<dyn CurationPolicy>,
        model: ModelHandle,
        facts: FactStore,
        log: TrajectoryLog,
        hit_threshold: u32,
    ) -> Self {
        let processed: HashSet<u64> = log.entries().iter().filter_map(|e| e.trace_id).collect();
        let next_trace_id = processed.iter().max().map_or(0, |m| m + 1);
        Self {
            policy,
            model,
            facts,
            log,
            processed,
            pending: VecDeque::new(),
            blobs: BTreeMap::new(),
            hit_threshold: hit_threshold.max(1),
            next_trace_id,
            version: 0,
        }
    }

    pub fn facts(&self) -> &FactStore {
        &self.facts
    }

    pub fn log(&self) -> &TrajectoryLog {
        &self.log
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn is_processed(&self, trace_id: u64) -> bool {
        self.processed.contains(&trace_id)
    }

    /// Queues traces not already processed or queued; returns how many.
    pub fn enqueue(&mut self, traces: impl IntoIterator<Item = InteractionTrace>) -> usize {
        let mut added = 0;
        for t in traces {
            self.next_trace_id = self.next_trace_id.max(t.id + 1);
            if self.processed.contains(&t.id) || self.pending.iter().any(|p| p.id == t.id) {
                continue;
            }
            self.pending.push_back(t);
            added += 1;
        }
        added
    }

    /// Processes queued traces until the queue is empty or `ticket` is
    /// cancelled, checking only between traces. `observer` sees each
    /// outcome as soon as it is durable.
    pub fn run(&mut self, ticket: &CancelTicket, mut observer: impl FnMut(&TraceOutcome)) -> Result<CurationReport> {
        let mut report = CurationReport::default();
        loop {
            if ticket.is_cancelled() {
                report.preempted = !self.pending.is_empty();
                break;
            }
            let Some(trace) = self.pending.front().cloned() else {
                break;
            };
            let outcome = self.process(&trace)?;
            self.pending.pop_front();
            report.processed += 1;
            match (outcome.class, outcome.fact_id) {
                (_, Some(id)) => report.inserted.push(id),
                (TaskClass::C2, None) => report.refused += 1,
                _ => report.rejected += 1,
            }
            observer(&outcome);
            report.outcomes.push(outcome);
        }
        report.remaining = self.pending.len();
        if report.processed > 0 {
            self.version += 1;
        }
        Ok(report)
    }

    fn process(&mut self, trace: &InteractionTrace) -> Result<TraceOutcome> {
        let decision = self.policy.decide(trace)?;
        let breakdown = score(&decision.output, decision.class);
        let reward = breakdown.total.value();
        let entry_id = self.log.log(&trace.prompt(), &decision.output, decision.class, reward, Some(trace.id))?;
        self.processed.insert(trace.id);
        let mut fact_id = None;
        if decision.class == TaskClass::C1 && parse_output(&decision.output).no_mem == NoMem::Absent {
            if let Some(fields) = extraction_fields(&decision.output) {
                let text = declarative_text(&fields).expect("fields carry an attribute");
                let record = self.facts.insert_fact(&text, fields, Some(entry_id), trace.style_tag.clone())?;
                fact_id = Some(record.id);
            }
        }
        tracing::debug!(trace = trace.id, class = %decision.class, reward, fact = ?fact_id, "curated trace");
        Ok(TraceOutcome {
            trace_id: trace.id,
            class: decision.class,
            output: decision.output,
            reward,
            think_branch: breakdown.think_branch,
            task_branch: breakdown.task_branch,
            entry_id,
            fact_id,
        })
    }

    /// Counts a foreground retrieval of `id`; compiles its blob once the
    /// count reaches the threshold. Returns true when a blob was compiled.
    pub fn record_hit(&mut self, id: u64) -> Result<bool> {
        let Some(record) = self.facts.get(id).cloned() else {
            return Ok(false);
        };
        let hits = self.facts.record_hit(id);
        if hits < self.hit_threshold || self.blobs.contains_key(&id) {
            return Ok(false);
        }
        let tokens = encode(&render_memory_block(&record.fields, &record.text));
        let blob = compile_l1_blob(&*self.model, id, &tokens, record.style_tag.clone())?;
        self.blobs.insert(id, Arc::new(blob));
        self.version += 1;
        Ok(true)
    }

    pub fn insert_fact(&mut self, text: &str, fields: BTreeMap<String, String>) -> Result<MemoryRecord> {
        let r = self.facts.insert_fact(text, fields, None, None)?;
        self.version += 1;
        Ok(r)
    }

    pub fn delete_fact(&mut self, id: u64) -> Result<()> {
        self.facts.delete_fact(id)?;
        self.blobs.remove(&id);
        self.version += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            version: self.version,
            facts: self.facts.detached(),
            blobs: self.blobs.clone(),
            next_trace_id: self.next_trace_id,
        }
    }

    pub fn save_index(&self) -> Result<()> {
        self.facts.save_index()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::TrigramEmbedder;
    use crate::model::{build_reference_model, build_template_model, ModelConfig, TemplateRules};
    use crate::orchestrator::session::Role;

    fn template() -> Arc<TemplateModel> {
        build_template_model(&["hello there"], TemplateRules::standard()).unwrap()
    }

    fn curator() -> Curator {
        let m = template();
        let facts = FactStore::in_memory(Arc::new(TrigramEmbedder::default())).unwrap();
        Curator::new(Box::new(RulePolicy::new(m.clone())), m, facts, TrajectoryLog::in_memory(), 3)
    }

    fn trace(id: u64, text: &str) -> InteractionTrace {
        InteractionTrace { id, session: "s".into(), role: Role::User, text: text.into(), style_tag: None }
    }

    #[test]
    fn rule_policy_rewards() {
        let mut p = RulePolicy::new(template());
        let d = p.decide(&trace(0, "fyi Alice's hometown is Porto")).unwrap();
        assert_eq!(d.class, TaskClass::C1);
        let b = score(&d.output, d.class);
        assert_eq!(b.total.0, 2 + 15 + 4);
        let d = p.decide(&trace(1, "lol see you soon")).unwrap();
        assert_eq!((d.class, score(&d.output, d.class).total.0), (TaskClass::C2, 17));
    }

    #[test]
    fn declarative_rewrite() {
        let f =
            BTreeMap::from([("subject".to_string(), "me".to_string()), ("pet_name".to_string(), "Rex".to_string())]);
        assert_eq!(declarative_text(&f).unwrap(), "The user's pet name is Rex.");
        assert!(declarative_text(&BTreeMap::from([("subject".to_string(), "x".to_string())])).is_none());
        assert_eq!(extraction_fields("<think>a</think>{\"subject\":\"Bo\",\"hobby\":\"chess\"}").unwrap().len(), 2);
        assert!(extraction_fields("{\"subject\":\"Bo\"}").is_none());
        assert!(extraction_fields("{not json}").is_none());
    }

    #[test]
    fn traces_are_processed_once() {
        let mut c = curator();
        let ts = vec![trace(0, "Alice's hometown is Porto"), trace(1, "ok"), trace(2, "my hobby is chess")];
        assert_eq!(c.enqueue(ts.clone()), 3);
        assert_eq!(c.enqueue(ts.clone()), 0);
        let r = c.run(&Preemption::default().ticket(), |_| {}).unwrap();
        assert_eq!((r.processed, r.inserted.len(), r.refused, r.remaining), (3, 2, 1, 0));
        assert_eq!(c.enqueue(ts), 0);
        assert_eq!(c.facts().len(), 2);
        assert_eq!(c.log().len(), 3);
        let rec = c.facts().get(r.inserted[0]).unwrap();
        assert_eq!(rec.text, "Alice's hometown is Porto.");
        assert_eq!(rec.source_trace, Some(r.outcomes[0].entry_id));
    }

    #[test]
    fn preemption_stops_at_next_boundary() {
        let mut c = curator();
        c.enqueue((0..10).map(|i| trace(i, &format!("my hobby is chess{i}"))));
        let pre = Preemption::default();
        let ticket = pre.ticket();
        let r = c
            .run(&ticket, |o| {
                if o.trace_id == 3 {
                    pre.signal();
                }
            })
            .unwrap();
        assert!(r.preempted);
        assert_eq!((r.processed, r.remaining), (4, 6));
        let r = c.run(&pre.ticket(), |_| {}).unwrap();
        assert_eq!((r.processed, r.remaining, r.preempted), (6, 0, false));
        assert_eq!(c.facts().len(), 10);
    }

    #[test]
    fn processed_set_rebuilt_from_log() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("l3.jsonl");
        let fact_path = dir.path().join("l2.jsonl");
        let open = || {
            let m = template();
            let facts = FactStore::open(&fact_path, Arc::new(TrigramEmbedder::default())).unwrap();
            Curator::new(Box::new(RulePolicy::new(m.clone())), m, facts, TrajectoryLog::open(&log_path).unwrap(), 3)
        };
        let mut c = open();
        c.enqueue([trace(5, "my hometown is Oslo")]);
        c.run(&Preemption::default().ticket(), |_| {}).unwrap();
        let mut c = open();
        assert!(c.is_processed(5));
        assert_eq!(c.snapshot().next_trace_id, 6);
        assert_eq!(c.enqueue([trace(5, "my hometown is Oslo")]), 0);
        assert_eq!(c.facts().len(), 1);
    }

    #[test]
    fn hot_fact_compiles_blob_at_threshold() {
        let mut c = curator();
        let r = c.insert_fact("Bo's hobby is chess.", BTreeMap::from([("hobby".into(), "chess".into())])).unwrap();
        assert!(!c.record_hit(r.id).unwrap());
        assert!(!c.record_hit(r.id).unwrap());
        assert!(c.record_hit(r.id).unwrap());
        assert!(!c.record_hit(r.id).unwrap());
        let snap = c.snapshot();
        assert_eq!(snap.blobs[&r.id].tokens, encode(&render_memory_block(&r.fields, &r.text)));
        c.delete_fact(r.id).unwrap();
        assert!(c.snapshot().blobs.is_empty());
    }

    #[test]
    fn sampled_policy_is_total_and_deterministic() {
        let model = build_reference_model(ModelConfig::tiny_with_controls(9)).unwrap();
        let mut p = SampledPolicy::new(model);
        let t = trace(0, "my hometown is Oslo");
        let a = p.decide(&t).unwrap();
        assert_eq!(a, p.decide(&t).unwrap());
        let _ = score(&a.output, a.class);
    }
}
