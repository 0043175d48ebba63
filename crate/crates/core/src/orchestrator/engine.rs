//! Foreground context: owns the model, the KV store, the prefix cache and
//! the active session. Memory reads go to an in-memory snapshot that is
//! refreshed at SYNC boundaries; every write goes through the worker.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvStore, SeqId};
use crate::memory::{compile_l1_blob, inject_l1_blob, FactStore, MemoryRecord, TrajectoryLog, TrigramEmbedder};
use crate::model::sampling::{greedy_continue, sample_candidates, Candidate, SamplingParams};
use crate::model::template::{render_memory_block, EMPTY_MEMORY_BLOCK};
use crate::model::tokenizer::{decode_bytes, encode, TAG_MEM_RETRIEVAL, TAG_MEM_RETRIEVAL_END};
use crate::model::weights::fnv1a64;
use crate::model::{
    build_reference_model, build_template_model, CounterSnapshot, Logits, ModelConfig, ModelHandle, TemplateRules,
    Token,
};
use crate::radix::{RadixCache, RadixStats};
use crate::splice::{kv_splice, write_trace, SpliceConfig};

use super::curator::{CurationPolicy, CurationReport, Curator, MemorySnapshot, RulePolicy, SampledPolicy};
use super::session::{
    compose_line, fit_history, format_history, one_line, style_header, InteractionTrace, Role, SessionState,
    SyncRequest, USER_MARKER,
};
use super::worker::{MemoryWorker, WorkerEvent, WorkerStatus};
use super::{CandidateSet, CandidateTiming, Provenance, RankedCandidate, RetrievalInfo};

#[derive(Debug, Clone)]
pub enum Backend {
    Reference(ModelConfig),
    Template { corpus: Vec<String>, rules: TemplateRules },
}

impl Backend {
    pub fn build_model(&self) -> Result<ModelHandle> {
        match self {
            Backend::Reference(config) => build_reference_model(config.clone()),
            Backend::Template { corpus, rules } => {
                let corpus: Vec<&str> = corpus.iter().map(String::as_str).collect();
                Ok(build_template_model(&corpus, rules.clone())?)
            }
        }
    }

    /// A separate model instance for the background context plus its
    /// curation policy.
    pub fn build_background(&self) -> Result<(ModelHandle, Box<dyn CurationPolicy>)> {
        match self {
            Backend::Reference(_) => {
                let model = self.build_model()?;
                Ok((model.clone(), Box::new(SampledPolicy::new(model))))
            }
            Backend::Template { corpus, rules } => {
                let corpus: Vec<&str> = corpus.iter().map(String::as_str).collect();
                let model = build_template_model(&corpus, rules.clone())?;
                Ok((model.clone(), Box::new(RulePolicy::new(model))))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub backend: Backend,
    pub styles: Vec<String>,
    pub default_style: String,
    /// Candidates per request.
    pub k: usize,
    pub sampling: SamplingParams,
    /// Records fetched per retrieval; the best one is fused.
    pub retrieval_k: usize,
    pub probe_max_tokens: usize,
    pub recompute_window: usize,
    pub l1_hit_threshold: u32,
    /// Positions kept free after the history for memory, typing and sampling.
    pub context_reserve: usize,
    pub radix_budget_bytes: Option<usize>,
    /// Directory for the L2 and L3 files; in-memory when unset.
    pub data_dir: Option<PathBuf>,
    /// Line-delimited splice trace output.
    pub splice_trace: Option<PathBuf>,
}

impl EngineConfig {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            styles: vec!["casual".into(), "playful".into(), "formal".into()],
            default_style: "casual".into(),
            k: 4,
            sampling: SamplingParams::default(),
            retrieval_k: 4,
            probe_max_tokens: 96,
            recompute_window: 1,
            l1_hit_threshold: 3,
            context_reserve: 256,
            radix_budget_bytes: None,
            data_dir: None,
            splice_trace: None,
        }
    }

    pub fn fact_path(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("facts.jsonl"))
    }

    pub fn trajectory_path(&self) -> Option<PathBuf> {
        self.data_dir.as_ref().map(|d| d.join("trajectories.jsonl"))
    }

    /// Opens the memory tiers and builds the background curator.
    pub fn build_curator(&self) -> Result<Curator> {
        let embedder = Arc::new(TrigramEmbedder::default());
        let (facts, log) = match (self.fact_path(), self.trajectory_path()) {
            (Some(f), Some(t)) => {
                std::fs::create_dir_all(self.data_dir.as_ref().expect("set"))?;
                (FactStore::open(&f, embedder)?, TrajectoryLog::open(&t)?)
            }
            _ => (FactStore::in_memory(embedder)?, TrajectoryLog::in_memory()),
        };
        let (model, policy) = self.backend.build_background()?;
        Ok(Curator::new(policy, model, facts, log, self.l1_hit_threshold))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineCounters {
    pub syncs: u64,
    pub generations: u64,
    pub accepts: u64,
    /// Context computation: incremental prefill, splice work and fallbacks.
    pub prefill_tokens: u64,
    /// Everything else: probing, sampling, accepted-text decode.
    pub decode_tokens: u64,
    pub splices: u64,
    pub splice_fallbacks: u64,
    pub retrievals: u64,
    pub retrieval_misses: u64,
    pub blob_injections: u64,
    pub last_ttfc_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    #[serde(flatten)]
    pub counters: EngineCounters,
    /// Model counters since the engine finished starting up; equals
    /// `prefill_tokens + decode_tokens`.
    pub forward_tokens: u64,
    pub forward_calls: u64,
    pub radix: RadixStats,
    pub kv_bytes: usize,
    pub kv_live_cells: usize,
    pub memory_facts: usize,
    pub memory_blobs: usize,
    pub snapshot_version: u64,
    pub ksr: f64,
    pub curation: WorkerStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncAck {
    pub session: String,
    pub context_tokens: usize,
    pub matched_len: usize,
    pub computed: usize,
    pub dropped_messages: usize,
    pub new_traces: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptAck {
    pub composing: String,
    /// Tokens decoded into the base sequence.
    pub decoded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationStatus {
    pub worker: WorkerStatus,
    /// Traces still buffered in the session.
    pub buffered: usize,
    pub last_report: Option<CurationReport>,
}

pub struct Engine {
    config: EngineConfig,
    model: ModelHandle,
    kv: KvStore,
    radix: RadixCache,
    session: Option<SessionState>,
    snapshot: Arc<MemorySnapshot>,
    /// Newest snapshot published by the worker, applied at the next SYNC.
    published: Option<Arc<MemorySnapshot>>,
    worker: MemoryWorker,
    worker_status: WorkerStatus,
    last_report: Option<CurationReport>,
    next_trace_id: u64,
    counters: EngineCounters,
    baseline: CounterSnapshot,
    op_prefill: u64,
    splice_log: Option<BufWriter<File>>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        let model = config.backend.build_model()?;
        let curator = config.build_curator()?;
        Self::with_parts(config, model, curator)
    }

    /// Engine over an explicit foreground model and curator.
    pub fn with_parts(config: EngineConfig, model: ModelHandle, curator: Curator) -> Result<Self> {
        if config.k == 0 || config.styles.is_empty() || !config.styles.contains(&config.default_style) {
            return Err(Error::Config("need k > 0 and a default style among the styles".into()));
        }
        let mut kv = KvStore::for_model(model.config())?;
        let mut radix = RadixCache::new(config.radix_budget_bytes);
        // Style headers are compiled once and pinned at the head of the
        // prefix cache, so every context starts from a cached header.
        for (i, style) in config.styles.iter().enumerate() {
            let header = encode(&style_header(style));
            let blob = compile_l1_blob(&*model, u64::MAX - i as u64, &header, Some(style.clone()))?;
            let seq = kv.alloc_seq()?;
            inject_l1_blob(&blob, &mut kv, seq, 0)?;
            let (node, _) = radix.insert(&header, seq)?;
            radix.set_pinned(node, true)?;
        }
        let worker = MemoryWorker::spawn(curator)?;
        let snapshot = worker.snapshot()?;
        let splice_log = match &config.splice_trace {
            Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        let baseline = model.counters().snapshot();
        Ok(Self {
            next_trace_id: snapshot.next_trace_id,
            config,
            model,
            kv,
            radix,
            session: None,
            snapshot,
            published: None,
            worker,
            worker_status: WorkerStatus::default(),
            last_report: None,
            counters: EngineCounters::default(),
            baseline,
            op_prefill: 0,
            splice_log,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }

    pub fn kv(&self) -> &KvStore {
        &self.kv
    }

    pub fn radix(&self) -> &RadixCache {
        &self.radix
    }

    pub fn session(&self) -> Option<&SessionState> {
        self.session.as_ref()
    }

    pub fn snapshot(&self) -> &Arc<MemorySnapshot> {
        &self.snapshot
    }

    /// Signals the worker to stop at its next trace boundary.
    pub fn preempt(&self) {
        self.worker.preempt();
    }

    fn drain_events(&mut self) -> Result<()> {
        while let Some(e) = self.worker.try_event()? {
            self.on_event(e);
        }
        Ok(())
    }

    fn on_event(&mut self, event: WorkerEvent) {
        match event {
            WorkerEvent::Snapshot(s) => self.published = Some(s),
            WorkerEvent::Status(s) => self.worker_status = s,
            WorkerEvent::Report(r) => self.last_report = Some(r),
        }
    }

    fn apply_published(&mut self) -> Result<()> {
        self.drain_events()?;
        if let Some(s) = self.published.take() {
            self.next_trace_id = self.next_trace_id.max(s.next_trace_id);
            self.snapshot = s;
        }
        Ok(())
    }

    /// Runs `f` and books its model work as prefill (what `f` adds to
    /// `op_prefill`) and decode (the rest), also when `f` fails.
    fn accounted<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let before = self.model.counters().snapshot();
        self.op_prefill = 0;
        let r = f(self);
        let spent = self.model.counters().snapshot().since(before).tokens;
        self.counters.prefill_tokens += self.op_prefill;
        self.counters.decode_tokens += spent - self.op_prefill;
        r
    }

    fn alloc_seq(&mut self) -> Result<SeqId> {
        loop {
            match self.kv.alloc_seq() {
                Err(Error::SequencesExhausted) if self.radix.evict_lru(&mut self.kv)? => continue,
                r => return r,
            }
        }
    }

    fn check_fits(&self, len: usize) -> Result<()> {
        let max = self.model.config().max_positions;
        if len + self.config.sampling.max_tokens.max(self.config.probe_max_tokens) + 1 > max {
            return Err(Error::Capacity { capacity: max });
        }
        Ok(())
    }

    fn history_limit(&self) -> usize {
        self.model.config().max_positions.saturating_sub(self.config.context_reserve)
    }

    fn close_session(&mut self) -> Result<()> {
        if let Some(s) = self.session.take() {
            if !s.traces.is_empty() {
                self.worker.enqueue(s.traces)?;
            }
            self.kv.release_seq(s.seq0)?;
            self.kv.release_seq(s.gen_seq)?;
        }
        Ok(())
    }

    fn open_session(&mut self, id: &str, style: &str) -> Result<()> {
        self.close_session()?;
        let seq0 = self.alloc_seq()?;
        let gen_seq = self.alloc_seq()?;
        let base = encode(&format_history(style, &[]));
        let context: Vec<Token> = base.iter().copied().chain(encode(USER_MARKER)).collect();
        let (logits, resumed) = self.radix.resume_prefill(&*self.model, &mut self.kv, &context, seq0)?;
        self.op_prefill += resumed.computed as u64;
        self.session = Some(SessionState {
            id: id.to_string(),
            history: Vec::new(),
            style_tag: style.to_string(),
            seq0,
            gen_seq,
            traces: Vec::new(),
            base,
            composing: String::new(),
            context,
            seq0_logits: Some(logits),
            last_candidates: None,
            accepted_chars: 0,
            committed_chars: 0,
            synced: false,
        });
        Ok(())
    }

    /// Makes `id` the active session, opening it without history (as for a
    /// host that never sent a SYNC) when it is not.
    fn ensure_session(&mut self, id: &str) -> Result<()> {
        if self.session.as_ref().is_none_or(|s| s.id != id) {
            let style = self.config.default_style.clone();
            self.open_session(id, &style)?;
        }
        Ok(())
    }

    pub fn handle_sync(&mut self, req: SyncRequest) -> Result<SyncAck> {
        let start = Instant::now();
        self.preempt();
        if !self.config.styles.contains(&req.style_tag) {
            return Err(Error::UnknownStyle(req.style_tag));
        }
        self.apply_published()?;
        self.accounted(|e| e.sync_inner(req, start))
    }

    fn sync_inner(&mut self, req: SyncRequest, start: Instant) -> Result<SyncAck> {
        let (kept, dropped) = fit_history(&req.style_tag, &req.messages, self.history_limit())?;
        if self.session.as_ref().is_none_or(|s| s.id != req.session) {
            self.open_session(&req.session, &req.style_tag)?;
        }
        let mut next_id = self.next_trace_id;
        let sess = self.session.as_mut().expect("session opened");
        let common = sess.history.iter().zip(&req.messages).take_while(|(a, b)| a == b).count();
        let mut new_traces = 0;
        for m in &req.messages[common..] {
            if m.text.trim().is_empty() {
                continue;
            }
            if m.role == Role::User {
                sess.committed_chars += m.text.chars().count() as u64;
            }
            sess.traces.push(InteractionTrace {
                id: next_id,
                session: req.session.clone(),
                role: m.role,
                text: m.text.clone(),
                style_tag: Some(req.style_tag.clone()),
            });
            next_id += 1;
            new_traces += 1;
        }
        self.next_trace_id = next_id;

        let base = encode(&format_history(&req.style_tag, &kept));
        let context: Vec<Token> = base.iter().copied().chain(encode(USER_MARKER)).collect();
        let sess = self.session.as_mut().expect("session opened");
        let (logits, resumed) = self.radix.resume_prefill(&*self.model, &mut self.kv, &context, sess.seq0)?;
        self.op_prefill += resumed.computed as u64;
        sess.history = req.messages;
        sess.style_tag = req.style_tag;
        sess.base = base;
        sess.composing.clear();
        sess.context = context;
        sess.seq0_logits = Some(logits);
        sess.last_candidates = None;
        sess.synced = true;
        self.counters.syncs += 1;
        Ok(SyncAck {
            session: sess.id.clone(),
            context_tokens: sess.context.len(),
            matched_len: resumed.matched_len,
            computed: resumed.computed,
            dropped_messages: dropped,
            new_traces,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Candidates for the composing line `typed` of `session`.
    pub fn generate_candidates(&mut self, session: &str, typed: &str) -> Result<CandidateSet> {
        self.preempt();
        self.accounted(|e| e.generate_inner(session, typed))
    }

    fn generate_inner(&mut self, session: &str, typed: &str) -> Result<CandidateSet> {
        let start = Instant::now();
        let before = self.model.counters().snapshot();
        self.ensure_session(session)?;
        let typed = one_line(typed);
        let (p, gen_seq) = {
            let s = self.session.as_ref().expect("session ensured");
            (s.base.clone(), s.gen_seq)
        };
        let s = encode(&compose_line(&typed));
        let b: Vec<Token> = p.iter().chain(&s).copied().collect();
        self.check_fits(b.len())?;
        let (logits, resumed) = self.radix.resume_prefill(&*self.model, &mut self.kv, &b, gen_seq)?;
        self.op_prefill += resumed.computed as u64;

        // Candidate sampling is seeded by content, so a replayed transcript
        // gives the same texts however keystrokes were batched.
        let params = SamplingParams {
            seed: self.config.sampling.seed ^ fnv1a64(&decode_bytes(&b)),
            ..self.config.sampling.clone()
        };
        let (candidates, retrieval) = match self.probe_retrieval(gen_seq, &logits)? {
            None => {
                let c = sample_candidates(&*self.model, &mut self.kv, gen_seq, &logits, self.config.k, &params)?;
                (c, None)
            }
            Some(query) => {
                let query = if query.is_empty() { typed.trim().to_string() } else { query };
                let (c, info) = self.retrieve_and_splice(query, &p, &s, gen_seq, params)?;
                (c, Some(info))
            }
        };
        let provenance = match retrieval.as_ref().and_then(|r| r.record_id) {
            Some(record_id) => Provenance::MemoryGrounded { record_id },
            None => Provenance::Direct,
        };
        let spent = self.model.counters().snapshot().since(before);
        let timing = CandidateTiming {
            ttfc_ms: start.elapsed().as_secs_f64() * 1e3,
            forward_tokens: spent.tokens,
            forward_calls: spent.calls,
            prefill_computed: resumed.computed,
            matched_len: resumed.matched_len,
        };
        let set = CandidateSet {
            typed,
            candidates: candidates.into_iter().map(|c| RankedCandidate { text: c.text, provenance }).collect(),
            retrieval,
            timing,
        };
        self.counters.generations += 1;
        self.counters.last_ttfc_ms = timing.ttfc_ms;
        self.session.as_mut().expect("session ensured").last_candidates = Some(set.clone());
        Ok(set)
    }

    /// Greedy look-ahead for a retrieval tag; returns its query if the
    /// model opens one.
    fn probe_retrieval(&mut self, seq: SeqId, logits: &Logits) -> Result<Option<String>> {
        let open = TAG_MEM_RETRIEVAL.as_bytes();
        let close = TAG_MEM_RETRIEVAL_END.as_bytes();
        let tokens = greedy_continue(&*self.model, &mut self.kv, seq, logits, self.config.probe_max_tokens, |t| {
            let text = decode_bytes(t);
            if text.len() <= open.len() {
                open.starts_with(&text)
            } else {
                text.starts_with(open) && !text.ends_with(close)
            }
        })?;
        let text = decode_bytes(&tokens);
        let Some(rest) = text.strip_prefix(open) else {
            return Ok(None);
        };
        let rest = rest.strip_suffix(b"\n").unwrap_or(rest);
        let rest = rest.strip_suffix(close).unwrap_or(rest);
        Ok(Some(String::from_utf8_lossy(rest).trim().to_string()))
    }

    fn retrieve_and_splice(
        &mut self,
        query: String,
        p: &[Token],
        s: &[Token],
        seq: SeqId,
        params: SamplingParams,
    ) -> Result<(Vec<Candidate>, RetrievalInfo)> {
        self.counters.retrievals += 1;
        let hit = self.snapshot.facts.search(&query, self.config.retrieval_k).into_iter().next();
        let (block, record_id, score) = match &hit {
            Some((r, score)) => (render_memory_block(&r.fields, &r.text), Some(r.id), Some(*score)),
            None => {
                self.counters.retrieval_misses += 1;
                tracing::info!(query = %query, "retrieval miss");
                (EMPTY_MEMORY_BLOCK.to_string(), None, None)
            }
        };
        if let Some(id) = record_id {
            self.worker.record_hit(id)?;
        }
        let m = encode(&block);
        self.check_fits(p.len() + m.len() + s.len())?;
        let blob = record_id.and_then(|id| self.snapshot.blobs.get(&id).cloned()).filter(|b| b.tokens == m);
        let cfg = SpliceConfig { k: self.config.k, sampling: params, recompute_window: self.config.recompute_window };
        let out = kv_splice(&*self.model, &mut self.kv, seq, (p, &m, s), &cfg, blob.as_deref())?;
        self.op_prefill += out.trace.forward_tokens;
        self.counters.splices += 1;
        let used_blob = blob.is_some() && !out.trace.fallback;
        if out.trace.fallback {
            self.counters.splice_fallbacks += 1;
        }
        if used_blob {
            self.counters.blob_injections += 1;
        }
        if let Some(log) = self.splice_log.as_mut() {
            write_trace(log, &out.trace)?;
            log.flush()?;
        }
        let info = RetrievalInfo { query, record_id, score, fallback: out.trace.fallback, blob: used_blob };
        Ok((out.candidates, info))
    }

    /// Appends candidate `index` of the last set to the composing text and
    /// advances the base sequence over it.
    pub fn accept_candidate(&mut self, session: &str, index: usize) -> Result<AcceptAck> {
        self.preempt();
        self.accounted(|e| e.accept_inner(session, index))
    }

    fn accept_inner(&mut self, session: &str, index: usize) -> Result<AcceptAck> {
        let sess =
            self.session.as_ref().filter(|s| s.id == session).ok_or_else(|| Error::NoSession(session.to_string()))?;
        let set = sess.last_candidates.as_ref().ok_or_else(|| Error::Validation("no candidates to accept".into()))?;
        let cand =
            set.candidates.get(index).ok_or_else(|| Error::Validation(format!("no candidate at index {index}")))?;
        let composing = format!("{}{}", set.typed, cand.text);
        let accepted = cand.text.chars().count() as u64;
        let target: Vec<Token> = sess.base.iter().copied().chain(encode(&compose_line(&composing))).collect();
        self.check_fits(target.len())?;
        let lcp = sess.context.iter().zip(&target).take_while(|(a, b)| a == b).count();
        let keep = lcp.min(target.len() - 1);
        let seq0 = sess.seq0;
        self.kv.seq_rm(seq0, keep..)?;
        let logits = self.model.prefill(&mut self.kv, &target[keep..], seq0, keep)?;
        self.radix.cache(&mut self.kv, &target, seq0)?;
        let sess = self.session.as_mut().expect("checked above");
        sess.context = target;
        sess.composing = composing.clone();
        sess.seq0_logits = Some(logits);
        sess.accepted_chars += accepted;
        sess.last_candidates = None;
        self.counters.accepts += 1;
        Ok(AcceptAck { composing, decoded: sess.context.len() - keep })
    }

    /// Hands buffered traces to the worker and starts a run. Returns the
    /// number of traces handed over.
    pub fn start_curation(&mut self) -> Result<usize> {
        let traces: Vec<InteractionTrace> =
            self.session.as_mut().map(|s| s.traces.drain(..).collect()).unwrap_or_default();
        let n = traces.len();
        if n > 0 {
            self.worker.enqueue(traces)?;
            self.worker_status.pending += n;
        }
        self.worker.start_run()?;
        Ok(n)
    }

    /// Waits for the report of a started run.
    pub fn wait_for_curation(&mut self, timeout: Duration) -> Result<Option<CurationReport>> {
        let deadline = Instant::now() + timeout;
        self.last_report = None;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.worker.recv_event(left)? {
                Some(WorkerEvent::Report(r)) => {
                    self.last_report = Some(r.clone());
                    self.drain_events()?;
                    return Ok(Some(r));
                }
                Some(e) => self.on_event(e),
                None => return Ok(None),
            }
        }
    }

    /// Starts a run and waits for it.
    pub fn run_curation(&mut self, timeout: Duration) -> Result<Option<CurationReport>> {
        self.drain_events()?;
        self.start_curation()?;
        self.wait_for_curation(timeout)
    }

    /// True when traces are waiting and no run is active.
    pub fn curation_due(&mut self) -> Result<bool> {
        self.drain_events()?;
        let buffered = self.session.as_ref().is_some_and(|s| !s.traces.is_empty());
        Ok(!self.worker_status.running && (buffered || self.worker_status.pending > 0))
    }

    pub fn curation_status(&mut self) -> Result<CurationStatus> {
        self.drain_events()?;
        Ok(CurationStatus {
            worker: self.worker_status,
            buffered: self.session.as_ref().map_or(0, |s| s.traces.len()),
            last_report: self.last_report.clone(),
        })
    }

    /// Live facts as most recently published by the worker.
    pub fn memory_list(&mut self) -> Result<Vec<MemoryRecord>> {
        self.drain_events()?;
        let snap = self.published.as_ref().unwrap_or(&self.snapshot);
        Ok(snap.facts.records().cloned().collect())
    }

    /// Tombstones a fact; the foreground stops citing it immediately.
    pub fn memory_delete(&mut self, id: u64) -> Result<()> {
        self.worker.delete_fact(id)?;
        self.apply_published()
    }

    pub fn memory_insert(&mut self, text: &str, fields: BTreeMap<String, String>) -> Result<MemoryRecord> {
        let r = self.worker.insert_fact(text, fields)?;
        self.apply_published()?;
        Ok(r)
    }

    /// Top-`k` search over the foreground snapshot.
    pub fn memory_search(&self, query: &str, k: usize) -> Vec<(MemoryRecord, f32)> {
        self.snapshot.facts.search(query, k)
    }

    /// Waits until the worker has handled everything sent so far and makes
    /// its state the foreground snapshot.
    pub fn sync_memory(&mut self) -> Result<()> {
        let s = self.worker.snapshot()?;
        self.drain_events()?;
        self.published = None;
        self.next_trace_id = self.next_trace_id.max(s.next_trace_id);
        self.snapshot = s;
        Ok(())
    }

    pub fn metrics(&mut self) -> Result<EngineMetrics> {
        self.drain_events()?;
        let spent = self.model.counters().snapshot().since(self.baseline);
        Ok(EngineMetrics {
            counters: self.counters,
            forward_tokens: spent.tokens,
            forward_calls: spent.calls,
            radix: self.radix.stats(&self.kv),
            kv_bytes: self.kv.estimated_bytes(),
            kv_live_cells: self.kv.live_cells(),
            memory_facts: self.snapshot.facts.len(),
            memory_blobs: self.snapshot.blobs.len(),
            snapshot_version: self.snapshot.version,
            ksr: self.session.as_ref().map_or(0.0, SessionState::ksr),
            curation: self.worker_status,
        })
    }

    /// Ends the active session, handing its traces to curation.
    pub fn end_session(&mut self) -> Result<()> {
        self.close_session()
    }
}
