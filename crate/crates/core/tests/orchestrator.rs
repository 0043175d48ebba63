use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ghostline_core::kv::{KvStore, SeqId};
use ghostline_core::memory::{FactStore, TrajectoryLog, TrigramEmbedder};
use ghostline_core::model::tokenizer::encode;
use ghostline_core::model::{build_template_model, ModelConfig, TemplateRules};
use ghostline_core::orchestrator::{
    Backend, CurationDecision, CurationPolicy, Curator, Engine, EngineConfig, InteractionTrace, Message, Provenance,
    RulePolicy, SyncRequest,
};
use ghostline_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &[&str] = &[
    "see you at the station later",
    "see you at the park tomorrow",
    "hello there how are you",
    "hello there my friend",
    "thanks a lot for the help",
];

fn template_config() -> EngineConfig {
    EngineConfig::new(Backend::Template {
        corpus: CORPUS.iter().map(|s| s.to_string()).collect(),
        rules: TemplateRules::standard(),
    })
}

fn sync(session: &str, msgs: &[Message]) -> SyncRequest {
    SyncRequest { session: session.into(), messages: msgs.to_vec(), style_tag: "casual".into() }
}

fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[test]
fn direct_completion_without_memory_call() {
    let mut e = Engine::new(template_config()).unwrap();
    e.handle_sync(sync("s", &[Message::assistant("hi")])).unwrap();
    let set = e.generate_candidates("s", "see you at the st").unwrap();
    assert!(set.retrieval.is_none());
    assert_eq!(set.candidates[0].text, "ation later");
    assert!(set.candidates.iter().all(|c| c.provenance == Provenance::Direct));
    assert_eq!(e.metrics().unwrap().counters.retrievals, 0);
}

#[test]
fn trigger_with_stored_fact_grounds_candidates() {
    let mut e = Engine::new(template_config()).unwrap();
    let rec = e
        .memory_insert("Alice's favorite color is teal.", fields(&[("subject", "Alice"), ("favorite_color", "teal")]))
        .unwrap();
    e.handle_sync(sync("s", &[Message::assistant("what should I get her?")])).unwrap();
    let set = e.generate_candidates("s", "Alice's favorite color is").unwrap();
    let r = set.retrieval.as_ref().expect("retrieval triggered");
    assert_eq!(r.query, "Alice's favorite color is");
    assert_eq!(r.record_id, Some(rec.id));
    assert!(!r.fallback);
    assert!(set.candidates.iter().any(|c| c.text.contains("teal")));
    assert!(set.candidates.iter().all(|c| c.provenance == Provenance::MemoryGrounded { record_id: rec.id }));
}

#[test]
fn retrieval_miss_degrades_to_direct_candidates() {
    let mut e = Engine::new(template_config()).unwrap();
    e.handle_sync(sync("s", &[])).unwrap();
    let set = e.generate_candidates("s", "my hometown is").unwrap();
    let r = set.retrieval.unwrap();
    assert_eq!(r.record_id, None);
    assert!(set.candidates.iter().all(|c| c.provenance == Provenance::Direct));
    assert!(set.candidates.iter().all(|c| !c.text.contains('<')));
    assert_eq!(e.metrics().unwrap().counters.retrieval_misses, 1);
}

#[test]
fn keystrokes_compute_only_appended_tokens() {
    let mut e = Engine::new(template_config()).unwrap();
    e.handle_sync(sync("s", &[Message::user("yo"), Message::assistant("hey")])).unwrap();
    let first = e.generate_candidates("s", "hel").unwrap();
    assert!(first.timing.prefill_computed >= 3);
    let second = e.generate_candidates("s", "hell").unwrap();
    let third = e.generate_candidates("s", "hello").unwrap();
    assert_eq!(second.timing.prefill_computed, 1);
    assert_eq!(third.timing.prefill_computed, 1);
    let again = e.generate_candidates("s", "hello").unwrap();
    assert_eq!(again.timing.prefill_computed, 1);
    assert_eq!(again.candidates, third.candidates);
}

#[test]
fn identical_resync_computes_one_token() {
    let mut e = Engine::new(template_config()).unwrap();
    let req = sync("s", &[Message::user("are you coming tonight"), Message::assistant("yes after work")]);
    let cold = e.handle_sync(req.clone()).unwrap();
    assert!(cold.computed > 1);
    let warm = e.handle_sync(req).unwrap();
    assert_eq!(warm.computed, 1);
    assert_eq!(warm.new_traces, 0);
}

#[test]
fn unknown_style_rejected_and_oversized_history_truncated() {
    let mut e = Engine::new(template_config()).unwrap();
    let bad = SyncRequest { session: "s".into(), messages: vec![], style_tag: "pirate".into() };
    assert!(matches!(e.handle_sync(bad), Err(Error::UnknownStyle(_))));
    let long: Vec<Message> = (0..400).map(|i| Message::user(format!("message number {i} with some padding"))).collect();
    let ack = e.handle_sync(sync("s", &long)).unwrap();
    assert!(ack.dropped_messages > 0);
    let max = e.model().config().max_positions;
    assert!(ack.context_tokens <= max - e.config().context_reserve);
    let ctx = String::from_utf8(e.session().unwrap().context.iter().map(|t| t.0 as u8).collect()).unwrap();
    assert!(ctx.ends_with("message number 399 with some padding\nU: "));
}

#[test]
fn session_without_sync_uses_empty_history() {
    let mut e = Engine::new(template_config()).unwrap();
    let set = e.generate_candidates("offline", "hello th").unwrap();
    let first = set.candidates[0].text.as_str();
    assert!(first == "ere how are you" || first == "ere my friend", "{first}");
    let s = e.session().unwrap();
    assert!(!s.synced && s.history.is_empty());
}

#[test]
fn accept_extends_composing_text() {
    let mut e = Engine::new(template_config()).unwrap();
    e.handle_sync(sync("s", &[])).unwrap();
    let set = e.generate_candidates("s", "thanks a l").unwrap();
    let ack = e.accept_candidate("s", 0).unwrap();
    assert_eq!(ack.composing, format!("thanks a l{}", set.candidates[0].text));
    assert!(matches!(e.accept_candidate("s", 0), Err(Error::Validation(_))));
    let next = e.generate_candidates("s", &ack.composing).unwrap();
    assert_eq!(next.timing.prefill_computed, 1);
}

#[test]
fn metrics_split_matches_model_counters() {
    let mut e = Engine::new(template_config()).unwrap();
    e.memory_insert("Bo's hobby is chess.", fields(&[("subject", "Bo"), ("hobby", "chess")])).unwrap();
    e.handle_sync(sync("s", &[Message::user("hi")])).unwrap();
    for typed in ["Bo's hobby is", "see you", "see you at"] {
        e.generate_candidates("s", typed).unwrap();
    }
    e.accept_candidate("s", 0).unwrap();
    let m = e.metrics().unwrap();
    assert_eq!(m.counters.prefill_tokens + m.counters.decode_tokens, m.forward_tokens);
    assert_eq!((m.counters.generations, m.counters.accepts, m.counters.splices), (3, 1, 1));
    assert_eq!(m.kv_bytes, e.kv().estimated_bytes());
}

#[test]
fn deleted_fact_is_no_longer_cited() {
    let mut e = Engine::new(template_config()).unwrap();
    let a = e.memory_insert("Cy's hometown is Lima.", fields(&[("subject", "Cy"), ("hometown", "Lima")])).unwrap();
    e.handle_sync(sync("s", &[])).unwrap();
    let before = e.generate_candidates("s", "Cy's hometown is").unwrap();
    assert_eq!(before.retrieval.unwrap().record_id, Some(a.id));
    e.memory_delete(a.id).unwrap();
    let after = e.generate_candidates("s", "Cy's hometown is").unwrap();
    assert_ne!(after.retrieval.unwrap().record_id, Some(a.id));
    assert!(after.candidates.iter().all(|c| c.provenance != Provenance::MemoryGrounded { record_id: a.id }));
    assert!(e.memory_list().unwrap().iter().all(|r| r.id != a.id));
}

#[test]
fn hot_fact_is_served_from_compiled_blob() {
    let mut e = Engine::new(template_config()).unwrap();
    let r = e.memory_insert("Di's employer is Acme.", fields(&[("subject", "Di"), ("employer", "Acme")])).unwrap();
    e.handle_sync(sync("s", &[])).unwrap();
    for _ in 0..3 {
        e.generate_candidates("s", "Di's employer is").unwrap();
    }
    e.sync_memory().unwrap();
    assert!(e.snapshot().blobs.contains_key(&r.id));
    let set = e.generate_candidates("s", "Di's employer is").unwrap();
    let info = set.retrieval.unwrap();
    assert!(info.blob && !info.fallback);
    assert!(set.candidates.iter().any(|c| c.text.contains("Acme")));
    assert_eq!(e.metrics().unwrap().counters.blob_injections, 1);
}

#[test]
fn synced_messages_are_curated_into_facts() {
    let mut e = Engine::new(template_config()).unwrap();
    e.handle_sync(sync("s", &[Message::user("my hometown is Porto"), Message::assistant("nice")])).unwrap();
    let report = e.run_curation(Duration::from_secs(10)).unwrap().unwrap();
    assert_eq!((report.processed, report.inserted.len(), report.refused), (2, 1, 1));
    let facts = e.memory_list().unwrap();
    assert_eq!(facts.len(), 1);
    assert_eq!(facts[0].text, "The user's hometown is Porto.");
    assert_eq!(facts[0].style_tag.as_deref(), Some("casual"));
    // Re-syncing the same history adds no traces and no facts.
    e.handle_sync(sync("s", &[Message::user("my hometown is Porto"), Message::assistant("nice")])).unwrap();
    let report = e.run_curation(Duration::from_secs(10)).unwrap().unwrap();
    assert_eq!(report.processed, 0);
    assert_eq!(e.memory_list().unwrap().len(), 1);
}

#[test]
fn persistent_engine_resumes_trace_ids() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = template_config();
    config.data_dir = Some(dir.path().to_path_buf());
    {
        let mut e = Engine::new(config.clone()).unwrap();
        e.handle_sync(sync("s", &[Message::user("my hobby is chess")])).unwrap();
        e.run_curation(Duration::from_secs(10)).unwrap().unwrap();
    }
    let mut e = Engine::new(config).unwrap();
    assert_eq!(e.snapshot().next_trace_id, 1);
    assert_eq!(e.memory_list().unwrap().len(), 1);
    e.handle_sync(sync("s2", &[Message::user("my hometown is Oslo")])).unwrap();
    let report = e.run_curation(Duration::from_secs(10)).unwrap().unwrap();
    assert_eq!(report.outcomes[0].trace_id, 1);
    assert_eq!(e.memory_list().unwrap().len(), 2);
}

/// Rule policy that takes a fixed time per trace.
struct SlowPolicy(RulePolicy, Duration);

impl CurationPolicy for SlowPolicy {
    fn decide(&mut self, trace: &InteractionTrace) -> ghostline_core::Result<CurationDecision> {
        std::thread::sleep(self.1);
        self.0.decide(trace)
    }
}

fn slow_engine(per_trace: Duration) -> Engine {
    let config = template_config();
    let model = config.backend.build_model().unwrap();
    let bg = build_template_model(CORPUS, TemplateRules::standard()).unwrap();
    let facts = FactStore::in_memory(Arc::new(TrigramEmbedder::default())).unwrap();
    let policy = Box::new(SlowPolicy(RulePolicy::new(bg.clone()), per_trace));
    let curator = Curator::new(policy, bg, facts, TrajectoryLog::in_memory(), 3);
    Engine::with_parts(config, model, curator).unwrap()
}

#[test]
fn sync_preempts_running_curation_without_waiting() {
    let per_trace = Duration::from_millis(20);
    let mut e = slow_engine(per_trace);
    let msgs: Vec<Message> = (0..60).map(|i| Message::user(format!("my hobby is sport{i}"))).collect();
    e.handle_sync(sync("s", &msgs)).unwrap();
    e.start_curation().unwrap();
    std::thread::sleep(Duration::from_millis(150));
    let t = Instant::now();
    let ack = e.handle_sync(sync("s", &msgs)).unwrap();
    assert!(t.elapsed() < per_trace * 10, "sync ack took {:?}", t.elapsed());
    assert_eq!(ack.new_traces, 0);
    let first = e.wait_for_curation(Duration::from_secs(10)).unwrap().unwrap();
    assert!(first.preempted && first.processed < 60 && first.remaining == 60 - first.processed);
    let second = e.run_curation(Duration::from_secs(30)).unwrap().unwrap();
    assert_eq!(first.processed + second.processed, 60);
    let facts = e.memory_list().unwrap();
    assert_eq!(facts.len(), 60);
    let mut texts: Vec<String> = facts.iter().map(|f| f.text.clone()).collect();
    texts.sort();
    texts.dedup();
    assert_eq!(texts.len(), 60);
}

/// After any sequence of generate/accept steps the base sequence's logits
/// equal a cold prefill of the accumulated context.
#[test]
fn incremental_decode_matches_cold_prefill() {
    let mut config = EngineConfig::new(Backend::Reference(ModelConfig::tiny(21)));
    config.sampling.max_tokens = 6;
    config.probe_max_tokens = 20;
    let oracle = config.backend.build_model().unwrap();
    let mut e = Engine::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    e.handle_sync(sync("s", &[Message::user("hello"), Message::assistant("hi there")])).unwrap();
    let mut typed = String::new();
    for step in 0..12 {
        let extra: String = (0..rng.random_range(1..4)).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        typed.push_str(&extra);
        let set = e.generate_candidates("s", &typed).unwrap();
        if !set.candidates.is_empty() && step % 2 == 0 {
            let idx = rng.random_range(0..set.candidates.len());
            typed = e.accept_candidate("s", idx).unwrap().composing;
        }
        let sess = e.session().unwrap();
        let mut kv = KvStore::for_model(oracle.config()).unwrap();
        let cold = oracle.prefill(&mut kv, &sess.context, SeqId(0), 0).unwrap();
        let diff = sess.seq0_logits.as_ref().unwrap().max_abs_diff(&cold);
        assert!(diff <= 1e-5, "step {step}: diff {diff}");
        assert_eq!(e.kv().seq_tokens(sess.seq0), sess.context);
    }
    let m = e.metrics().unwrap();
    assert_eq!(m.counters.prefill_tokens + m.counters.decode_tokens, m.forward_tokens);
    let sess = e.session().unwrap();
    let expected = encode(&format!("[STYLE:casual]\nU: hello\nA: hi there\nU: {}", sess.composing));
    assert_eq!(expected, sess.context);
}
