//! Memory-pipeline report over a synthetic dataset: trigger, processing
//! (normal and refusal), retrieval@4 and grounded generation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ghostline_core::memory::{FactStore, TrajectoryLog, TrigramEmbedder};
use ghostline_core::model::{build_template_model, TemplateRules};
use ghostline_core::orchestrator::{
    extraction_fields, Curator, Engine, EngineConfig, InteractionTrace, Preemption, Provenance, Role, RulePolicy,
    SyncRequest, TraceOutcome,
};
use ghostline_core::reward::{parse_output, NoMem, TaskClass};
use serde::{Deserialize, Serialize};

use crate::corpus::{default_template_backend, DEFAULT_CORPUS};
use crate::dataset::Dataset;

pub const ROW_TRIGGER: &str = "Memory Trigger";
pub const ROW_NORMAL: &str = "Processing (Normal)";
pub const ROW_REFUSAL: &str = "Processing (Refusal)";
pub const ROW_RETRIEVAL: &str = "Retrieval@4";
pub const ROW_GROUNDED: &str = "Grounded Generation";

pub const RETRIEVAL_K: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub success: usize,
    pub total: usize,
    /// Percent, one decimal.
    pub rate: f64,
}

impl EvalRow {
    fn new(name: &str, success: usize, total: usize) -> Self {
        let rate = if total == 0 { 0.0 } else { (1000.0 * success as f64 / total as f64).round() / 10.0 };
        Self { name: name.into(), success, total, rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    /// Prefixes without retrieval intent that still opened a retrieval.
    pub false_triggers: usize,
    pub negative_prefixes: usize,
    /// Per retrieval case: whether the gold record was in the top 4.
    pub retrieval_hits: Vec<bool>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>15} {:>7}", "Stage", "Success / Total", "Rate")?;
        for r in &self.rows {
            writeln!(f, "{:<22} {:>15} {:>7.1}", r.name, format!("{} / {}", r.success, r.total), r.rate)?;
        }
        write!(f, "false triggers on neutral prefixes: {} / {}", self.false_triggers, self.negative_prefixes)
    }
}

fn engine(seed: u64) -> anyhow::Result<Engine> {
    let mut config = EngineConfig::new(default_template_backend());
    config.sampling.seed = seed;
    Ok(Engine::new(config)?)
}

fn sync_empty(engine: &mut Engine, session: &str) -> anyhow::Result<()> {
    let style_tag = engine.config().default_style.clone();
    engine.handle_sync(SyncRequest { session: session.into(), messages: Vec::new(), style_tag })?;
    Ok(())
}

/// Trigger row: a positive case succeeds when generation opens a retrieval.
fn eval_trigger(ds: &Dataset) -> anyhow::Result<(EvalRow, usize, usize)> {
    let mut e = engine(ds.seed)?;
    sync_empty(&mut e, "eval-trigger")?;
    let (mut hits, mut total, mut false_hits, mut negatives) = (0, 0, 0, 0);
    for case in &ds.trigger {
        let triggered = e.generate_candidates("eval-trigger", &case.prefix)?.retrieval.is_some();
        if case.needs_memory {
            total += 1;
            hits += usize::from(triggered);
        } else {
            negatives += 1;
            false_hits += usize::from(triggered);
        }
    }
    Ok((EvalRow::new(ROW_TRIGGER, hits, total), false_hits, negatives))
}

/// Processing rows: every message goes through curation. A normal case
/// succeeds when the extraction equals the gold fields and was stored; a
/// refusal case succeeds only on a bare `<NO_MEM>`.
fn eval_processing(ds: &Dataset) -> anyhow::Result<(EvalRow, EvalRow)> {
    let model = build_template_model(DEFAULT_CORPUS, TemplateRules::standard())?;
    let facts = FactStore::in_memory(Arc::new(TrigramEmbedder::default()))?;
    let mut curator =
        Curator::new(Box::new(RulePolicy::new(model.clone())), model, facts, TrajectoryLog::in_memory(), 3);
    let cases: Vec<_> = ds.normal.iter().chain(&ds.refusal).collect();
    curator.enqueue(cases.iter().enumerate().map(|(i, c)| InteractionTrace {
        id: i as u64,
        session: "eval-processing".into(),
        role: Role::User,
        text: c.text.clone(),
        style_tag: None,
    }));
    let mut outcomes: BTreeMap<u64, TraceOutcome> = BTreeMap::new();
    let report = curator.run(&Preemption::default().ticket(), |o| {
        outcomes.insert(o.trace_id, o.clone());
    })?;
    anyhow::ensure!(report.remaining == 0, "curation left {} traces", report.remaining);
    let (mut normal_ok, mut refusal_ok) = (0, 0);
    for (i, case) in cases.iter().enumerate() {
        let o = &outcomes[&(i as u64)];
        match &case.gold {
            Some(gold) => {
                let ok = o.class == TaskClass::C1
                    && o.fact_id.is_some()
                    && extraction_fields(&o.output).as_ref() == Some(gold);
                normal_ok += usize::from(ok);
            }
            None => refusal_ok += usize::from(parse_output(&o.output).no_mem == NoMem::Pure),
        }
    }
    Ok((EvalRow::new(ROW_NORMAL, normal_ok, ds.normal.len()), EvalRow::new(ROW_REFUSAL, refusal_ok, ds.refusal.len())))
}

/// Retrieval and grounded rows. The grounded row only covers cases whose
/// retrieval succeeded; a case passes when some candidate cites memory and
/// contains the gold entity.
fn eval_retrieval(ds: &Dataset) -> anyhow::Result<(EvalRow, EvalRow, Vec<bool>)> {
    let mut e = engine(ds.seed)?;
    let ids =
        ds.facts.iter().map(|f| Ok(e.memory_insert(&f.text, f.fields())?.id)).collect::<anyhow::Result<Vec<u64>>>()?;
    let hits: Vec<bool> = ds
        .retrieval
        .iter()
        .map(|c| e.memory_search(&c.query, RETRIEVAL_K).iter().any(|(r, _)| r.id == ids[c.fact]))
        .collect();
    sync_empty(&mut e, "eval-grounded")?;
    let mut grounded = 0;
    for (case, _) in ds.retrieval.iter().zip(&hits).filter(|(_, hit)| **hit) {
        let set = e.generate_candidates("eval-grounded", &case.prefix)?;
        let entity = case.entity.to_lowercase();
        let ok = set.candidates.iter().any(|c| {
            matches!(c.provenance, Provenance::MemoryGrounded { .. }) && c.text.to_lowercase().contains(&entity)
        });
        grounded += usize::from(ok);
    }
    let found = hits.iter().filter(|h| **h).count();
    Ok((EvalRow::new(ROW_RETRIEVAL, found, ds.retrieval.len()), EvalRow::new(ROW_GROUNDED, grounded, found), hits))
}

pub fn eval_pipeline(ds: &Dataset) -> anyhow::Result<EvalReport> {
    let (trigger, false_triggers, negative_prefixes) = eval_trigger(ds)?;
    let (normal, refusal) = eval_processing(ds)?;
    let (retrieval, grounded, retrieval_hits) = eval_retrieval(ds)?;
    Ok(EvalReport {
        seed: ds.seed,
        rows: vec![trigger, normal, refusal, retrieval, grounded],
        false_triggers,
        negative_prefixes,
        retrieval_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_dataset, DatasetCounts};

    #[test]
    fn small_report_has_conditioned_rows() {
        let ds = gen_dataset(5, DatasetCounts { trigger: 12, trigger_negative: 6, normal: 14, refusal: 10 });
        let r = eval_pipeline(&ds).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, [ROW_TRIGGER, ROW_NORMAL, ROW_REFUSAL, ROW_RETRIEVAL, ROW_GROUNDED]);
        assert_eq!(r.row(ROW_TRIGGER).unwrap().total, 12);
        assert_eq!(r.row(ROW_RETRIEVAL).unwrap().total, 200);
        assert_eq!(r.row(ROW_GROUNDED).unwrap().total, r.row(ROW_RETRIEVAL).unwrap().success);
        assert_eq!(r.negative_prefixes, 6);
    }
}
