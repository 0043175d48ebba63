//! L2 fact store.
//!
//! The plaintext log is one JSON object per line:
//!
//! ```text
//! {"schema":1,"op":"insert","record":{"id":0,"text":"...","fields":{...},...}}
//! {"schema":1,"op":"delete","id":0,"at":7}
//! ```
//!
//! Replaying the log reconstructs the live fact set. Deletion is a tombstone
//! line; the vector index keeps the node and search filters it out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hnsw::{HnswIndex, HnswParams};

use super::embed::Embedder;

pub const FACT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: u64,
    pub text: String,
    pub fields: BTreeMap<String, String>,
    pub embedding: Vec<f32>,
    pub created_at: u64,
    pub updated_at: u64,
    pub source_trace: Option<u64>,
    pub style_tag: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogOp {
    Insert { record: MemoryRecord },
    Delete { id: u64, at: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LogLine {
    schema: u32,
    #[serde(flatten)]
    op: LogOp,
}

#[derive(Debug, Default)]
struct Replayed {
    live: BTreeMap<u64, MemoryRecord>,
    deleted: BTreeSet<u64>,
    /// Inserted records in log order, tombstoned ones included.
    inserted: Vec<MemoryRecord>,
    clock: u64,
}

fn replay_file(path: &Path) -> Result<Replayed> {
    let mut out = Replayed::default();
    if !path.exists() {
        return Ok(out);
    }
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LogLine =
            serde_json::from_str(&line).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if parsed.schema != FACT_SCHEMA_VERSION {
            return Err(Error::Validation(format!("unsupported fact schema {}", parsed.schema)));
        }
        match parsed.op {
            LogOp::Insert { record } => {
                out.clock = out.clock.max(record.updated_at);
                out.inserted.push(record.clone());
                out.live.insert(record.id, record);
            }
            LogOp::Delete { id, at } => {
                out.clock = out.clock.max(at);
                out.live.remove(&id);
                out.deleted.insert(id);
            }
        }
    }
    Ok(out)
}

/// Live facts reconstructed from the plaintext log alone.
pub fn replay(path: &Path) -> Result<BTreeMap<u64, MemoryRecord>> {
    Ok(replay_file(path)?.live)
}

#[derive(Debug, Clone)]
pub struct FactStore {
    path: Option<PathBuf>,
    embedder: Arc<dyn Embedder>,
    records: BTreeMap<u64, MemoryRecord>,
    deleted: BTreeSet<u64>,
    index: HnswIndex,
    next_id: u64,
    clock: u64,
    hits: HashMap<u64, u32>,
}

impl FactStore {
    pub fn in_memory(embedder: Arc<dyn Embedder>) -> Result<Self> {
        let index = HnswIndex::new(embedder.dim(), HnswParams::default())?;
        Ok(Self {
            path: None,
            embedder,
            records: BTreeMap::new(),
            deleted: BTreeSet::new(),
            index,
            next_id: 0,
            clock: 0,
            hits: HashMap::new(),
        })
    }

    /// Opens (or creates) the store at `path`, loading the index file
    /// beside it when it matches the log and rebuilding it otherwise.
    pub fn open(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self> {
        let replayed = replay_file(path)?;
        let mut store = Self::in_memory(embedder)?;
        store.path = Some(path.to_path_buf());
        store.clock = replayed.clock;
        store.next_id = replayed.inserted.iter().map(|r| r.id + 1).max().unwrap_or(0);
        let loaded = HnswIndex::load(&store.index_path().expect("path set"))
            .ok()
            .filter(|i| i.len() == replayed.inserted.len() && i.dim() == store.embedder.dim());
        match loaded {
            Some(index) => store.index = index,
            None => {
                for r in &replayed.inserted {
                    store.index.insert(r.id, r.embedding.clone())?;
                }
            }
        }
        store.records = replayed.live;
        store.deleted = replayed.deleted;
        Ok(store)
    }

    /// Copy without a backing file, for read-only snapshots.
    pub fn detached(&self) -> Self {
        Self { path: None, ..self.clone() }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn index_path(&self) -> Option<PathBuf> {
        self.path.as_ref().map(|p| p.with_extension("hnsw.json"))
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &MemoryRecord> {
        self.records.values()
    }

    pub fn is_deleted(&self, id: u64) -> bool {
        self.deleted.contains(&id)
    }

    fn append(&self, line: &LogLine) -> Result<()> {
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(line)?)?;
            f.flush()?;
        }
        Ok(())
    }

    pub fn insert_fact(
        &mut self,
        text: &str,
        fields: BTreeMap<String, String>,
        source_trace: Option<u64>,
        style_tag: Option<String>,
    ) -> Result<MemoryRecord> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Validation("fact text must not be empty".into()));
        }
        self.clock += 1;
        let record = MemoryRecord {
            id: self.next_id,
            text: text.to_string(),
            fields,
            embedding: self.embedder.embed(text),
            created_at: self.clock,
            updated_at: self.clock,
            source_trace,
            style_tag,
        };
        self.append(&LogLine { schema: FACT_SCHEMA_VERSION, op: LogOp::Insert { record: record.clone() } })?;
        self.index.insert(record.id, record.embedding.clone())?;
        self.next_id += 1;
        self.records.insert(record.id, record.clone());
        Ok(record)
    }

    pub fn delete_fact(&mut self, id: u64) -> Result<()> {
        if !self.records.contains_key(&id) {
            return Err(Error::NotFound(id));
        }
        self.clock += 1;
        self.append(&LogLine { schema: FACT_SCHEMA_VERSION, op: LogOp::Delete { id, at: self.clock } })?;
        self.records.remove(&id);
        self.deleted.insert(id);
        self.hits.remove(&id);
        Ok(())
    }

    /// Top-`k` live records by similarity, best first.
    pub fn search(&self, query: &str, k: usize) -> Vec<(MemoryRecord, f32)> {
        if k == 0 || self.records.is_empty() {
            return Vec::new();
        }
        let q = self.embedder.embed(query);
        let want = k + self.deleted.len();
        let ef = self.index.params().ef_search.max(want);
        self.index
            .search(&q, want, ef)
            .into_iter()
            .filter_map(|(id, s)| self.records.get(&id).map(|r| (r.clone(), s)))
            .take(k)
            .collect()
    }

    /// Counts a retrieval of `id`; returns its running total.
    pub fn record_hit(&mut self, id: u64) -> u32 {
        let h = self.hits.entry(id).or_default();
        *h += 1;
        *h
    }

    pub fn hits(&self, id: u64) -> u32 {
        self.hits.get(&id).copied().unwrap_or(0)
    }

    pub fn save_index(&self) -> Result<()> {
        if let Some(p) = self.index_path() {
            self.index.save(&p)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::TrigramEmbedder;

    fn embedder() -> Arc<dyn Embedder> {
        Arc::new(TrigramEmbedder::default())
    }

    fn fields(k: &str, v: &str) -> BTreeMap<String, String> {
        BTreeMap::from([(k.to_string(), v.to_string())])
    }

    #[test]
    fn empty_text_rejected_and_empty_search() {
        let mut s = FactStore::in_memory(embedder()).unwrap();
        assert!(s.search("anything", 4).is_empty());
        assert!(matches!(s.insert_fact("  ", BTreeMap::new(), None, None), Err(Error::Validation(_))));
    }

    #[test]
    fn self_retrieval_top1() {
        let mut s = FactStore::in_memory(embedder()).unwrap();
        let texts = ["Alice's hometown is Porto.", "Bo's pet is named Rex.", "Chen works at Acme."];
        for t in texts {
            s.insert_fact(t, fields("k", "v"), None, None).unwrap();
        }
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(s.search(t, 4)[0].0.id, i as u64);
        }
    }

    #[test]
    fn tombstones_filter_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.jsonl");
        let mut s = FactStore::open(&path, embedder()).unwrap();
        let a = s.insert_fact("Alice's hometown is Porto.", fields("hometown", "Porto"), Some(3), None).unwrap();
        let b = s.insert_fact("Bo's hometown is Oslo.", fields("hometown", "Oslo"), Some(4), None).unwrap();
        s.delete_fact(a.id).unwrap();
        assert!(matches!(s.delete_fact(a.id), Err(Error::NotFound(_))));
        assert!(s.search("Alice's hometown is Porto.", 4).iter().all(|(r, _)| r.id != a.id));

        let live = replay(&path).unwrap();
        assert_eq!(live.keys().copied().collect::<Vec<_>>(), vec![b.id]);
        assert_eq!(live[&b.id], b);

        s.save_index().unwrap();
        let reopened = FactStore::open(&path, embedder()).unwrap();
        assert_eq!(reopened.len(), 1);
        assert!(reopened.is_deleted(a.id));
        assert_eq!(reopened.search("Bo's hometown", 1)[0].0.id, b.id);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.starts_with("{\"schema\":1,")));
    }

    #[test]
    fn reopen_without_index_file_rebuilds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.jsonl");
        let mut s = FactStore::open(&path, embedder()).unwrap();
        for i in 0..10 {
            s.insert_fact(&format!("fact number {i} about item{i}"), fields("n", &i.to_string()), None, None).unwrap();
        }
        let reopened = FactStore::open(&path, embedder()).unwrap();
        assert_eq!(reopened.len(), 10);
        let next =
            FactStore::open(&path, embedder()).unwrap().insert_fact("another", fields("a", "b"), None, None).unwrap();
        assert_eq!(next.id, 10);
    }
}
