//! L3 trajectory log: one JSON object per line, ids strictly increasing.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::TaskClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: u64,
    pub prompt: String,
    pub output: String,
    pub class: TaskClass,
    pub reward: f64,
    pub created_at: u64,
    /// Interaction trace this entry was derived from.
    pub trace_id: Option<u64>,
}

/// Training-corpus line written by [`TrajectoryLog::export_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub prompt: String,
    pub output: String,
    pub class: TaskClass,
    pub reward: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    path: Option<PathBuf>,
    entries: Vec<TrajectoryEntry>,
}

impl TrajectoryLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries: Vec<TrajectoryEntry> = Vec::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: TrajectoryEntry = serde_json::from_str(&line)
                    .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), n + 1)))?;
                if entries.last().is_some_and(|last| last.id >= e.id) {
                    return Err(Error::Validation(format!("{}:{}: ids must increase", path.display(), n + 1)));
                }
                entries.push(e);
            }
        }
        Ok(Self { path: Some(path.to_path_buf()), entries })
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn log(
        &mut self,
        prompt: &str,
        output: &str,
        class: TaskClass,
        reward: f64,
        trace_id: Option<u64>,
    ) -> Result<u64> {
        let id = self.entries.last().map_or(0, |e| e.id + 1);
        let entry = TrajectoryEntry {
            id,
            prompt: prompt.to_string(),
            output: output.to_string(),
            class,
            reward,
            created_at: id,
            trace_id,
        };
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            f.flush()?;
        }
        self.entries.push(entry);
        Ok(id)
    }

    /// Dataset lines in id order, optionally restricted to one class.
    pub fn export_lines(&self, filter: Option<TaskClass>) -> Result<Vec<String>> {
        self.entries
            .iter()
            .filter(|e| filter.is_none_or(|c| c == e.class))
            .map(|e| {
                let rec = DatasetRecord {
                    id: e.id,
                    prompt: e.prompt.clone(),
                    output: e.output.clone(),
                    class: e.class,
                    reward: e.reward,
                };
                Ok(serde_json::to_string(&rec)?)
            })
            .collect()
    }

    pub fn export_dataset(&self, filter: Option<TaskClass>, out: &Path) -> Result<usize> {
        let lines = self.export_lines(filter)?;
        let mut f = File::create(out)?;
        for l in &lines {
            writeln!(f, "{l}")?;
        }
        Ok(lines.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_monotone_and_reloaded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l3.jsonl");
        let mut log = TrajectoryLog::open(&path).unwrap();
        assert_eq!(log.log("p", "o", TaskClass::A, 1.5, None).unwrap(), 0);
        assert_eq!(log.log("p2", "<NO_MEM>", TaskClass::C2, 1.7, Some(9)).unwrap(), 1);
        let again = TrajectoryLog::open(&path).unwrap();
        assert_eq!(again.entries(), log.entries());
    }

    #[test]
    fn export_is_prefix_stable() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrajectoryLog::in_memory();
        log.log("a", "x", TaskClass::A, 1.5, None).unwrap();
        log.log("b", "y", TaskClass::B, 3.0, None).unwrap();
        let first = log.export_lines(None).unwrap();
        log.log("c", "z", TaskClass::C1, 2.1, None).unwrap();
        let second = log.export_lines(None).unwrap();
        assert_eq!(&second[..first.len()], &first[..]);
        assert_eq!(log.export_lines(Some(TaskClass::B)).unwrap().len(), 1);
        let out = dir.path().join("ds.jsonl");
        assert_eq!(log.export_dataset(None, &out).unwrap(), 3);
        assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 3);
    }
}
