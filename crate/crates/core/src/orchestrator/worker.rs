//! Background execution context. Owns the [`Curator`] (and with it every
//! L2/L3 write) on its own thread; the foreground talks to it only through
//! commands, reads published snapshots, and preempts it through the shared
//! epoch.

use std::collections::BTreeMap;
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryRecord;

use super::curator::{CancelTicket, CurationReport, Curator, MemorySnapshot, Preemption};
use super::session::InteractionTrace;

enum Command {
    Enqueue(Vec<InteractionTrace>),
    Run(CancelTicket),
    Hit(u64),
    Insert { text: String, fields: BTreeMap<String, String>, reply: Sender<Result<MemoryRecord>> },
    Delete { id: u64, reply: Sender<Result<()>> },
    Snapshot { reply: Sender<Arc<MemorySnapshot>> },
    Shutdown,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub running: bool,
    pub pending: usize,
    pub runs: u64,
}

#[derive(Debug)]
pub enum WorkerEvent {
    Snapshot(Arc<MemorySnapshot>),
    Status(WorkerStatus),
    Report(CurationReport),
}

pub struct MemoryWorker {
    commands: Sender<Command>,
    events: Receiver<WorkerEvent>,
    preemption: Preemption,
    thread: Option<JoinHandle<()>>,
}

impl MemoryWorker {
    pub fn spawn(curator: Curator) -> Result<Self> {
        let (commands, rx) = mpsc::channel();
        let (tx, events) = mpsc::channel();
        let thread =
            std::thread::Builder::new().name("memory-worker".into()).spawn(move || worker_loop(curator, rx, tx))?;
        Ok(Self { commands, events, preemption: Preemption::default(), thread: Some(thread) })
    }

    fn send(&self, cmd: Command) -> Result<()> {
        self.commands.send(cmd).map_err(|_| Error::WorkerGone)
    }

    pub fn preemption(&self) -> &Preemption {
        &self.preemption
    }

    pub fn preempt(&self) {
        self.preemption.signal();
    }

    pub fn enqueue(&self, traces: Vec<InteractionTrace>) -> Result<()> {
        self.send(Command::Enqueue(traces))
    }

    /// Starts a run under the current epoch; a later [`preempt`](Self::preempt)
    /// stops it at the next trace boundary.
    pub fn start_run(&self) -> Result<()> {
        self.send(Command::Run(self.preemption.ticket()))
    }

    pub fn record_hit(&self, id: u64) -> Result<()> {
        self.send(Command::Hit(id))
    }

    /// Blocks until the worker has inserted the fact. Preempts first.
    pub fn insert_fact(&self, text: &str, fields: BTreeMap<String, String>) -> Result<MemoryRecord> {
        self.preempt();
        let (reply, rx) = mpsc::channel();
        self.send(Command::Insert { text: text.into(), fields, reply })?;
        rx.recv().map_err(|_| Error::WorkerGone)?
    }

    /// Blocks until the tombstone is written. Preempts first.
    pub fn delete_fact(&self, id: u64) -> Result<()> {
        self.preempt();
        let (reply, rx) = mpsc::channel();
        self.send(Command::Delete { id, reply })?;
        rx.recv().map_err(|_| Error::WorkerGone)?
    }

    /// Current snapshot, waiting for the worker's next command boundary.
    pub fn snapshot(&self) -> Result<Arc<MemorySnapshot>> {
        let (reply, rx) = mpsc::channel();
        self.send(Command::Snapshot { reply })?;
        rx.recv().map_err(|_| Error::WorkerGone)
    }

    pub fn try_event(&self) -> Result<Option<WorkerEvent>> {
        match self.events.try_recv() {
            Ok(e) => Ok(Some(e)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(Error::WorkerGone),
        }
    }

    pub fn recv_event(&self, timeout: std::time::Duration) -> Result<Option<WorkerEvent>> {
        match self.events.recv_timeout(timeout) {
            Ok(e) => Ok(Some(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => Ok(None),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(Error::WorkerGone),
        }
    }
}

impl Drop for MemoryWorker {
    fn drop(&mut self) {
        self.preempt();
        let _ = self.commands.send(Command::Shutdown);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn worker_loop(mut curator: Curator, rx: Receiver<Command>, tx: Sender<WorkerEvent>) {
    let mut status = WorkerStatus::default();
    let publish = |curator: &Curator| {
        let _ = tx.send(WorkerEvent::Snapshot(Arc::new(curator.snapshot())));
    };
    for cmd in rx {
        match cmd {
            Command::Enqueue(traces) => {
                curator.enqueue(traces);
                status.pending = curator.pending();
                let _ = tx.send(WorkerEvent::Status(status));
            }
            Command::Run(ticket) => {
                status.running = true;
                let _ = tx.send(WorkerEvent::Status(status));
                let report = curator.run(&ticket, |_| {});
                status.running = false;
                status.runs += 1;
                status.pending = curator.pending();
                if let Err(e) = curator.save_index() {
                    tracing::warn!(error = %e, "saving the fact index failed");
                }
                publish(&curator);
                match report {
                    Ok(report) => {
                        tracing::info!(
                            report = %serde_json::to_string(&report).unwrap_or_default(),
                            "curation finished"
                        );
                        let _ = tx.send(WorkerEvent::Report(report));
                    }
                    Err(e) => tracing::error!(error = %e, "curation failed"),
                }
                let _ = tx.send(WorkerEvent::Status(status));
            }
            Command::Hit(id) => match curator.record_hit(id) {
                Ok(true) => publish(&curator),
                Ok(false) => {}
                Err(e) => tracing::warn!(error = %e, id, "blob compilation failed"),
            },
            Command::Insert { text, fields, reply } => {
                let r = curator.insert_fact(&text, fields);
                if r.is_ok() {
                    publish(&curator);
                }
                let _ = reply.send(r);
            }
            Command::Delete { id, reply } => {
                let r = curator.delete_fact(id);
                if r.is_ok() {
                    publish(&curator);
                }
                let _ = reply.send(r);
            }
            Command::Snapshot { reply } => {
                let _ = reply.send(Arc::new(curator.snapshot()));
            }
            Command::Shutdown => break,
        }
    }
    if let Err(e) = curator.save_index() {
        tracing::warn!(error = %e, "saving the fact index failed");
    }
}
