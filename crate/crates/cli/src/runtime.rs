//! The foreground context as a thread. Every request, from any endpoint, is
//! a job in one queue, so engine access is serialized without locks.

use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use ghostline_core::orchestrator::{Engine, EngineConfig};
use tokio::sync::oneshot;

use crate::protocol::{Envelope, ErrorCode, ProtocolError, Request};

type Job = Box<dyn FnOnce(&mut Engine) + Send>;

#[derive(Clone)]
pub struct EngineHandle {
    jobs: mpsc::Sender<Job>,
}

impl EngineHandle {
    /// Builds the engine on a new thread. With `idle_curation` set, buffered
    /// traces are handed to curation after that much quiet time.
    pub fn spawn(config: EngineConfig, idle_curation: Option<Duration>) -> anyhow::Result<(Self, JoinHandle<()>)> {
        let (jobs, rx) = mpsc::channel::<Job>();
        let (ready_tx, ready_rx) = mpsc::channel();
        let thread = std::thread::Builder::new().name("foreground".into()).spawn(move || {
            let mut engine = match Engine::new(config) {
                Ok(e) => {
                    let _ = ready_tx.send(Ok(()));
                    e
                }
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            foreground_loop(&mut engine, rx, idle_curation);
        })?;
        ready_rx.recv()??;
        Ok((Self { jobs }, thread))
    }

    /// Runs `f` on the foreground thread.
    pub async fn call<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Engine) -> R + Send + 'static,
    ) -> Result<R, ProtocolError> {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |e| {
                let _ = tx.send(f(e));
            }))
            .map_err(|_| gone())?;
        rx.await.map_err(|_| gone())
    }

    pub fn call_blocking<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Engine) -> R + Send + 'static,
    ) -> Result<R, ProtocolError> {
        let (tx, rx) = mpsc::channel();
        self.jobs
            .send(Box::new(move |e| {
                let _ = tx.send(f(e));
            }))
            .map_err(|_| gone())?;
        rx.recv().map_err(|_| gone())
    }
}

fn gone() -> ProtocolError {
    ProtocolError::new(ErrorCode::Internal, "foreground thread stopped")
}

fn foreground_loop(engine: &mut Engine, rx: mpsc::Receiver<Job>, idle: Option<Duration>) {
    let mut quiet_since = Instant::now();
    loop {
        let job = match idle {
            Some(idle) => rx.recv_timeout(idle.saturating_sub(quiet_since.elapsed())),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match job {
            Ok(job) => job(engine),
            Err(RecvTimeoutError::Timeout) => match engine.curation_due() {
                Ok(true) => match engine.start_curation() {
                    Ok(n) => tracing::info!(handed_over = n, "idle curation started"),
                    Err(e) => tracing::warn!(error = %e, "idle curation failed to start"),
                },
                Ok(false) => {}
                Err(e) => tracing::warn!(error = %e, "curation status unavailable"),
            },
            Err(RecvTimeoutError::Disconnected) => break,
        }
        quiet_since = Instant::now();
    }
}

/// Upper bound on one curation run during replay.
pub const REPLAY_CURATION_TIMEOUT: Duration = Duration::from_secs(30);

/// Replays recorded inbound envelopes (one JSON object per line) against
/// `engine`, returning the responses in order. A replayed `curation_run`
/// waits for the run to finish, so later requests see its facts the way a
/// live client that waited for curation did.
pub fn replay(engine: &mut Engine, transcript: &str) -> Vec<Envelope> {
    transcript
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| match crate::protocol::parse_envelope(line) {
            Ok((env, req)) => {
                let curation = matches!(req, Request::CurationRun);
                let resp = crate::protocol::dispatch(engine, env.seq, env.session, req);
                if curation && resp.kind != "error" {
                    if let Err(e) = engine.wait_for_curation(REPLAY_CURATION_TIMEOUT) {
                        tracing::warn!(error = %e, "replayed curation did not finish");
                    }
                }
                resp
            }
            Err((seq, e)) => Envelope::error(seq, None, &e),
        })
        .collect()
}
