//! Client for an external scoring process speaking newline-delimited JSON.
//!
//! Startup: the client writes `{"op":"ping"}` and expects `{"op":"pong"}`.
//! Each request is `{"seq", "pocket_id", "molecule"}`; each response is
//! `{"seq", "ds", "qed", "sa"}`. Responses may arrive in any order.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::fraggraph::MoleculeJson;
use crate::reward::ScoreTriple;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("failed to start oracle {command:?}: {source}")]
    Spawn { command: String, source: std::io::Error },
    #[error("oracle handshake failed: {0}")]
    Handshake(String),
    #[error("oracle timed out after {timeout:?}; unanswered seqs {unanswered:?}")]
    Timeout { timeout: Duration, unanswered: Vec<u64> },
    #[error("oracle exited; unanswered seqs {unanswered:?}")]
    Exited { unanswered: Vec<u64> },
    #[error("malformed oracle response {line:?}: {reason}")]
    Malformed { line: String, reason: String },
    #[error("oracle I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl OracleError {
    pub fn unanswered(&self) -> &[u64] {
        match self {
            OracleError::Timeout { unanswered, .. } | OracleError::Exited { unanswered } => unanswered,
            _ => &[],
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl OracleConfig {
    pub fn new(command: Vec<String>) -> Self {
        OracleConfig { command, timeout: Duration::from_secs(120) }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    seq: u64,
    pocket_id: &'a str,
    molecule: &'a MoleculeJson,
}

#[derive(Deserialize)]
struct Response {
    seq: u64,
    ds: f64,
    qed: f64,
    sa: f64,
}

#[derive(Deserialize)]
struct Pong {
    op: String,
}

/// Owns one oracle child process.
pub struct OracleClient {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    reader: Option<JoinHandle<()>>,
    next_seq: u64,
    timeout: Duration,
}

impl OracleClient {
    pub fn spawn(cfg: &OracleConfig) -> Result<Self, OracleError> {
        let (program, args) = cfg
            .command
            .split_first()
            .ok_or_else(|| OracleError::Handshake("empty oracle command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| OracleError::Spawn { command: cfg.command.join(" "), source })?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, lines) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut client =
            OracleClient { child, stdin, lines, reader: Some(reader), next_seq: 0, timeout: cfg.timeout };
        client.handshake()?;
        Ok(client)
    }

    fn send(&mut self, line: &str) -> Result<(), OracleError> {
        let stdin = self.stdin.as_mut().ok_or_else(|| OracleError::Exited { unanswered: vec![] })?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()?;
        Ok(())
    }

    fn handshake(&mut self) -> Result<(), OracleError> {
        self.send(r#"{"op":"ping"}"#).map_err(|e| OracleError::Handshake(e.to_string()))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => match serde_json::from_str::<Pong>(&line) {
                Ok(p) if p.op == "pong" => Ok(()),
                _ => Err(OracleError::Handshake(format!("expected pong, got {line:?}"))),
            },
            Ok(Err(e)) => Err(OracleError::Handshake(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(OracleError::Handshake("no pong before timeout".into())),
            Err(RecvTimeoutError::Disconnected) => Err(OracleError::Handshake("oracle closed its output".into())),
        }
    }

    /// Scores a batch of `(pocket_id, molecule)` pairs; results in input order.
    /// The timeout covers the whole batch.
    pub fn score(&mut self, batch: &[(String, MoleculeJson)]) -> Result<Vec<ScoreTriple>, OracleError> {
        let first = self.next_seq;
        self.next_seq += batch.len() as u64;
        let mut pending: BTreeMap<u64, usize> = BTreeMap::new();
        for (k, (pocket_id, molecule)) in batch.iter().enumerate() {
            let seq = first + k as u64;
            let line = serde_json::to_string(&Request { seq, pocket_id, molecule })
                .map_err(|e| OracleError::Malformed { line: String::new(), reason: e.to_string() })?;
            pending.insert(seq, k);
            if self.send(&line).is_err() {
                return Err(OracleError::Exited { unanswered: (first..self.next_seq).collect() });
            }
        }
        let deadline = Instant::now() + self.timeout;
        let mut out: Vec<Option<ScoreTriple>> = vec![None; batch.len()];
        while !pending.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(left) {
                Ok(Ok(line)) => line,
                Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(OracleError::Exited { unanswered: pending.keys().copied().collect() })
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(OracleError::Timeout {
                        timeout: self.timeout,
                        unanswered: pending.keys().copied().collect(),
                    })
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            let r: Response = serde_json::from_str(&line)
                .map_err(|e| OracleError::Malformed { line: line.clone(), reason: e.to_string() })?;
            let k = pending.remove(&r.seq).ok_or_else(|| OracleError::Malformed {
                line: line.clone(),
                reason: format!("unexpected seq {}", r.seq),
            })?;
            out[k] = Some(ScoreTriple { ds: r.ds, qed: r.qed, sa_raw: r.sa });
        }
        Ok(out.into_iter().map(|t| t.expect("all answered")).collect())
    }
}

impl Drop for OracleClient {
    fn drop(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}
