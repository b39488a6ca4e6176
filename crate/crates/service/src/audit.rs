//! Append-only JSONL audit log. Every queue mutation is written and synced
//! here before it is applied, so replaying the log rebuilds the queue.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::queue::{QueueError, Resolution, TriageItem, TriageQueue};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit log line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("audit log line {line}: {source}")]
    Replay { line: usize, source: QueueError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditRecord {
    Enqueued { item: Box<TriageItem> },
    Resolved { resolution: Resolution },
}

pub struct AuditLog {
    path: PathBuf,
    file: File,
}

impl AuditLog {
    /// Opens for appending, first dropping any torn final line.
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        if let Ok(bytes) = std::fs::read(path) {
            if !bytes.is_empty() && !bytes.ends_with(b"\n") {
                let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
                log::warn!("truncating torn audit record at byte {keep}");
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record and syncs it to disk.
    pub fn append(&mut self, rec: &AuditRecord) -> Result<(), AuditError> {
        let mut line = serde_json::to_vec(rec).expect("audit record serializes");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Reads every record. A torn final line (crash mid-write) is ignored.
pub fn read_records(path: &Path) -> Result<Vec<AuditRecord>, AuditError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("ignoring torn final audit record: {e}");
            }
            Err(e) => {
                return Err(AuditError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Rebuilds queue state from records.
pub fn replay(records: &[AuditRecord]) -> Result<TriageQueue, AuditError> {
    let mut q = TriageQueue::new();
    for (i, r) in records.iter().enumerate() {
        let res = match r {
            AuditRecord::Enqueued { item } => q.insert((**item).clone()).map(|_| ()),
            AuditRecord::Resolved { resolution } => q.apply(resolution),
        };
        res.map_err(|source| AuditError::Replay { line: i + 1, source })?;
    }
    Ok(q)
}
