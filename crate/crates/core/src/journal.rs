//! Append-only JSON-lines journal of transaction records.
//!
//! Each line is `{"seq":N,"checksum":"<sha256 hex>","record":{...}}` where the
//! checksum covers the exact bytes of the `record` value as written. A line is
//! only considered durable once its terminating newline is on disk, so a crash
//! mid-append leaves at most one damaged line at the end of the file.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transaction::TransactionRecord;

pub const JOURNAL_FILE: &str = "journal.log";

/// Everything the transaction manager writes to a journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JournalRecord {
    Transaction(TransactionRecord),
    QuarantineReset {
        at: DateTime<Utc>,
        operator_ack: String,
        discarded_snapshots: Vec<String>,
    },
}

impl JournalRecord {
    pub fn as_transaction(&self) -> Option<&TransactionRecord> {
        match self {
            JournalRecord::Transaction(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalEntry<T = JournalRecord> {
    pub seq: u64,
    pub checksum: String,
    pub record: T,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JournalWarning {
    /// The last line is incomplete or fails verification. `offset` is where
    /// the intact prefix ends.
    CorruptTail { line: usize, offset: u64, reason: String },
}

impl JournalWarning {
    pub fn code(&self) -> &'static str {
        "CORRUPT_TAIL"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JournalContents<T = JournalRecord> {
    pub entries: Vec<JournalEntry<T>>,
    pub warning: Option<JournalWarning>,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("IO_ERROR: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("CORRUPT_INTERIOR: {path} line {line}: {reason}")]
    CorruptInterior {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("IO_ERROR: cannot serialize record: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl JournalError {
    pub fn code(&self) -> &'static str {
        match self {
            JournalError::Io { .. } | JournalError::Serialize(_) => "IO_ERROR",
            JournalError::CorruptInterior { .. } => "CORRUPT_INTERIOR",
        }
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    seq: u64,
    checksum: &'a str,
    record: &'a RawValue,
}

#[derive(Deserialize)]
struct LineIn<'a> {
    seq: u64,
    checksum: String,
    #[serde(borrow)]
    record: &'a RawValue,
}

fn checksum(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

/// Open journal positioned for appending.
#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl Journal {
    /// Opens or creates the journal. A corrupt tail left by an interrupted
    /// append is cut off so new entries follow the intact prefix.
    pub fn open(path: impl AsRef<Path>) -> Result<Journal, JournalError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| JournalError::Io {
            path: path.clone(),
            source,
        };
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        let contents = read_all::<serde::de::IgnoredAny>(&path)?;
        if let Some(JournalWarning::CorruptTail { offset, reason, .. }) = &contents.warning {
            log::warn!("{}: dropping corrupt tail at byte {offset}: {reason}", path.display());
            file.set_len(*offset).map_err(io_err)?;
            file.sync_data().map_err(io_err)?;
        }
        let next_seq = contents.entries.last().map_or(1, |e| e.seq + 1);
        Ok(Journal {
            path,
            file,
            next_seq,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Seq the next append will receive.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Appends one record and syncs it to storage before returning its seq.
    pub fn append<T: Serialize + ?Sized>(&mut self, record: &T) -> Result<u64, JournalError> {
        let payload = serde_json::to_string(record)?;
        let raw = RawValue::from_string(payload)?;
        let sum = checksum(raw.get());
        let seq = self.next_seq;
        let mut line = serde_json::to_vec(&LineOut {
            seq,
            checksum: &sum,
            record: &raw,
        })?;
        line.push(b'\n');
        let io_err = |source| JournalError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&line).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        self.next_seq += 1;
        Ok(seq)
    }
}

/// Opens the journal, appends one record and closes it again.
pub fn append<T: Serialize + ?Sized>(path: impl AsRef<Path>, record: &T) -> Result<u64, JournalError> {
    Journal::open(path)?.append(record)
}

/// Reads every intact entry. A damaged final line is reported as a warning;
/// damage anywhere else is an error.
pub fn read_all<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<JournalContents<T>, JournalError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < data.len() {
        line_no += 1;
        let (line, terminated, next) = match data[offset..].iter().position(|&b| b == b'\n') {
            Some(i) => (&data[offset..offset + i], true, offset + i + 1),
            None => (&data[offset..], false, data.len()),
        };
        let expected = entries.last().map_or(1, |e: &JournalEntry<T>| e.seq + 1);
        let parsed = if terminated {
            parse_line(line, expected)
        } else {
            Err("missing line terminator".to_string())
        };
        match parsed {
            Ok(entry) => entries.push(entry),
            Err(reason) if next == data.len() => {
                return Ok(JournalContents {
                    entries,
                    warning: Some(JournalWarning::CorruptTail {
                        line: line_no,
                        offset: offset as u64,
                        reason,
                    }),
                });
            }
            Err(reason) => {
                return Err(JournalError::CorruptInterior {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason,
                })
            }
        }
        offset = next;
    }
    Ok(JournalContents {
        entries,
        warning: None,
    })
}

fn parse_line<T: DeserializeOwned>(line: &[u8], expected_seq: u64) -> Result<JournalEntry<T>, String> {
    let text = std::str::from_utf8(line).map_err(|e| format!("not UTF-8: {e}"))?;
    let raw: LineIn<'_> = serde_json::from_str(text).map_err(|e| format!("malformed entry: {e}"))?;
    if raw.seq != expected_seq {
        return Err(format!("seq {} where {} was expected", raw.seq, expected_seq));
    }
    let actual = checksum(raw.record.get());
    if actual != raw.checksum {
        return Err(format!("checksum mismatch for seq {}", raw.seq));
    }
    let record = serde_json::from_str(raw.record.get()).map_err(|e| format!("bad record: {e}"))?;
    Ok(JournalEntry {
        seq: raw.seq,
        checksum: raw.checksum,
        record,
    })
}
