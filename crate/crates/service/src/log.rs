//! Append-only JSON-lines access log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::RequestParams;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("access log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("access log line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessLogRecord {
    pub timestamp: DateTime<Utc>,
    pub request_id: String,
    pub client_id: String,
    /// Digest of the submitted text; absent when the body did not parse.
    pub text_sha256: Option<String>,
    pub params: RequestParams,
    pub status: u16,
    pub candidates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogStats {
    pub total: usize,
    pub per_day: BTreeMap<String, usize>,
    pub per_client: BTreeMap<String, usize>,
}

pub struct AccessLog {
    path: PathBuf,
    file: Mutex<File>,
    fsync: bool,
}

impl AccessLog {
    /// Opens (creating if needed) the log for appending. With `fsync` every
    /// record is flushed to disk before `append` returns.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> Result<Self, LogError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
            fsync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &AccessLogRecord) -> Result<(), LogError> {
        let mut line = serde_json::to_vec(record).map_err(|e| LogError::Corrupt {
            line: 0,
            message: e.to_string(),
        })?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(&line)?;
        if self.fsync {
            f.sync_data()?;
        }
        Ok(())
    }

    pub fn records(&self) -> Result<Vec<AccessLogRecord>, LogError> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    pub fn stats(&self) -> Result<LogStats, LogError> {
        Ok(summarize(&self.records()?))
    }
}

pub fn summarize(records: &[AccessLogRecord]) -> LogStats {
    let mut stats = LogStats::default();
    for r in records {
        stats.total += 1;
        *stats.per_day.entry(r.timestamp.format("%Y-%m-%d").to_string()).or_default() += 1;
        *stats.per_client.entry(r.client_id.clone()).or_default() += 1;
    }
    stats
}
