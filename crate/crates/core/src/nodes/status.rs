use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::HashId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferStatus {
    Pending,
    Working,
    Completed,
}

impl TransferStatus {
    pub const ALL: [TransferStatus; 3] = [
        TransferStatus::Pending,
        TransferStatus::Working,
        TransferStatus::Completed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferStatus::Pending => "pending",
            TransferStatus::Working => "working",
            TransferStatus::Completed => "completed",
        }
    }

    /// Pending→Working→Completed, plus Pending→Pending for a header resend.
    pub fn can_become(self, next: TransferStatus) -> bool {
        use TransferStatus::*;
        matches!(
            (self, next),
            (Pending, Pending) | (Pending, Working) | (Working, Completed)
        )
    }
}

impl fmt::Display for TransferStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(TransferStatus::Pending),
            "working" => Ok(TransferStatus::Working),
            "completed" => Ok(TransferStatus::Completed),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StatusError {
    #[error("illegal status transition for {hash}: {from:?} -> {to}")]
    IllegalTransition {
        hash: HashId,
        from: Option<TransferStatus>,
        to: TransferStatus,
    },
    #[error("status journal: {0}")]
    Io(#[from] io::Error),
}

/// The sender-side status map, mirrored to an append-only journal.
///
/// Journal lines are `<iso-time> <hash_hex> <status>`; replay keeps the last
/// status per hash.
#[derive(Debug, Default)]
pub struct StatusManager {
    map: BTreeMap<HashId, TransferStatus>,
    journal: Option<(PathBuf, File)>,
}

impl StatusManager {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens `path`, replaying whatever it already holds.
    pub fn open(path: &Path) -> Result<Self, StatusError> {
        let map = if path.exists() {
            replay(path)?
        } else {
            BTreeMap::new()
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            map,
            journal: Some((path.to_path_buf(), file)),
        })
    }

    /// Starts with an empty journal at `path`, discarding any previous one.
    pub fn create(path: &Path) -> Result<Self, StatusError> {
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        Self::open(path)
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn get(&self, hash: &HashId) -> Option<TransferStatus> {
        self.map.get(hash).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&HashId, &TransferStatus)> {
        self.map.iter()
    }

    /// Starts a fresh lifecycle for `hash`, whatever came before.
    pub fn begin(&mut self, hash: HashId, at: DateTime<Utc>) -> Result<(), StatusError> {
        self.write(hash, TransferStatus::Pending, at)
    }

    pub fn set(
        &mut self,
        hash: HashId,
        to: TransferStatus,
        at: DateTime<Utc>,
    ) -> Result<(), StatusError> {
        let from = self.get(&hash);
        if !from.is_some_and(|f| f.can_become(to)) {
            return Err(StatusError::IllegalTransition { hash, from, to });
        }
        self.write(hash, to, at)
    }

    fn write(
        &mut self,
        hash: HashId,
        to: TransferStatus,
        at: DateTime<Utc>,
    ) -> Result<(), StatusError> {
        if let Some((_, file)) = &mut self.journal {
            let line = format!(
                "{} {} {}\n",
                at.to_rfc3339_opts(SecondsFormat::Millis, true),
                hash.to_hex(),
                to
            );
            file.write_all(line.as_bytes())?;
        }
        self.map.insert(hash, to);
        Ok(())
    }
}

/// Rebuilds the status map from a journal. A torn last line (no newline and
/// unparseable) is ignored; corruption anywhere else is an error.
pub fn replay(path: &Path) -> Result<BTreeMap<HashId, TransferStatus>, StatusError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut map = BTreeMap::new();
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        lineno += 1;
        let complete = line.ends_with('\n');
        match parse_line(line.trim_end()) {
            Some((hash, status)) => {
                map.insert(hash, status);
            }
            None if !complete => break,
            None if line.trim().is_empty() => {}
            None => {
                return Err(StatusError::Io(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}:{lineno}: bad journal record", path.display()),
                )))
            }
        }
    }
    Ok(map)
}

fn parse_line(line: &str) -> Option<(HashId, TransferStatus)> {
    let mut parts = line.split(' ');
    let (time, hash, status) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() {
        return None;
    }
    DateTime::parse_from_rfc3339(time).ok()?;
    Some((HashId::from_hex(hash).ok()?, status.parse().ok()?))
}
