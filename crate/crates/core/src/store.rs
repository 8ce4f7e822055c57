//! Append-only event log files, one JSON-lines file per session.
//!
//! Each append is a single `write` of complete lines on a file opened with
//! `O_APPEND`; records that start or end a session or complete an objective
//! are followed by `fsync`. Readers only ever see whole lines: a trailing
//! line without its newline is a torn append and is ignored, and
//! [`EventStore::repair`] cuts it off before the log is appended to again.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::session::{events_from_jsonl, SessionEvent, SessionId};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: unreadable record: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("malformed session id {0:?}")]
    BadSessionId(String),
}

#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    /// Opens (creating if needed) a log directory and checks it is writable.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| StoreError::Io { path, source }
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let probe = dir.join(".write-probe");
        File::create(&probe).map_err(io_err(&probe))?;
        fs::remove_file(&probe).map_err(io_err(&probe))?;
        Ok(EventStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &SessionId) -> Result<PathBuf, StoreError> {
        if !id.is_well_formed() {
            return Err(StoreError::BadSessionId(id.to_string()));
        }
        Ok(self.dir.join(format!("{id}.jsonl")))
    }

    /// Appends events that all belong to one session.
    pub fn append(&self, events: &[SessionEvent]) -> Result<(), StoreError> {
        let Some(first) = events.first() else {
            return Ok(());
        };
        let path = self.path_for(&first.session_id)?;
        let mut buf = String::new();
        for e in events {
            debug_assert_eq!(e.session_id, first.session_id);
            buf.push_str(&e.to_json_line());
        }
        let wrap = |source| StoreError::Io { path: path.clone(), source };
        let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(wrap)?;
        file.write_all(buf.as_bytes()).map_err(wrap)?;
        if events.iter().any(SessionEvent::needs_sync) {
            file.sync_data().map_err(wrap)?;
        }
        Ok(())
    }

    pub fn read(&self, id: &SessionId) -> Result<Vec<SessionEvent>, StoreError> {
        read_log(&self.path_for(id)?)
    }

    /// Drops a torn trailing record so later appends start on a line boundary.
    pub fn repair(&self, id: &SessionId) -> Result<bool, StoreError> {
        let path = self.path_for(id)?;
        let wrap = |source| StoreError::Io { path: path.clone(), source };
        let bytes = fs::read(&path).map_err(wrap)?;
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if keep == bytes.len() {
            return Ok(false);
        }
        let file = OpenOptions::new().write(true).open(&path).map_err(wrap)?;
        file.set_len(keep as u64).map_err(wrap)?;
        file.sync_all().map_err(wrap)?;
        Ok(true)
    }

    /// Session ids with a log file, sorted.
    pub fn list(&self) -> Result<Vec<SessionId>, StoreError> {
        let wrap = |source| StoreError::Io { path: self.dir.clone(), source };
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(wrap)? {
            let entry = entry.map_err(wrap)?;
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) else {
                continue;
            };
            let id = SessionId::new(stem);
            if id.is_well_formed() {
                ids.push(id);
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn read_all(&self) -> Result<Vec<(SessionId, Vec<SessionEvent>)>, StoreError> {
        self.list()?
            .into_iter()
            .map(|id| {
                let events = self.read(&id)?;
                Ok((id, events))
            })
            .collect()
    }
}

pub fn read_log(path: &Path) -> Result<Vec<SessionEvent>, StoreError> {
    let text = fs::read_to_string(path)
        .map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    events_from_jsonl(&text).map_err(|source| StoreError::Parse { path: path.to_path_buf(), source })
}
