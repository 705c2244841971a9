//! JSON Lines readers and writers for traces, repository indexes and the
//! ground-truth sidecar. Blank lines are skipped; every other line must hold
//! exactly one record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{RepositoryIndex, StudyRecord, TraceEvent, UsagePattern};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Construction-time class of one generated session, keyed by query id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub qid: u64,
    pub class: UsagePattern,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TraceError + '_ {
    move |source| TraceError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Parses JSON Lines from `reader`, calling `check` on each record.
/// `path` is only used in error messages.
pub fn read_jsonl_from<T, R, F>(reader: R, path: &Path, mut check: F) -> Result<Vec<T>, TraceError>
where
    T: DeserializeOwned,
    R: BufRead,
    F: FnMut(&T) -> Result<(), String>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| TraceError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let value: T = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        check(&value).map_err(parse_err)?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), TraceError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| TraceError::Io {
            path: path.to_owned(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, TraceError> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn check_event(ev: &TraceEvent) -> Result<(), String> {
    if ev.is_well_formed() {
        Ok(())
    } else {
        Err(format!(
            "{:?} record must carry exactly its own payload",
            ev.kind
        ))
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    read_jsonl_from(open(path)?, path, check_event)
}

pub fn write_trace(events: &[TraceEvent], path: &Path) -> Result<(), TraceError> {
    write_jsonl(events, path)
}

pub fn read_index(path: &Path) -> Result<RepositoryIndex, TraceError> {
    let mut index = RepositoryIndex::new();
    read_jsonl_from(open(path)?, path, |record: &StudyRecord| {
        index.insert(record.clone()).map_err(|e| e.to_string())
    })?;
    Ok(index)
}

pub fn write_index(index: &RepositoryIndex, path: &Path) -> Result<(), TraceError> {
    let records: Vec<&StudyRecord> = index.iter().collect();
    write_jsonl(&records, path)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>, TraceError> {
    read_jsonl_from(open(path)?, path, |_| Ok(()))
}

pub fn write_ground_truth(labels: &[GroundTruth], path: &Path) -> Result<(), TraceError> {
    write_jsonl(labels, path)
}
