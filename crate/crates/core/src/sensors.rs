//! Message, study and network sensors.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{
    EventKind, QuerySpec, RepositoryIndex, StudyRecord, StudyUid, Timestamp, TraceEvent,
};

/// Application entity of the remote archive every request is addressed to.
pub const ARCHIVE_AE: &str = "CLOUD_ARCHIVE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Trailing window over which link utilization is measured.
    pub utilization_window_s: f64,
    /// Utilization strictly below this counts as idle.
    pub idle_threshold: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            utilization_window_s: 600.0,
            idle_threshold: 0.3,
        }
    }
}

/// One message-log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: Timestamp,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_uid: Option<StudyUid>,
    pub requesting_ae: String,
    pub destination_ae: String,
    /// Studies matched by a query response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matches: Option<Vec<StudyUid>>,
}

pub fn message_sensor_record(
    event: &TraceEvent,
    response_meta: Option<Vec<StudyUid>>,
) -> LogRecord {
    LogRecord {
        ts: event.timestamp,
        kind: event.kind,
        query: event.query.clone(),
        study_uid: event.study_uid.clone(),
        requesting_ae: event.aetitle.clone(),
        destination_ae: ARCHIVE_AE.to_owned(),
        matches: match event.kind {
            EventKind::Query => Some(response_meta.unwrap_or_default()),
            EventKind::Retrieve => None,
        },
    }
}

/// Append-only message log.
#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    records: Vec<LogRecord>,
}

impl MessageLog {
    pub fn record(
        &mut self,
        event: &TraceEvent,
        response_meta: Option<Vec<StudyUid>>,
    ) -> &LogRecord {
        self.records
            .push(message_sensor_record(event, response_meta));
        self.records.last().unwrap()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("study {0} not found in repository")]
pub struct NotFound(pub StudyUid);

pub fn study_sensor_lookup<'a>(
    index: &'a RepositoryIndex,
    uid: &StudyUid,
) -> Result<&'a StudyRecord, NotFound> {
    index.get(uid).ok_or_else(|| NotFound(uid.clone()))
}

/// Interval in seconds during which the WAN link was transferring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusyInterval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSample {
    pub window_start: f64,
    pub window_end: f64,
    pub busy_seconds: f64,
    pub utilization: f64,
}

/// Busy seconds inside `[now - window, now]`, counting overlapping intervals once.
fn busy_within(log: &[BusyInterval], from: f64, to: f64) -> f64 {
    let mut clipped: Vec<(f64, f64)> = log
        .iter()
        .map(|b| (b.start.max(from), b.end.min(to)))
        .filter(|(s, e)| e > s)
        .collect();
    clipped.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut busy = 0.0;
    let mut cursor = from;
    for (s, e) in clipped {
        let s = s.max(cursor);
        if e > s {
            busy += e - s;
            cursor = e;
        }
    }
    busy
}

pub fn network_sample(log: &[BusyInterval], now: f64, window_seconds: f64) -> NetworkSample {
    assert!(window_seconds > 0.0, "utilization window must be positive");
    let start = now - window_seconds;
    let busy = busy_within(log, start, now);
    NetworkSample {
        window_start: start,
        window_end: now,
        busy_seconds: busy,
        utilization: (busy / window_seconds).clamp(0.0, 1.0),
    }
}

/// Fraction of the trailing window during which the link was busy.
pub fn network_utilization(log: &[BusyInterval], now: f64, window_seconds: f64) -> f64 {
    network_sample(log, now, window_seconds).utilization
}

pub fn is_idle(utilization: f64, threshold: f64) -> bool {
    utilization < threshold
}

/// Busy intervals of the simulated WAN link, pruned as they age out.
#[derive(Debug, Clone, Default)]
pub struct LinkBusyLog {
    intervals: Vec<BusyInterval>,
}

impl LinkBusyLog {
    pub fn push(&mut self, start: f64, end: f64) {
        if end <= start {
            return;
        }
        match self.intervals.last_mut() {
            Some(last) if start <= last.end => last.end = last.end.max(end),
            _ => self.intervals.push(BusyInterval { start, end }),
        }
    }

    /// Drops intervals that ended before `horizon`.
    pub fn prune(&mut self, horizon: f64) {
        let keep_from = self.intervals.partition_point(|b| b.end < horizon);
        self.intervals.drain(..keep_from);
    }

    pub fn intervals(&self) -> &[BusyInterval] {
        &self.intervals
    }

    pub fn utilization(&self, now: f64, window_seconds: f64) -> f64 {
        network_utilization(&self.intervals, now, window_seconds)
    }
}
