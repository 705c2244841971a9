//! Capacity-bounded study cache: the metadata index kept by the cache manager
//! and the LRU-weight eviction agent.
//!
//! Times are opaque simulation clock ticks (the simulator uses microseconds).
//! Only metadata is stored; sizes are accounted exactly.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{StudyRecord, StudyUid};

pub type Time = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Passive,
    ShortTermPrefetch,
    LongTermPrefetch,
}

impl Origin {
    pub fn is_prefetch(self) -> bool {
        !matches!(self, Origin::Passive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub study_uid: StudyUid,
    pub size_bytes: u64,
    pub inserted_at: Time,
    pub last_access_at: Time,
    pub origin: Origin,
    pub hits: u32,
    /// Global access order; breaks ties between equal `last_access_at`.
    #[serde(skip)]
    access_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub high_watermark: f64,
    pub low_watermark: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            high_watermark: 0.95,
            low_watermark: 0.85,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        let ok = self.high_watermark > 0.0
            && self.high_watermark <= 1.0
            && self.low_watermark >= 0.0
            && self.low_watermark < self.high_watermark;
        if ok {
            Ok(())
        } else {
            Err(CacheError::InvalidWatermarks {
                high: self.high_watermark,
                low: self.low_watermark,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("study {uid} ({size} bytes) exceeds cache capacity {capacity}")]
    AdmissionRejected {
        uid: StudyUid,
        size: u64,
        capacity: u64,
    },
    #[error("access time {access} outside [{oldest}, {newest}]")]
    OutOfRange {
        access: Time,
        oldest: Time,
        newest: Time,
    },
    #[error("watermarks must satisfy 0 <= low < high <= 1 (high {high}, low {low})")]
    InvalidWatermarks { high: f64, low: f64 },
}

/// Returned by [`CacheState::touch`] when the study is not cached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MissSignal;

/// Weight in [0, 100]: 100 for the most recently used entry, 0 for the least,
/// linear in between. A degenerate span (one entry, or all accessed in the same
/// tick) weighs 100.
pub fn lru_weight(
    entry: &CacheEntry,
    oldest_access: Time,
    newest_access: Time,
) -> Result<f64, CacheError> {
    let access = entry.last_access_at;
    if access < oldest_access || access > newest_access {
        return Err(CacheError::OutOfRange {
            access,
            oldest: oldest_access,
            newest: newest_access,
        });
    }
    if newest_access == oldest_access {
        return Ok(100.0);
    }
    Ok(100.0 * (access - oldest_access) as f64 / (newest_access - oldest_access) as f64)
}

#[derive(Debug, Clone)]
pub struct CacheState {
    capacity_bytes: u64,
    used_bytes: u64,
    entries: BTreeMap<StudyUid, CacheEntry>,
    high_watermark: f64,
    low_watermark: f64,
    next_seq: u64,
}

impl CacheState {
    pub fn new(capacity_bytes: u64, config: &CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(Self {
            capacity_bytes,
            used_bytes: 0,
            entries: BTreeMap::new(),
            high_watermark: config.high_watermark,
            low_watermark: config.low_watermark,
            next_seq: 0,
        })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn free_space(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }

    pub fn contains(&self, uid: &StudyUid) -> bool {
        self.entries.contains_key(uid)
    }

    pub fn get(&self, uid: &StudyUid) -> Option<&CacheEntry> {
        self.entries.get(uid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in uid order.
    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    fn access_span(&self) -> Option<(Time, Time)> {
        let mut it = self.entries.values().map(|e| e.last_access_at);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), t| (lo.min(t), hi.max(t))))
    }

    /// Current weight of a cached entry.
    pub fn weight_of(&self, uid: &StudyUid) -> Option<f64> {
        let entry = self.entries.get(uid)?;
        let (oldest, newest) = self.access_span()?;
        lru_weight(entry, oldest, newest).ok()
    }

    /// Uids in the order the eviction agent would discard them.
    pub fn eviction_order(&self) -> Vec<StudyUid> {
        let Some((oldest, newest)) = self.access_span() else {
            return Vec::new();
        };
        let mut ranked: Vec<(f64, u64, &StudyUid)> = self
            .entries
            .values()
            .map(|e| {
                let w = lru_weight(e, oldest, newest).expect("span covers every entry");
                (w, e.access_seq, &e.study_uid)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().map(|(_, _, u)| u.clone()).collect()
    }

    fn bump_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Inserts a study. If the resulting occupancy would pass the high
    /// watermark, entries are evicted lowest weight first until it is at or
    /// below the low watermark (or nothing else is left). The admitted study
    /// is never its own victim. Admitting a cached study only refreshes it.
    pub fn admit(
        &mut self,
        study: &StudyRecord,
        now: Time,
        origin: Origin,
    ) -> Result<Vec<StudyUid>, CacheError> {
        self.admit_sized(&study.study_uid, study.size_bytes, now, origin)
    }

    pub fn admit_sized(
        &mut self,
        uid: &StudyUid,
        size_bytes: u64,
        now: Time,
        origin: Origin,
    ) -> Result<Vec<StudyUid>, CacheError> {
        if size_bytes > self.capacity_bytes {
            return Err(CacheError::AdmissionRejected {
                uid: uid.clone(),
                size: size_bytes,
                capacity: self.capacity_bytes,
            });
        }
        if self.contains(uid) {
            let _ = self.touch(uid, now);
            return Ok(Vec::new());
        }

        let cap = self.capacity_bytes as f64;
        let mut evicted = Vec::new();
        if (self.used_bytes + size_bytes) as f64 > self.high_watermark * cap {
            let target = self.low_watermark * cap;
            for victim in self.eviction_order() {
                if (self.used_bytes + size_bytes) as f64 <= target {
                    break;
                }
                let e = self.entries.remove(&victim).expect("victim is cached");
                self.used_bytes -= e.size_bytes;
                evicted.push(victim);
            }
        }

        let seq = self.bump_seq();
        self.entries.insert(
            uid.clone(),
            CacheEntry {
                study_uid: uid.clone(),
                size_bytes,
                inserted_at: now,
                last_access_at: now,
                origin,
                hits: 0,
                access_seq: seq,
            },
        );
        self.used_bytes += size_bytes;
        debug_assert!(self.used_bytes <= self.capacity_bytes);
        Ok(evicted)
    }

    /// Marks a demand access.
    pub fn touch(&mut self, uid: &StudyUid, now: Time) -> Result<(), MissSignal> {
        let seq = self.next_seq;
        let entry = self.entries.get_mut(uid).ok_or(MissSignal)?;
        entry.last_access_at = now.max(entry.inserted_at);
        entry.hits += 1;
        entry.access_seq = seq;
        self.next_seq += 1;
        Ok(())
    }

    /// Recomputes the metadata totals and checks every invariant.
    pub fn is_consistent(&self) -> bool {
        let sum: u64 = self.entries.values().map(|e| e.size_bytes).sum();
        sum == self.used_bytes
            && self.used_bytes <= self.capacity_bytes
            && self
                .entries
                .iter()
                .all(|(k, e)| *k == e.study_uid && e.last_access_at >= e.inserted_at)
    }

    /// Writes one JSON object per entry, in uid order.
    pub fn dump_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in self.entries.values() {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
