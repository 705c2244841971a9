//! Trace-driven discrete-event simulation of the gateway.
//!
//! The clock counts microseconds. Trace requests, transfer completions,
//! sensor ticks and day boundaries are processed in time order; at equal times
//! internal events run before trace requests. The WAN link carries one
//! transfer at a time. Demand fetches always start before queued prefetches,
//! but a prefetch already on the wire is never interrupted.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheError, CacheState, Origin};
use crate::domain::{
    date_of, day_start, validate_trace, EventKind, RepositoryIndex, StudyUid, Timestamp,
    TraceEvent, ValidationReport, SECONDS_PER_DAY,
};
use crate::mlp::MlpError;
use crate::patterns::{
    build_sessions, PatternConfig, PatternError, PatternRecognizer, TrainingLog,
};
use crate::prefetch::{
    long_term_prefetch, short_term_prefetch, train_scorer, update_counters, CandidateSource,
    CategoryCounters, ObservedQuery, PlanContext, PrefetchCandidate, PrefetchConfig, ScorerBook,
};
use crate::sensors::{LinkBusyLog, MessageLog, SensorConfig};

type Micros = i64;
const MICROS: f64 = 1e6;

fn to_micros(ts: Timestamp) -> Micros {
    ts * 1_000_000
}

fn to_secs(t: Micros) -> f64 {
    t as f64 / MICROS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkModel {
    pub wan_bandwidth_bytes_per_s: f64,
    /// Fixed cost of one WAN association.
    pub wan_rtt_s: f64,
    pub lan_bandwidth_bytes_per_s: f64,
    pub lan_overhead_s: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            wan_bandwidth_bytes_per_s: 12.5e6,
            wan_rtt_s: 0.2,
            lan_bandwidth_bytes_per_s: 125e6,
            lan_overhead_s: 0.01,
        }
    }
}

impl NetworkModel {
    /// Rejects non-positive parameters. Returns a warning when the LAN is not
    /// faster than the WAN.
    pub fn validate(&self) -> Result<Option<String>, String> {
        for (name, v) in [
            ("wan_bandwidth_bytes_per_s", self.wan_bandwidth_bytes_per_s),
            ("wan_rtt_s", self.wan_rtt_s),
            ("lan_bandwidth_bytes_per_s", self.lan_bandwidth_bytes_per_s),
            ("lan_overhead_s", self.lan_overhead_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("network.{name} must be positive, got {v}"));
            }
        }
        Ok(
            (self.lan_bandwidth_bytes_per_s <= self.wan_bandwidth_bytes_per_s)
                .then(|| "LAN bandwidth does not exceed WAN bandwidth".to_owned()),
        )
    }

    pub fn wan_seconds(&self, bytes: u64) -> f64 {
        self.wan_rtt_s + bytes as f64 / self.wan_bandwidth_bytes_per_s
    }

    pub fn lan_seconds(&self, bytes: u64) -> f64 {
        self.lan_overhead_s + bytes as f64 / self.lan_bandwidth_bytes_per_s
    }

    fn wan_micros(&self, bytes: u64) -> Micros {
        ((self.wan_seconds(bytes) * MICROS).ceil() as Micros).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub cache_capacity_bytes: u64,
    /// Configuration 2 when true, configuration 1 (LRU only) when false.
    pub prefetch_enabled: bool,
    /// Admit demand-fetched studies into the cache.
    pub passive_population: bool,
    /// Divide retrieval time by images instead of by requests.
    pub per_image_time: bool,
    pub seed: u64,
    pub network: NetworkModel,
    pub cache: CacheConfig,
    pub sensors: SensorConfig,
    pub prefetch: PrefetchConfig,
    pub patterns: PatternConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cache_capacity_bytes: 1 << 30,
            prefetch_enabled: true,
            passive_population: true,
            per_image_time: false,
            seed: 1,
            network: NetworkModel::default(),
            cache: CacheConfig::default(),
            sensors: SensorConfig::default(),
            prefetch: PrefetchConfig::default(),
            patterns: PatternConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("trace does not match the repository:\n{0}")]
    InvalidTrace(ValidationReport),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error(transparent)]
    Pattern(#[from] PatternError),
}

impl From<CacheError> for SimError {
    fn from(e: CacheError) -> Self {
        SimError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub date: NaiveDate,
    pub requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub hit_ratio: f64,
    pub retrieval_time_s: f64,
    pub bytes_prefetched: u64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub hit_ratio: f64,
    pub retrieval_time_per_image_s: f64,
    pub total_requests: u64,
    pub hits: u64,
    pub misses: u64,
    pub bytes_prefetched: u64,
    /// Share of prefetched studies that were later requested from the cache.
    pub prefetch_precision: f64,
    pub evictions: u64,
    pub per_day: Vec<DayStats>,
    /// Hit (true) or miss of every retrieve, in trace order.
    #[serde(skip)]
    pub hit_sequence: Vec<bool>,
}

/// Everything a run leaves behind besides the report.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    pub cache: CacheState,
    pub message_log: MessageLog,
    pub training_log: TrainingLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Internal {
    TransferDone,
    DayEnd,
    SensorTick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TransferKind {
    Demand,
    ShortTerm(String),
    LongTerm,
}

#[derive(Debug, Clone)]
struct Transfer {
    uid: StudyUid,
    size: u64,
    kind: TransferKind,
    /// Request ordinals waiting for this study.
    waiters: Vec<usize>,
}

#[derive(Debug, Default)]
struct Link {
    current: Option<Transfer>,
    demand: VecDeque<Transfer>,
    short_term: VecDeque<Transfer>,
    long_term: VecDeque<Transfer>,
    /// Every study queued or on the wire.
    pending: BTreeSet<StudyUid>,
    pending_prefetch_bytes: u64,
}

impl Link {
    fn take_queued_prefetch(&mut self, uid: &StudyUid) -> Option<Transfer> {
        for q in [&mut self.short_term, &mut self.long_term] {
            if let Some(pos) = q.iter().position(|t| &t.uid == uid) {
                let t = q.remove(pos).expect("position is valid");
                self.pending_prefetch_bytes -= t.size;
                return Some(t);
            }
        }
        None
    }

    fn enqueue_prefetch(&mut self, c: &PrefetchCandidate, kind: TransferKind) {
        if !self.pending.insert(c.study_uid.clone()) {
            return;
        }
        self.pending_prefetch_bytes += c.size_bytes;
        let t = Transfer {
            uid: c.study_uid.clone(),
            size: c.size_bytes,
            kind,
            waiters: Vec::new(),
        };
        match t.kind {
            TransferKind::LongTerm => self.long_term.push_back(t),
            _ => self.short_term.push_back(t),
        }
    }

    /// Drops the not-yet-started short-term items of one node.
    fn drop_short_term_of(&mut self, aetitle: &str) {
        let (drop, keep): (Vec<Transfer>, Vec<Transfer>) = self
            .short_term
            .drain(..)
            .partition(|t| matches!(&t.kind, TransferKind::ShortTerm(ae) if ae == aetitle));
        self.short_term = keep.into();
        for t in drop {
            self.pending.remove(&t.uid);
            self.pending_prefetch_bytes -= t.size;
        }
    }
}

struct Request {
    at: Micros,
    date: NaiveDate,
    size: u64,
    images: u32,
    hit: bool,
    done_at: Option<Micros>,
}

struct Gateway<'a> {
    cfg: &'a SimConfig,
    index: &'a RepositoryIndex,
    cache: CacheState,
    link: Link,
    busy: LinkBusyLog,
    heap: BinaryHeap<Reverse<(Micros, Internal, u64)>>,
    seq: u64,
    recognizer: Option<PatternRecognizer>,
    scorers: Option<ScorerBook>,
    counters: CategoryCounters,
    message_log: MessageLog,
    day_events: Vec<TraceEvent>,
    day_queries: Vec<ObservedQuery>,
    requests: Vec<Request>,
    prefetched: BTreeMap<StudyUid, bool>,
    bytes_prefetched: u64,
    prefetch_by_day: BTreeMap<NaiveDate, u64>,
    evictions_by_day: BTreeMap<NaiveDate, u64>,
    evictions: u64,
}

/// Seed of an independent stream derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<'a> Gateway<'a> {
    fn new(cfg: &'a SimConfig, index: &'a RepositoryIndex) -> Result<Self, SimError> {
        cfg.network.validate().map_err(SimError::Config)?;
        cfg.prefetch.validate().map_err(SimError::Config)?;
        let (recognizer, scorers) = if cfg.prefetch_enabled {
            (
                Some(PatternRecognizer::new(
                    cfg.patterns.clone(),
                    derive_seed(cfg.seed, 1),
                )?),
                Some(ScorerBook::new(
                    &cfg.prefetch.scorer,
                    derive_seed(cfg.seed, 2),
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            index,
            cache: CacheState::new(cfg.cache_capacity_bytes, &cfg.cache)?,
            link: Link::default(),
            busy: LinkBusyLog::default(),
            heap: BinaryHeap::new(),
            seq: 0,
            recognizer,
            scorers,
            counters: CategoryCounters::default(),
            message_log: MessageLog::default(),
            day_events: Vec::new(),
            day_queries: Vec::new(),
            requests: Vec::new(),
            prefetched: BTreeMap::new(),
            bytes_prefetched: 0,
            prefetch_by_day: BTreeMap::new(),
            evictions_by_day: BTreeMap::new(),
            evictions: 0,
        })
    }

    fn schedule(&mut self, at: Micros, ev: Internal) {
        self.seq += 1;
        self.heap.push(Reverse((at, ev, self.seq)));
    }

    fn note_evictions(&mut self, now: Micros, n: usize) {
        if n > 0 {
            self.evictions += n as u64;
            *self
                .evictions_by_day
                .entry(date_of(now / 1_000_000))
                .or_insert(0) += n as u64;
        }
    }

    fn start_next_transfer(&mut self, now: Micros) {
        if self.link.current.is_some() {
            return;
        }
        loop {
            let next = if let Some(t) = self.link.demand.pop_front() {
                t
            } else if let Some(t) = self
                .link
                .short_term
                .pop_front()
                .or_else(|| self.link.long_term.pop_front())
            {
                self.link.pending_prefetch_bytes -= t.size;
                if self.cache.contains(&t.uid) {
                    self.link.pending.remove(&t.uid);
                    continue;
                }
                // Still counted against the long-term budget while on the wire.
                self.link.pending_prefetch_bytes += t.size;
                t
            } else {
                return;
            };
            let end = now + self.cfg.network.wan_micros(next.size);
            self.busy.push(to_secs(now), to_secs(end));
            self.link.current = Some(next);
            self.schedule(end, Internal::TransferDone);
            return;
        }
    }

    fn finish_transfer(&mut self, now: Micros) {
        let t = self.link.current.take().expect("a transfer is on the wire");
        self.link.pending.remove(&t.uid);
        let ts = now / 1_000_000;
        match &t.kind {
            TransferKind::Demand => {
                if self.cfg.passive_population {
                    if let Ok(evicted) = self.cache.admit_sized(&t.uid, t.size, ts, Origin::Passive)
                    {
                        self.note_evictions(now, evicted.len());
                    }
                }
            }
            kind => {
                self.link.pending_prefetch_bytes -= t.size;
                let origin = if *kind == TransferKind::LongTerm {
                    Origin::LongTermPrefetch
                } else {
                    Origin::ShortTermPrefetch
                };
                self.bytes_prefetched += t.size;
                *self.prefetch_by_day.entry(date_of(ts)).or_insert(0) += t.size;
                if let Ok(evicted) = self.cache.admit_sized(&t.uid, t.size, ts, origin) {
                    self.note_evictions(now, evicted.len());
                    self.prefetched.insert(t.uid.clone(), false);
                }
            }
        }
        for w in t.waiters {
            self.requests[w].done_at = Some(now);
        }
        self.start_next_transfer(now);
    }

    fn on_retrieve(&mut self, ev: &TraceEvent, now: Micros) {
        let uid = ev.study_uid.as_ref().expect("validated retrieve");
        let study = self.index.get(uid).expect("validated uid");
        let ordinal = self.requests.len();
        let hit = self.cache.touch(uid, ev.timestamp).is_ok();
        self.requests.push(Request {
            at: now,
            date: date_of(ev.timestamp),
            size: study.size_bytes,
            images: study.num_images,
            hit,
            done_at: hit.then_some(now),
        });
        if hit {
            if let Some(used) = self.prefetched.get_mut(uid) {
                *used = true;
            }
        } else if let Some(cur) = self.link.current.as_mut().filter(|t| &t.uid == uid) {
            cur.waiters.push(ordinal);
        } else if let Some(t) = self.link.demand.iter_mut().find(|t| &t.uid == uid) {
            t.waiters.push(ordinal);
        } else {
            let mut t = self
                .link
                .take_queued_prefetch(uid)
                .unwrap_or_else(|| Transfer {
                    uid: uid.clone(),
                    size: study.size_bytes,
                    kind: TransferKind::Demand,
                    waiters: Vec::new(),
                });
            self.link.pending.insert(uid.clone());
            t.kind = TransferKind::Demand;
            t.waiters.push(ordinal);
            self.link.demand.push_back(t);
            self.start_next_transfer(now);
        }
        if self.cfg.prefetch_enabled {
            update_counters(&mut self.counters, study, ev.timestamp);
        }
    }

    fn on_query(&mut self, ev: &TraceEvent, now: Micros) -> Result<(), SimError> {
        let q = ev.query.as_ref().expect("validated query");
        let results: Vec<StudyUid> = self
            .index
            .query(q, date_of(ev.timestamp))
            .into_iter()
            .map(|s| s.study_uid.clone())
            .collect();
        if let (Some(rec), Some(scorers)) = (&self.recognizer, &self.scorers) {
            let (predicted, _) = rec.classify_query(ev)?;
            let ctx = PlanContext {
                index: self.index,
                cache: &self.cache,
                in_flight: &self.link.pending,
                now: ev.timestamp,
            };
            let plan = short_term_prefetch(
                &results,
                predicted,
                &ev.aetitle,
                ctx,
                scorers,
                &self.cfg.prefetch,
            );
            self.link.drop_short_term_of(&ev.aetitle);
            for c in &plan {
                debug_assert_ne!(c.source, CandidateSource::LongTerm);
                self.link
                    .enqueue_prefetch(c, TransferKind::ShortTerm(ev.aetitle.clone()));
            }
            self.start_next_transfer(now);
            self.day_queries.push(ObservedQuery {
                aetitle: ev.aetitle.clone(),
                timestamp: ev.timestamp,
                results: results.clone(),
                pattern: None,
            });
        }
        self.message_log.record(ev, Some(results));
        Ok(())
    }

    fn on_tick(&mut self, now: Micros) {
        let window = self.cfg.sensors.utilization_window_s;
        let now_s = to_secs(now);
        self.busy.prune(now_s - window);
        let Some(scorers) = &self.scorers else { return };
        let ctx = PlanContext {
            index: self.index,
            cache: &self.cache,
            in_flight: &self.link.pending,
            now: now / 1_000_000,
        };
        let plan = long_term_prefetch(
            &self.counters,
            ctx,
            self.busy.utilization(now_s, window),
            self.cfg.sensors.idle_threshold,
            self.link.pending_prefetch_bytes,
            scorers,
            &self.cfg.prefetch,
        );
        for c in &plan {
            self.link.enqueue_prefetch(c, TransferKind::LongTerm);
        }
        self.start_next_transfer(now);
    }

    fn on_day_end(&mut self, now: Micros) -> Result<(), SimError> {
        let events = std::mem::take(&mut self.day_events);
        let mut queries = std::mem::take(&mut self.day_queries);
        let (Some(rec), Some(scorers)) = (&mut self.recognizer, &mut self.scorers) else {
            return Ok(());
        };
        let sessions = build_sessions(&events, rec.config().window_seconds);
        let labels = rec.end_of_day(&sessions, self.index)?;
        for (q, label) in queries.iter_mut().zip(labels) {
            q.pattern = Some(label);
        }
        let retrieves: Vec<TraceEvent> = events
            .into_iter()
            .filter(|e| e.kind == EventKind::Retrieve)
            .collect();
        train_scorer(
            scorers,
            &queries,
            &retrieves,
            self.index,
            &self.cfg.prefetch.scorer,
        )?;
        self.counters
            .decay(now / 1_000_000, self.cfg.prefetch.counter_halving_days);
        Ok(())
    }

    fn run(mut self, events: &[TraceEvent]) -> Result<SimOutcome, SimError> {
        let (Some(first), Some(last)) = (events.first(), events.last()) else {
            return Ok(self.finish());
        };
        let last_at = to_micros(last.timestamp);
        self.schedule(
            to_micros(day_start(date_of(first.timestamp)) + SECONDS_PER_DAY),
            Internal::DayEnd,
        );
        let tick = (self.cfg.sensors.utilization_window_s * MICROS).round() as Micros;
        if self.cfg.prefetch_enabled && tick > 0 {
            let t0 = to_micros(first.timestamp);
            self.schedule(t0 + tick - t0.rem_euclid(tick), Internal::SensorTick);
        }

        let mut next = 0;
        loop {
            let trace_at = events.get(next).map(|e| to_micros(e.timestamp));
            let internal = self.heap.peek().map(|Reverse((t, ..))| *t);
            let take_internal = match (internal, trace_at) {
                (Some(i), Some(t)) => i <= t,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            if take_internal {
                let Reverse((now, ev, _)) = self.heap.pop().expect("peeked");
                match ev {
                    Internal::TransferDone => self.finish_transfer(now),
                    Internal::DayEnd => {
                        self.on_day_end(now)?;
                        if now <= last_at {
                            self.schedule(now + to_micros(SECONDS_PER_DAY), Internal::DayEnd);
                        }
                    }
                    Internal::SensorTick => {
                        self.on_tick(now);
                        if now <= last_at {
                            self.schedule(now + tick, Internal::SensorTick);
                        }
                    }
                }
            } else {
                let ev = &events[next];
                next += 1;
                let now = to_micros(ev.timestamp);
                match ev.kind {
                    EventKind::Query => self.on_query(ev, now)?,
                    EventKind::Retrieve => {
                        self.on_retrieve(ev, now);
                        self.message_log.record(ev, None);
                    }
                }
                if self.cfg.prefetch_enabled {
                    self.day_events.push(ev.clone());
                }
            }
        }
        Ok(self.finish())
    }

    fn finish(self) -> SimOutcome {
        let net = &self.cfg.network;
        let mut per_day: BTreeMap<NaiveDate, (DayStats, u64)> = BTreeMap::new();
        let (mut time_total, mut images_total, mut hits) = (0.0, 0u64, 0u64);
        let mut hit_sequence = Vec::with_capacity(self.requests.len());
        for r in &self.requests {
            let done = r
                .done_at
                .expect("every transfer completes before the run ends");
            let t = to_secs(done - r.at) + net.lan_seconds(r.size);
            time_total += t;
            images_total += r.images as u64;
            hits += r.hit as u64;
            hit_sequence.push(r.hit);
            let (day, imgs) = per_day.entry(r.date).or_insert_with(|| {
                (
                    DayStats {
                        date: r.date,
                        ..Default::default()
                    },
                    0,
                )
            });
            day.requests += 1;
            day.hits += r.hit as u64;
            day.retrieval_time_s += t;
            *imgs += r.images as u64;
        }
        let per_image = self.cfg.per_image_time;
        let per_day = per_day
            .into_values()
            .map(|(mut d, imgs)| {
                d.misses = d.requests - d.hits;
                d.hit_ratio = d.hits as f64 / d.requests as f64;
                let denom = if per_image { imgs.max(1) } else { d.requests };
                d.retrieval_time_s /= denom as f64;
                d.bytes_prefetched = self.prefetch_by_day.get(&d.date).copied().unwrap_or(0);
                d.evictions = self.evictions_by_day.get(&d.date).copied().unwrap_or(0);
                d
            })
            .collect();
        let total = self.requests.len() as u64;
        let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
        let used = self.prefetched.values().filter(|u| **u).count();
        let report = SimReport {
            hit_ratio: ratio(hits as f64, total),
            retrieval_time_per_image_s: ratio(
                time_total,
                if per_image { images_total } else { total },
            ),
            total_requests: total,
            hits,
            misses: total - hits,
            bytes_prefetched: self.bytes_prefetched,
            prefetch_precision: ratio(used as f64, self.prefetched.len() as u64),
            evictions: self.evictions,
            per_day,
            hit_sequence,
        };
        SimOutcome {
            report,
            cache: self.cache,
            message_log: self.message_log,
            training_log: self.recognizer.map(|r| r.log).unwrap_or_default(),
        }
    }
}

/// Replays `trace` through a gateway built from `cfg`, keeping all artifacts.
pub fn simulate(
    trace: &[TraceEvent],
    index: &RepositoryIndex,
    cfg: &SimConfig,
) -> Result<SimOutcome, SimError> {
    let report = validate_trace(trace, index);
    if !report.is_empty() {
        return Err(SimError::InvalidTrace(report));
    }
    Gateway::new(cfg, index)?.run(trace)
}

pub fn run_simulation(
    trace: &[TraceEvent],
    index: &RepositoryIndex,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    simulate(trace, index, cfg).map(|o| o.report)
}

/// One simulation of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub cache_fraction: f64,
    /// 1 for LRU only, 2 with prefetching.
    pub config: u8,
    pub repetition: u32,
    pub hit_ratio: f64,
    pub retrieval_time_per_image_s: f64,
    pub bytes_prefetched: u64,
    pub prefetch_precision: f64,
    pub evictions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub stddev: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                stddev: 0.0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stddev = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub cache_fraction: f64,
    pub config: u8,
    pub n: usize,
    pub hit_ratio: MeanStd,
    pub retrieval_time_per_image_s: MeanStd,
    pub bytes_prefetched: MeanStd,
    pub prefetch_precision: MeanStd,
    pub evictions: MeanStd,
}

/// Groups rows by (cache fraction, config), in order of first appearance.
pub fn summarize(rows: &[ExperimentRow]) -> Vec<SummaryCell> {
    let mut keys: Vec<(f64, u8)> = Vec::new();
    for r in rows {
        if !keys
            .iter()
            .any(|k| k.0 == r.cache_fraction && k.1 == r.config)
        {
            keys.push((r.cache_fraction, r.config));
        }
    }
    keys.into_iter()
        .map(|(f, c)| {
            let cell: Vec<&ExperimentRow> = rows
                .iter()
                .filter(|r| r.cache_fraction == f && r.config == c)
                .collect();
            let col = |g: fn(&ExperimentRow) -> f64| {
                MeanStd::of(&cell.iter().map(|r| g(r)).collect::<Vec<_>>())
            };
            SummaryCell {
                cache_fraction: f,
                config: c,
                n: cell.len(),
                hit_ratio: col(|r| r.hit_ratio),
                retrieval_time_per_image_s: col(|r| r.retrieval_time_per_image_s),
                bytes_prefetched: col(|r| r.bytes_prefetched as f64),
                prefetch_precision: col(|r| r.prefetch_precision),
                evictions: col(|r| r.evictions as f64),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub repository_bytes: u64,
    pub rows: Vec<ExperimentRow>,
    pub summary: Vec<SummaryCell>,
}

impl ExperimentReport {
    pub fn cell(&self, cache_fraction: f64, config: u8) -> Option<&SummaryCell> {
        self.summary
            .iter()
            .find(|c| c.cache_fraction == cache_fraction && c.config == config)
    }
}

/// Sweeps cache fractions × {configuration 1, configuration 2} × repetitions.
/// Repetition `r` runs with a seed derived from `base.seed` and `r`, the same
/// for both configurations. Runs execute in parallel; rows come out in sweep
/// order.
pub fn run_experiment(
    trace: &[TraceEvent],
    index: &RepositoryIndex,
    cache_fractions: &[f64],
    repetitions: u32,
    base: &SimConfig,
) -> Result<ExperimentReport, SimError> {
    if let Some(f) = cache_fractions
        .iter()
        .find(|f| !(f.is_finite() && **f >= 0.0))
    {
        return Err(SimError::Config(format!(
            "cache fraction {f} is not a non-negative number"
        )));
    }
    let report = validate_trace(trace, index);
    if !report.is_empty() {
        return Err(SimError::InvalidTrace(report));
    }
    let total = index.total_bytes();
    let configs: &[u8] = if base.prefetch_enabled { &[1, 2] } else { &[1] };
    let jobs: Vec<(f64, u8, u32)> = cache_fractions
        .iter()
        .flat_map(|&f| {
            configs
                .iter()
                .flat_map(move |&c| (0..repetitions).map(move |r| (f, c, r)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(fraction, config, rep)| {
            let cfg = SimConfig {
                cache_capacity_bytes: (fraction * total as f64).round() as u64,
                prefetch_enabled: config == 2,
                seed: derive_seed(base.seed, rep as u64),
                ..base.clone()
            };
            let r = Gateway::new(&cfg, index)?.run(trace)?.report;
            Ok(ExperimentRow {
                cache_fraction: fraction,
                config,
                repetition: rep,
                hit_ratio: r.hit_ratio,
                retrieval_time_per_image_s: r.retrieval_time_per_image_s,
                bytes_prefetched: r.bytes_prefetched,
                prefetch_precision: r.prefetch_precision,
                evictions: r.evictions,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let summary = summarize(&rows);
    Ok(ExperimentReport {
        repository_bytes: total,
        rows,
        summary,
    })
}
