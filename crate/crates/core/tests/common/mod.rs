//! Independent reference models used as test oracles.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::NaiveDate;
use medgate::cache::{CacheConfig, CacheState, Origin};
use medgate::domain::{
    day_start, BodyPart, Modality, PatientId, QuerySpec, RepositoryIndex, Sex, StudyRecord,
    StudyUid, TraceEvent, UsagePattern,
};
use medgate::prefetch::{update_counters, CategoryCounters, PlanContext, PrefetchCandidate};
use medgate::sim::NetworkModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain recency list: front is least recently used.
pub struct ReferenceLru {
    pub capacity: u64,
    pub high: f64,
    pub low: f64,
    pub order: VecDeque<(StudyUid, u64)>,
    pub used: u64,
}

impl ReferenceLru {
    pub fn new(capacity: u64) -> Self {
        Self {
            capacity,
            high: 0.95,
            low: 0.85,
            order: VecDeque::new(),
            used: 0,
        }
    }

    pub fn contains(&self, uid: &StudyUid) -> bool {
        self.order.iter().any(|(u, _)| u == uid)
    }

    pub fn touch(&mut self, uid: &StudyUid) -> bool {
        match self.order.iter().position(|(u, _)| u == uid) {
            Some(i) => {
                let e = self.order.remove(i).unwrap();
                self.order.push_back(e);
                true
            }
            None => false,
        }
    }

    /// Returns evicted uids, or `None` when the study can never fit.
    pub fn admit(&mut self, uid: &StudyUid, size: u64) -> Option<Vec<StudyUid>> {
        if size > self.capacity {
            return None;
        }
        if self.touch(uid) {
            return Some(Vec::new());
        }
        let mut evicted = Vec::new();
        if (self.used + size) as f64 > self.high * self.capacity as f64 {
            while (self.used + size) as f64 > self.low * self.capacity as f64 {
                let Some((u, s)) = self.order.pop_front() else {
                    break;
                };
                self.used -= s;
                evicted.push(u);
            }
        }
        self.order.push_back((uid.clone(), size));
        self.used += size;
        Some(evicted)
    }

    pub fn victim(&self) -> Option<&StudyUid> {
        self.order.front().map(|(u, _)| u)
    }
}

/// Replays retrieves through a single FIFO WAN link and a reference LRU,
/// returning the hit/miss sequence. Queries are ignored.
pub fn reference_replay(
    trace: &[TraceEvent],
    index: &RepositoryIndex,
    capacity: u64,
    net: &NetworkModel,
) -> Vec<bool> {
    let mut lru = ReferenceLru::new(capacity);
    let mut link_free_at: i64 = i64::MIN;
    // (completion time in µs, order) -> (uid, size)
    let mut pending: BTreeMap<(i64, usize), (StudyUid, u64)> = BTreeMap::new();
    let mut pending_uids: BTreeSet<StudyUid> = BTreeSet::new();
    let mut hits = Vec::new();
    for (n, ev) in trace.iter().enumerate() {
        let now = ev.timestamp * 1_000_000;
        while let Some((&(done, _), _)) = pending.iter().next() {
            if done > now {
                break;
            }
            let (uid, size) = pending
                .remove(&pending.keys().next().copied().unwrap())
                .unwrap();
            pending_uids.remove(&uid);
            let _ = lru.admit(&uid, size);
        }
        let Some(uid) = &ev.study_uid else { continue };
        if lru.touch(uid) {
            hits.push(true);
            continue;
        }
        hits.push(false);
        if pending_uids.contains(uid) {
            continue;
        }
        let size = index.get(uid).unwrap().size_bytes;
        let secs = net.wan_rtt_s + size as f64 / net.wan_bandwidth_bytes_per_s;
        let dur = ((secs * 1e6).ceil() as i64).max(1);
        let start = now.max(link_free_at);
        link_free_at = start + dur;
        pending.insert((link_free_at, n), (uid.clone(), size));
        pending_uids.insert(uid.clone());
    }
    hits
}

/// Brute-force labeller written from the class definitions.
pub fn oracle_label(studies: &[&StudyRecord]) -> UsagePattern {
    if studies.is_empty() {
        return UsagePattern::InconsequentQuery;
    }
    let patients: BTreeSet<&PatientId> = studies.iter().map(|s| &s.patient_id).collect();
    let modalities: BTreeSet<&Modality> = studies.iter().map(|s| &s.modality).collect();
    let single_patient = patients.len() == 1;
    let one_modality_many_patients =
        studies.len() >= 2 && modalities.len() == 1 && patients.len() >= 2;
    match (single_patient, one_modality_many_patients) {
        (true, false) => UsagePattern::PatientRevising,
        (false, true) => UsagePattern::ModalityRevising,
        (false, false) => UsagePattern::Other,
        (true, true) => unreachable!("classes overlap"),
    }
}

pub fn record(
    uid: &str,
    patient: &str,
    modality: Modality,
    date: NaiveDate,
    size: u64,
) -> StudyRecord {
    StudyRecord {
        study_uid: uid.into(),
        patient_id: patient.into(),
        patient_sex: Sex::F,
        patient_birth_date: NaiveDate::from_ymd_opt(1960, 3, 3).unwrap(),
        modality,
        body_part: BodyPart::Chest,
        institution: "INST1".into(),
        study_date: date,
        size_bytes: size,
        num_images: 10,
    }
}

pub fn base_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).unwrap()
}

/// Random repository of `n_studies` and a trace of `n_events` requests, with
/// gaps short enough that transfers overlap.
pub fn random_trace(
    seed: u64,
    n_studies: usize,
    n_events: usize,
) -> (RepositoryIndex, Vec<TraceEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modalities = [Modality::Ct, Modality::Mr, Modality::Cr];
    let studies: Vec<StudyRecord> = (0..n_studies)
        .map(|i| {
            record(
                &format!("S{i:03}"),
                &format!("P{}", rng.random_range(0..5)),
                modalities[rng.random_range(0..3)].clone(),
                base_date(),
                rng.random_range(1_000_000..60_000_000),
            )
        })
        .collect();
    let index = RepositoryIndex::from_records(studies).unwrap();
    let mut t = day_start(base_date()) + 86_400 * 30;
    let mut events = Vec::with_capacity(n_events);
    for q in 0..n_events {
        t += rng.random_range(0..120);
        let ae = format!("WS{}", rng.random_range(1..=3));
        if rng.random_bool(0.15) {
            let p = format!("P{}", rng.random_range(0..5));
            events.push(TraceEvent::query(
                t,
                ae,
                Some(q as u64),
                QuerySpec::by_patient(p.as_str().into()),
            ));
        } else {
            // Skewed popularity so the cache sees reuse.
            let hot = rng.random_bool(0.7);
            let i = if hot {
                rng.random_range(0..n_studies.min(8))
            } else {
                rng.random_range(0..n_studies)
            };
            events.push(TraceEvent::retrieve(
                t,
                ae,
                format!("S{i:03}").as_str().into(),
                None,
            ));
        }
    }
    (index, events)
}

/// Repository, cache, link and counters in a random but consistent state.
#[derive(Debug)]
pub struct World {
    pub index: RepositoryIndex,
    pub cache: CacheState,
    pub in_flight: BTreeSet<StudyUid>,
    pub counters: CategoryCounters,
    pub now: i64,
}

pub fn arb_world() -> impl Strategy<Value = World> {
    (
        prop::collection::vec((0u8..6, 0u8..3, 0i64..800, 1u64..50), 1..60),
        prop::collection::vec(any::<prop::sample::Index>(), 0..20),
        prop::collection::vec(any::<prop::sample::Index>(), 0..5),
        prop::collection::vec(any::<prop::sample::Index>(), 0..40),
        100u64..2000,
    )
        .prop_map(|(studies, cached, flying, requested, capacity)| {
            let today = base_date() + chrono::Duration::days(900);
            let now = day_start(today) + 10 * 3600;
            let mods = [Modality::Ct, Modality::Mr, Modality::Us];
            let records: Vec<_> = studies
                .iter()
                .enumerate()
                .map(|(i, (p, m, age, size))| {
                    record(
                        &format!("S{i:02}"),
                        &format!("P{p}"),
                        mods[*m as usize].clone(),
                        today - chrono::Duration::days(*age),
                        *size,
                    )
                })
                .collect();
            let index = RepositoryIndex::from_records(records.clone()).unwrap();
            let mut cache = CacheState::new(capacity, &CacheConfig::default()).unwrap();
            for c in cached {
                let r = c.get(&records);
                let _ = cache.admit_sized(&r.study_uid, r.size_bytes, now - 100, Origin::Passive);
            }
            let in_flight = flying
                .iter()
                .map(|i| i.get(&records).study_uid.clone())
                .collect();
            let mut counters = CategoryCounters::default();
            for r in requested {
                update_counters(&mut counters, r.get(&records), now);
            }
            World {
                index,
                cache,
                in_flight,
                counters,
                now,
            }
        })
}

pub fn ctx(w: &World) -> PlanContext<'_> {
    PlanContext {
        index: &w.index,
        cache: &w.cache,
        in_flight: &w.in_flight,
        now: w.now,
    }
}

/// Ordering, uniqueness and exclusion rules every candidate list obeys.
pub fn check_list(w: &World, list: &[PrefetchCandidate]) -> Result<(), TestCaseError> {
    for pair in list.windows(2) {
        prop_assert!(
            pair[0].score > pair[1].score
                || (pair[0].score == pair[1].score && pair[0].study_uid < pair[1].study_uid),
            "not sorted: {:?}",
            pair
        );
    }
    let uids: BTreeSet<_> = list.iter().map(|c| &c.study_uid).collect();
    prop_assert_eq!(uids.len(), list.len());
    for c in list {
        prop_assert!(!w.cache.contains(&c.study_uid));
        prop_assert!(!w.in_flight.contains(&c.study_uid));
        prop_assert!(c.score > 0.0 && c.score < 1.0);
    }
    Ok(())
}
