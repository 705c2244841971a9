//! Prefetching agent.
//!
//! Long-term prefetching keeps per-(modality, age band) request counters and,
//! while the WAN link is idle, pulls studies from the most requested cells into
//! free cache space. Short-term prefetching reacts to each query: the query's
//! own results and the results of a secondary query derived from the predicted
//! usage pattern are ranked by the requesting node's scorer.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::cache::CacheState;
use crate::domain::{
    date_of, BodyPart, DateRange, Modality, PatientId, QuerySpec, RepositoryIndex, Sex,
    StudyRecord, StudyUid, Timestamp, TraceEvent, UsagePattern, SECONDS_PER_DAY,
};
use crate::mlp::{MlpConfig, MlpError, MlpModel, OutputMode, Sample};

const INSTITUTION_BUCKETS: usize = 8;
const AGE_SCALE_DAYS: f64 = 3650.0;

pub const SCORER_FEATURE_DIM: usize =
    1 + (BodyPart::KNOWN.len() + 1) + (Modality::KNOWN.len() + 1) + 3 + 1 + 4 + INSTITUTION_BUCKETS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrefetchConfig {
    /// Candidates scoring below this are dropped.
    pub score_floor: f64,
    /// Share of free cache space a long-term round may fill.
    pub fill_fraction: f64,
    /// Counter cells considered per long-term round.
    pub top_k: usize,
    /// Byte budget of one short-term round, as a share of cache capacity.
    pub short_term_budget_fraction: f64,
    /// Counters are halved once per period.
    pub counter_halving_days: i64,
    /// Date window of the secondary query for modality revising.
    pub secondary_window_days: i64,
    /// Hyperparameters of the per-node scorers.
    pub scorer: MlpConfig,
}

impl Default for PrefetchConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.5,
            fill_fraction: 0.5,
            top_k: 2,
            short_term_budget_fraction: 0.5,
            counter_halving_days: 30,
            secondary_window_days: 31,
            scorer: MlpConfig::default(),
        }
    }
}

impl PrefetchConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("score_floor", self.score_floor)?;
        unit("fill_fraction", self.fill_fraction)?;
        unit(
            "short_term_budget_fraction",
            self.short_term_budget_fraction,
        )?;
        if self.counter_halving_days <= 0 {
            return Err("counter_halving_days must be positive".into());
        }
        if self.secondary_window_days < 0 {
            return Err("secondary_window_days must not be negative".into());
        }
        Ok(())
    }
}

/// Age of a study relative to the time it is requested. The bands are
/// disjoint: a study is in exactly one of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeBucket {
    LastDay,
    LastWeek,
    LastMonth,
    LastYear,
    Older,
}

impl AgeBucket {
    pub const PREFETCHABLE: [AgeBucket; 4] = [
        AgeBucket::LastDay,
        AgeBucket::LastWeek,
        AgeBucket::LastMonth,
        AgeBucket::LastYear,
    ];

    pub fn from_age_days(days: i64) -> Self {
        match days {
            ..=1 => AgeBucket::LastDay,
            2..=7 => AgeBucket::LastWeek,
            8..=31 => AgeBucket::LastMonth,
            32..=366 => AgeBucket::LastYear,
            _ => AgeBucket::Older,
        }
    }

    pub fn of(study_date: NaiveDate, now: Timestamp) -> Self {
        Self::from_age_days((date_of(now) - study_date).num_days())
    }

    /// Study dates that fall in this band on `today`; `None` for `Older`.
    pub fn date_range(self, today: NaiveDate) -> Option<DateRange> {
        let (youngest, oldest) = match self {
            AgeBucket::LastDay => (0, 1),
            AgeBucket::LastWeek => (2, 7),
            AgeBucket::LastMonth => (8, 31),
            AgeBucket::LastYear => (32, 366),
            AgeBucket::Older => return None,
        };
        let days = chrono::Duration::days;
        Some(DateRange(today - days(oldest), today - days(youngest)))
    }
}

pub type CounterCell = (Modality, AgeBucket);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounters {
    counts: BTreeMap<CounterCell, u64>,
    last_halving: Option<Timestamp>,
}

impl CategoryCounters {
    pub fn get(&self, modality: &Modality, bucket: AgeBucket) -> u64 {
        self.counts
            .get(&(modality.clone(), bucket))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CounterCell, &u64)> {
        self.counts.iter()
    }

    /// Halves every counter once per elapsed period; the first call only
    /// starts the clock.
    pub fn decay(&mut self, now: Timestamp, period_days: i64) {
        let period = period_days * SECONDS_PER_DAY;
        let Some(mut last) = self.last_halving else {
            self.last_halving = Some(now);
            return;
        };
        while now - last >= period {
            last += period;
            for c in self.counts.values_mut() {
                *c /= 2;
            }
        }
        self.counts.retain(|_, c| *c > 0);
        self.last_halving = Some(last);
    }

    /// Most requested prefetchable cells, highest count first, ties in key order.
    pub fn top_k(&self, k: usize) -> Vec<CounterCell> {
        let mut cells: Vec<(&CounterCell, u64)> = self
            .counts
            .iter()
            .filter(|((_, b), c)| *b != AgeBucket::Older && **c > 0)
            .map(|(cell, c)| (cell, *c))
            .collect();
        cells.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        cells
            .into_iter()
            .take(k)
            .map(|(cell, _)| cell.clone())
            .collect()
    }
}

/// Counts one request for `study` made at `now`.
pub fn update_counters(counters: &mut CategoryCounters, study: &StudyRecord, now: Timestamp) {
    let cell = (study.modality.clone(), AgeBucket::of(study.study_date, now));
    *counters.counts.entry(cell).or_insert(0) += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    QueryResults,
    PatternQuery,
    LongTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchCandidate {
    pub study_uid: StudyUid,
    pub score: f64,
    pub source: CandidateSource,
    pub size_bytes: u64,
}

/// Input of the prefetching rule, in the layout
/// `[age | body part | modality | sex | patient age | pattern | institution]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerFeatures(pub Vec<f64>);

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn push_one_hot(f: &mut Vec<f64>, len: usize, slot: Option<usize>) {
    let start = f.len();
    f.resize(start + len, 0.0);
    if let Some(i) = slot {
        f[start + i] = 1.0;
    }
}

impl ScorerFeatures {
    pub fn new(study: &StudyRecord, now: Timestamp, pattern: Option<UsagePattern>) -> Self {
        let mut f = Vec::with_capacity(SCORER_FEATURE_DIM);
        let age_days = (date_of(now) - study.study_date).num_days().max(0) as f64;
        f.push(((1.0 + age_days).ln() / (1.0 + AGE_SCALE_DAYS).ln()).min(1.0));
        push_one_hot(
            &mut f,
            BodyPart::KNOWN.len() + 1,
            Some(study.body_part.slot()),
        );
        push_one_hot(
            &mut f,
            Modality::KNOWN.len() + 1,
            Some(study.modality.slot()),
        );
        push_one_hot(&mut f, Sex::ALL.len(), Some(study.patient_sex.slot()));
        f.push((study.patient_age_at(now) as f64 / 100.0).min(1.0));
        push_one_hot(&mut f, 4, pattern.map(UsagePattern::index));
        push_one_hot(
            &mut f,
            INSTITUTION_BUCKETS,
            Some((fnv1a(&study.institution) % INSTITUTION_BUCKETS as u64) as usize),
        );
        debug_assert_eq!(f.len(), SCORER_FEATURE_DIM);
        ScorerFeatures(f)
    }
}

/// Per-node prefetching-rule models, created on first use from one shared
/// initial model.
#[derive(Debug, Clone)]
pub struct ScorerBook {
    initial: MlpModel,
    models: BTreeMap<String, MlpModel>,
}

impl ScorerBook {
    pub fn new(config: &MlpConfig, seed: u64) -> Result<Self, MlpError> {
        Ok(Self {
            initial: MlpModel::from_config(
                config,
                SCORER_FEATURE_DIM,
                1,
                OutputMode::Scorer,
                seed,
            )?,
            models: BTreeMap::new(),
        })
    }

    pub fn model(&self, aetitle: &str) -> &MlpModel {
        self.models.get(aetitle).unwrap_or(&self.initial)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn score(&self, aetitle: &str, f: &ScorerFeatures) -> f64 {
        self.model(aetitle)
            .score(&f.0)
            .expect("scorer layout is fixed")
    }

    /// Highest score any node's model gives; the initial model if none exist.
    pub fn max_score(&self, f: &ScorerFeatures) -> f64 {
        if self.models.is_empty() {
            return self.initial.score(&f.0).expect("scorer layout is fixed");
        }
        self.models
            .values()
            .map(|m| m.score(&f.0).expect("scorer layout is fixed"))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn model_mut(&mut self, aetitle: &str) -> &mut MlpModel {
        self.models
            .entry(aetitle.to_owned())
            .or_insert_with(|| self.initial.clone())
    }
}

/// Read-only view of the gateway state a planning round needs.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub index: &'a RepositoryIndex,
    pub cache: &'a CacheState,
    /// Studies already on their way into the cache.
    pub in_flight: &'a BTreeSet<StudyUid>,
    pub now: Timestamp,
}

impl PlanContext<'_> {
    fn wanted(&self, uid: &StudyUid) -> bool {
        !self.cache.contains(uid) && !self.in_flight.contains(uid)
    }
}

fn rank(mut candidates: Vec<PrefetchCandidate>, floor: f64, budget: u64) -> Vec<PrefetchCandidate> {
    candidates.retain(|c| c.score >= floor);
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.study_uid.cmp(&b.study_uid))
    });
    let mut spent = 0u64;
    candidates.retain(|c| {
        if spent + c.size_bytes <= budget {
            spent += c.size_bytes;
            true
        } else {
            false
        }
    });
    candidates
}

/// Idle-time round: studies from the most requested (modality, age band)
/// cells, ranked as if a modality-revising user asked for them.
pub fn long_term_prefetch(
    counters: &CategoryCounters,
    ctx: PlanContext<'_>,
    net_utilization: f64,
    idle_threshold: f64,
    pending_bytes: u64,
    scorers: &ScorerBook,
    cfg: &PrefetchConfig,
) -> Vec<PrefetchCandidate> {
    let free = ctx.cache.free_space().saturating_sub(pending_bytes);
    if !crate::sensors::is_idle(net_utilization, idle_threshold) || free == 0 {
        return Vec::new();
    }
    let budget = (cfg.fill_fraction * free as f64).floor() as u64;
    let today = date_of(ctx.now);
    let mut out = Vec::new();
    for (modality, bucket) in counters.top_k(cfg.top_k) {
        let Some(range) = bucket.date_range(today) else {
            continue;
        };
        for st in ctx.index.by_modality_between(&modality, range) {
            if st.size_bytes <= budget && ctx.wanted(&st.study_uid) {
                let f = ScorerFeatures::new(st, ctx.now, Some(UsagePattern::ModalityRevising));
                out.push(PrefetchCandidate {
                    study_uid: st.study_uid.clone(),
                    score: scorers.max_score(&f),
                    source: CandidateSource::LongTerm,
                    size_bytes: st.size_bytes,
                });
            }
        }
    }
    rank(out, cfg.score_floor, budget)
}

fn dominant<'a, K: Ord + Clone + 'a>(keys: impl Iterator<Item = &'a K>) -> Option<K> {
    let mut counts: BTreeMap<&K, usize> = BTreeMap::new();
    for k in keys {
        *counts.entry(k).or_insert(0) += 1;
    }
    // Highest count wins; among equals the smallest key, because max_by_key
    // keeps the last maximum and the map is walked in descending order.
    counts
        .into_iter()
        .rev()
        .max_by_key(|(_, c)| *c)
        .map(|(k, _)| k.clone())
}

/// Secondary query for a predicted pattern, if the pattern has one.
pub fn secondary_query(
    predicted: UsagePattern,
    results: &[&StudyRecord],
    now: Timestamp,
    window_days: i64,
) -> Option<QuerySpec> {
    match predicted {
        UsagePattern::PatientRevising => {
            let p: PatientId = dominant(results.iter().map(|s| &s.patient_id))?;
            Some(QuerySpec::by_patient(p))
        }
        UsagePattern::ModalityRevising => {
            let m: Modality = dominant(results.iter().map(|s| &s.modality))?;
            let today = date_of(now);
            Some(QuerySpec {
                modality: Some(m),
                study_date_range: Some(DateRange(
                    today - chrono::Duration::days(window_days),
                    today,
                )),
                ..Default::default()
            })
        }
        UsagePattern::InconsequentQuery | UsagePattern::Other => None,
    }
}

/// Query-time round for the node `aetitle`.
#[allow(clippy::too_many_arguments)]
pub fn short_term_prefetch(
    query_results: &[StudyUid],
    predicted: UsagePattern,
    aetitle: &str,
    ctx: PlanContext<'_>,
    scorers: &ScorerBook,
    cfg: &PrefetchConfig,
) -> Vec<PrefetchCandidate> {
    let results: Vec<&StudyRecord> = query_results
        .iter()
        .filter_map(|u| ctx.index.get(u))
        .collect();
    let keep: Box<dyn Fn(&StudyRecord) -> bool> = match predicted {
        UsagePattern::PatientRevising => {
            let p = dominant(results.iter().map(|s| &s.patient_id));
            Box::new(move |s| Some(&s.patient_id) == p.as_ref())
        }
        UsagePattern::ModalityRevising => {
            let m = dominant(results.iter().map(|s| &s.modality));
            Box::new(move |s| Some(&s.modality) == m.as_ref())
        }
        UsagePattern::InconsequentQuery | UsagePattern::Other => Box::new(|_| true),
    };

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut consider = |st: &StudyRecord, source| {
        if ctx.wanted(&st.study_uid) && seen.insert(st.study_uid.clone()) {
            let f = ScorerFeatures::new(st, ctx.now, Some(predicted));
            out.push(PrefetchCandidate {
                study_uid: st.study_uid.clone(),
                score: scorers.score(aetitle, &f),
                source,
                size_bytes: st.size_bytes,
            });
        }
    };
    for st in results.iter().filter(|s| keep(s)) {
        consider(st, CandidateSource::QueryResults);
    }
    if let Some(q) = secondary_query(predicted, &results, ctx.now, cfg.secondary_window_days) {
        for st in ctx.index.query(&q, date_of(ctx.now)) {
            consider(st, CandidateSource::PatternQuery);
        }
    }
    let budget =
        (cfg.short_term_budget_fraction * ctx.cache.capacity_bytes() as f64).floor() as u64;
    rank(out, cfg.score_floor, budget)
}

/// One search as seen by the message sensor, with the pattern the labeller
/// assigned to its session at the end of the day.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedQuery {
    pub aetitle: String,
    pub timestamp: Timestamp,
    pub results: Vec<StudyUid>,
    pub pattern: Option<UsagePattern>,
}

/// Training set of one day: every study returned by every search, labelled 1
/// if the same node retrieved it at or after the search time.
pub fn scorer_samples(
    queries: &[ObservedQuery],
    retrieves: &[TraceEvent],
    index: &RepositoryIndex,
) -> BTreeMap<String, Vec<Sample>> {
    let mut by_node: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for q in queries {
        let day_end = crate::domain::day_start(date_of(q.timestamp)) + SECONDS_PER_DAY;
        let later: BTreeSet<&StudyUid> = retrieves
            .iter()
            .filter(|r| {
                r.aetitle == q.aetitle && r.timestamp >= q.timestamp && r.timestamp < day_end
            })
            .filter_map(|r| r.study_uid.as_ref())
            .collect();
        let batch = by_node.entry(q.aetitle.clone()).or_default();
        for uid in &q.results {
            if let Some(st) = index.get(uid) {
                let f = ScorerFeatures::new(st, q.timestamp, q.pattern);
                let y = if later.contains(uid) { 1.0 } else { 0.0 };
                batch.push((f.0, vec![y]));
            }
        }
    }
    by_node.retain(|_, b| !b.is_empty());
    by_node
}

pub fn train_scorer(
    scorers: &mut ScorerBook,
    queries: &[ObservedQuery],
    retrieves: &[TraceEvent],
    index: &RepositoryIndex,
    cfg: &MlpConfig,
) -> Result<(), MlpError> {
    for (node, batch) in scorer_samples(queries, retrieves, index) {
        let m = scorers.model_mut(&node);
        *m = m.train_with(&batch, cfg)?;
    }
    Ok(())
}
