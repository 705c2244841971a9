//! Synthetic repository and request-trace generator.
//!
//! Each workstation runs sessions back to back during working hours. A
//! session is one query followed by the retrieves its class implies:
//!
//! - patient revising: the query names a patient, retrieves are that patient's
//!   newest study plus some priors;
//! - modality revising: the query names a modality over the last month,
//!   retrieves are recent studies of that modality from distinct patients;
//! - inconsequent: a query with no retrieves;
//! - other: a broad institution/body-part query, retrieves span at least two
//!   patients and two modalities.
//!
//! Study sizes are log-normal per modality and rescaled so the repository
//! totals `total_repo_bytes` exactly. Patient popularity follows a Zipf law.

use std::collections::BTreeSet;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Binomial, Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::io::GroundTruth;
use crate::domain::{
    day_start, BodyPart, DateRange, Modality, PatientId, QuerySpec, RepositoryIndex, Sex,
    StudyRecord, StudyUid, Timestamp, TraceEvent, UsagePattern,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid workload config `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveCount {
    pub min: u32,
    pub max: u32,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityProfile {
    pub modality: Modality,
    /// Relative frequency among studies.
    pub share: f64,
    /// Median study size before rescaling to the repository total.
    pub median_mb: f64,
    /// Typical bytes per image, used to derive image counts.
    pub image_kb: f64,
}

fn profile(m: Modality, share: f64, median_mb: f64, image_kb: f64) -> ModalityProfile {
    ModalityProfile {
        modality: m,
        share,
        median_mb,
        image_kb,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub duration_days: u32,
    pub start_date: NaiveDate,
    pub n_studies: usize,
    pub total_repo_bytes: u64,
    pub n_workstations: usize,
    /// Probabilities of patient revising, modality revising, inconsequent, other.
    pub class_mix: [f64; 4],
    /// Mean sessions per weekday across all workstations.
    pub session_rate_per_day: f64,
    /// Weekend session rate as a fraction of the weekday rate.
    pub weekend_factor: f64,
    pub retrieves_per_session: RetrieveCount,
    pub seed: u64,
    /// Zipf exponent of patient popularity; 0 is uniform.
    pub working_set_skew: f64,
    /// Fraction of studies produced during the trace period.
    pub new_study_fraction: f64,
    /// Historical studies are dated up to this many days before the start.
    pub history_days: u32,
    pub n_institutions: usize,
    /// Log-normal shape of study sizes.
    pub size_sigma: f64,
    pub modalities: Vec<ModalityProfile>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            duration_days: 90,
            start_date: NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(),
            n_studies: 2000,
            total_repo_bytes: 20_000_000_000,
            n_workstations: 3,
            class_mix: [0.5, 0.3, 0.1, 0.1],
            session_rate_per_day: 30.0,
            weekend_factor: 0.25,
            retrieves_per_session: RetrieveCount {
                min: 1,
                max: 8,
                mean: 3.0,
            },
            seed: 1,
            working_set_skew: 0.8,
            new_study_fraction: 0.3,
            history_days: 1825,
            n_institutions: 3,
            size_sigma: 0.5,
            modalities: vec![
                profile(Modality::Ct, 0.25, 30.0, 512.0),
                profile(Modality::Mr, 0.15, 20.0, 256.0),
                profile(Modality::Cr, 0.35, 5.0, 5000.0),
                profile(Modality::Us, 0.20, 4.0, 600.0),
                profile(Modality::Xa, 0.05, 15.0, 1000.0),
            ],
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field: &'static str, reason: &str| {
            Err(ConfigError {
                field,
                reason: reason.to_owned(),
            })
        };
        if self.duration_days == 0 {
            return fail("duration_days", "must be positive");
        }
        if self.n_studies == 0 {
            return fail("n_studies", "must be positive");
        }
        if self.total_repo_bytes < self.n_studies as u64 {
            return fail("total_repo_bytes", "must allow at least one byte per study");
        }
        if self.n_workstations == 0 {
            return fail("n_workstations", "must be positive");
        }
        if self.class_mix.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("class_mix", "each probability must lie in [0, 1]");
        }
        if (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("class_mix", "probabilities must sum to 1");
        }
        if !(self.session_rate_per_day > 0.0 && self.session_rate_per_day.is_finite()) {
            return fail("session_rate_per_day", "must be a positive real");
        }
        if !(0.0..=1.0).contains(&self.weekend_factor) {
            return fail("weekend_factor", "must lie in [0, 1]");
        }
        let r = &self.retrieves_per_session;
        if r.min == 0 || r.min > r.max || r.mean < r.min as f64 || r.mean > r.max as f64 {
            return fail("retrieves_per_session", "need 1 <= min <= mean <= max");
        }
        if !(self.working_set_skew >= 0.0 && self.working_set_skew.is_finite()) {
            return fail("working_set_skew", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.new_study_fraction) {
            return fail("new_study_fraction", "must lie in [0, 1]");
        }
        if self.history_days == 0 {
            return fail("history_days", "must be positive");
        }
        if self.n_institutions == 0 {
            return fail("n_institutions", "must be positive");
        }
        if !(self.size_sigma >= 0.0 && self.size_sigma.is_finite()) {
            return fail("size_sigma", "must be >= 0");
        }
        if self.modalities.is_empty()
            || self
                .modalities
                .iter()
                .any(|m| !(m.share > 0.0 && m.median_mb > 0.0 && m.image_kb > 0.0))
        {
            return fail(
                "modalities",
                "need at least one profile with positive share, median and image size",
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedWorkload {
    pub index: RepositoryIndex,
    pub events: Vec<TraceEvent>,
    pub labels: Vec<GroundTruth>,
}

const MODALITY_WINDOW_DAYS: i64 = 30;
const RECENT_TRIGGER_DAYS: i64 = 3;
const WORKDAY_START_S: i64 = 8 * 3600;
const LAST_SESSION_START_S: i64 = 21 * 3600;
const SESSION_SPAN_LIMIT_S: i64 = 3300;

fn body_parts_for(m: &Modality) -> &'static [BodyPart] {
    use BodyPart::*;
    match m {
        Modality::Ct => &[Head, Chest, Abdomen, Pelvis, Spine],
        Modality::Mr => &[Head, Spine, Extremity, Abdomen],
        Modality::Cr => &[Chest, Extremity, Spine],
        Modality::Us => &[Abdomen, Pelvis, Breast],
        Modality::Xa => &[Chest, Head],
        Modality::Other(_) => &[Chest, Abdomen, Head],
    }
}

/// Yields class labels whose running proportions track the mix: refills a
/// shuffled bag of 100 labels allocated by largest remainder.
struct ClassBag {
    mix: [f64; 4],
    bag: Vec<UsagePattern>,
}

impl ClassBag {
    const SIZE: usize = 100;

    fn next(&mut self, rng: &mut impl Rng) -> UsagePattern {
        if self.bag.is_empty() {
            let raw: Vec<f64> = self.mix.iter().map(|p| p * Self::SIZE as f64).collect();
            let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| {
                (raw[b] - raw[b].floor())
                    .total_cmp(&(raw[a] - raw[a].floor()))
                    .then(a.cmp(&b))
            });
            let mut missing = Self::SIZE - counts.iter().sum::<usize>();
            for i in order {
                if missing == 0 {
                    break;
                }
                if self.mix[i] > 0.0 {
                    counts[i] += 1;
                    missing -= 1;
                }
            }
            for (i, c) in counts.into_iter().enumerate() {
                self.bag
                    .extend(std::iter::repeat_n(UsagePattern::ALL[i], c));
            }
            self.bag.shuffle(rng);
        }
        self.bag.pop().expect("bag refilled")
    }
}

struct Builder<'a> {
    cfg: &'a WorkloadConfig,
    rng: ChaCha8Rng,
    studies: Vec<StudyRecord>,
    /// Study indices per patient, sorted by date descending then uid.
    patient_studies: Vec<Vec<usize>>,
    patient_ids: Vec<PatientId>,
    patient_pick: WeightedIndex<f64>,
    /// Study indices sorted by date ascending.
    by_date: Vec<usize>,
}

/// Session content relative to its query time.
struct SessionPlan {
    class: UsagePattern,
    query: QuerySpec,
    retrieves: Vec<StudyUid>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a WorkloadConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (studies, patient_studies, patient_ids) = build_studies(cfg, &mut rng);

        // Zipf popularity over a random permutation of patients.
        let mut ranks: Vec<usize> = (0..patient_ids.len()).collect();
        ranks.shuffle(&mut rng);
        let weights: Vec<f64> = ranks
            .iter()
            .map(|&r| 1.0 / ((r + 1) as f64).powf(cfg.working_set_skew))
            .collect();
        let patient_pick = WeightedIndex::new(&weights).expect("positive weights");

        let mut by_date: Vec<usize> = (0..studies.len()).collect();
        by_date.sort_by(|&a, &b| {
            studies[a]
                .study_date
                .cmp(&studies[b].study_date)
                .then_with(|| studies[a].study_uid.cmp(&studies[b].study_uid))
        });

        Self {
            cfg,
            rng,
            studies,
            patient_studies,
            patient_ids,
            patient_pick,
            by_date,
        }
    }

    fn draw_k(&mut self) -> usize {
        let r = &self.cfg.retrieves_per_session;
        if r.max == r.min {
            return r.min as usize;
        }
        let p = (r.mean - r.min as f64) / (r.max - r.min) as f64;
        let extra = Binomial::new((r.max - r.min) as u64, p)
            .expect("valid binomial")
            .sample(&mut self.rng);
        r.min as usize + extra as usize
    }

    /// Study indices with study_date in `[from, to]`, date ascending.
    fn dated_between(&self, from: NaiveDate, to: NaiveDate) -> &[usize] {
        let lo = self
            .by_date
            .partition_point(|&i| self.studies[i].study_date < from);
        let hi = self
            .by_date
            .partition_point(|&i| self.studies[i].study_date <= to);
        &self.by_date[lo..hi]
    }

    fn available_of(&self, patient: usize, day: NaiveDate) -> Vec<usize> {
        self.patient_studies[patient]
            .iter()
            .copied()
            .filter(|&i| self.studies[i].study_date <= day)
            .collect()
    }

    fn pick_patient(&mut self, day: NaiveDate) -> Option<usize> {
        let recent = self
            .dated_between(day - Duration::days(RECENT_TRIGGER_DAYS), day)
            .to_vec();
        if !recent.is_empty() && self.rng.random_bool(0.5) {
            let s = *recent.choose(&mut self.rng).unwrap();
            let pid = &self.studies[s].patient_id;
            return self.patient_ids.binary_search(pid).ok();
        }
        for _ in 0..64 {
            let p = self.patient_pick.sample(&mut self.rng);
            if !self.available_of(p, day).is_empty() {
                return Some(p);
            }
        }
        None
    }

    fn plan_patient(&mut self, day: NaiveDate) -> Option<SessionPlan> {
        let p = self.pick_patient(day)?;
        let avail = self.available_of(p, day);
        let k = self.draw_k().min(avail.len()).max(1);
        let mut chosen = vec![avail[0]];
        let mut priors = avail[1..].to_vec();
        priors.shuffle(&mut self.rng);
        priors.truncate(k - 1);
        priors.sort_by_key(|&i| std::cmp::Reverse(self.studies[i].study_date));
        chosen.extend(priors);
        Some(SessionPlan {
            class: UsagePattern::PatientRevising,
            query: QuerySpec::by_patient(self.patient_ids[p].clone()),
            retrieves: chosen
                .iter()
                .map(|&i| self.studies[i].study_uid.clone())
                .collect(),
        })
    }

    fn pick_modality(&mut self) -> Modality {
        let shares: Vec<f64> = self.cfg.modalities.iter().map(|m| m.share).collect();
        let i = WeightedIndex::new(&shares).unwrap().sample(&mut self.rng);
        self.cfg.modalities[i].modality.clone()
    }

    fn plan_modality(&mut self, day: NaiveDate) -> Option<SessionPlan> {
        let from = day - Duration::days(MODALITY_WINDOW_DAYS);
        for _ in 0..8 {
            let m = self.pick_modality();
            // Newest first: reading sessions work through the latest studies.
            let pool: Vec<usize> = self
                .dated_between(from, day)
                .iter()
                .rev()
                .copied()
                .filter(|&i| self.studies[i].modality == m)
                .collect();
            let distinct = pool
                .iter()
                .map(|&i| &self.studies[i].patient_id)
                .collect::<BTreeSet<_>>()
                .len();
            if distinct < 2 {
                continue;
            }
            let k = self.draw_k().max(2).min(distinct);
            let mut chosen: Vec<usize> = Vec::new();
            let mut seen: BTreeSet<PatientId> = BTreeSet::new();
            'passes: for _ in 0..4 {
                for &i in &pool {
                    if chosen.len() == k {
                        break 'passes;
                    }
                    let pid = &self.studies[i].patient_id;
                    if seen.contains(pid) || !self.rng.random_bool(0.6) {
                        continue;
                    }
                    seen.insert(pid.clone());
                    chosen.push(i);
                }
            }
            if chosen.len() < 2 {
                continue;
            }
            return Some(SessionPlan {
                class: UsagePattern::ModalityRevising,
                query: QuerySpec {
                    modality: Some(m),
                    study_date_range: Some(DateRange(from, day)),
                    ..Default::default()
                },
                retrieves: chosen
                    .iter()
                    .map(|&i| self.studies[i].study_uid.clone())
                    .collect(),
            });
        }
        None
    }

    fn institution(&mut self) -> String {
        format!("INST{}", self.rng.random_range(1..=self.cfg.n_institutions))
    }

    fn plan_inconsequent(&mut self, day: NaiveDate) -> SessionPlan {
        let roll: f64 = self.rng.random();
        let query = if roll < 0.4 {
            let p = self.patient_pick.sample(&mut self.rng);
            QuerySpec::by_patient(self.patient_ids[p].clone())
        } else if roll < 0.6 {
            QuerySpec {
                modality: Some(self.pick_modality()),
                study_date_range: Some(DateRange(day - Duration::days(MODALITY_WINDOW_DAYS), day)),
                ..Default::default()
            }
        } else if roll < 0.8 {
            let m = self.pick_modality();
            QuerySpec {
                body_part: body_parts_for(&m).choose(&mut self.rng).cloned(),
                ..Default::default()
            }
        } else {
            QuerySpec {
                institution: Some(self.institution()),
                ..Default::default()
            }
        };
        SessionPlan {
            class: UsagePattern::InconsequentQuery,
            query,
            retrieves: Vec::new(),
        }
    }

    fn plan_other(&mut self, day: NaiveDate) -> Option<SessionPlan> {
        let query = if self.rng.random_bool(0.6) {
            QuerySpec {
                institution: Some(self.institution()),
                study_date_range: Some(DateRange(day - Duration::days(90), day)),
                ..Default::default()
            }
        } else {
            let m = self.pick_modality();
            QuerySpec {
                body_part: body_parts_for(&m).choose(&mut self.rng).cloned(),
                study_date_range: Some(DateRange(day - Duration::days(365), day)),
                ..Default::default()
            }
        };
        let matching: Vec<usize> = (0..self.studies.len())
            .filter(|&i| self.studies[i].study_date <= day && query.matches(&self.studies[i]))
            .collect();
        let everything: Vec<usize> = self.dated_between(NaiveDate::MIN, day).to_vec();
        let k = self.draw_k().max(2);
        for pool in [matching, everything] {
            if let Some(chosen) = self.pick_mixed(&pool, k) {
                return Some(SessionPlan {
                    class: UsagePattern::Other,
                    query,
                    retrieves: chosen
                        .iter()
                        .map(|&i| self.studies[i].study_uid.clone())
                        .collect(),
                });
            }
        }
        None
    }

    /// `k` distinct studies spanning at least two patients and two modalities.
    fn pick_mixed(&mut self, pool: &[usize], k: usize) -> Option<Vec<usize>> {
        if pool.len() < 2 {
            return None;
        }
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(&mut self.rng);
        let first = shuffled[0];
        let a = &self.studies[first];
        let second = shuffled[1..].iter().copied().find(|&i| {
            self.studies[i].patient_id != a.patient_id && self.studies[i].modality != a.modality
        })?;
        let mut chosen = vec![first, second];
        chosen.extend(
            shuffled
                .iter()
                .copied()
                .filter(|i| *i != first && *i != second)
                .take(k.saturating_sub(2)),
        );
        Some(chosen)
    }

    fn plan(&mut self, class: UsagePattern, day: NaiveDate) -> SessionPlan {
        let planned = match class {
            UsagePattern::PatientRevising => self.plan_patient(day),
            UsagePattern::ModalityRevising => self.plan_modality(day),
            UsagePattern::InconsequentQuery => Some(self.plan_inconsequent(day)),
            UsagePattern::Other => self.plan_other(day),
        };
        planned.unwrap_or_else(|| self.plan_inconsequent(day))
    }
}

fn build_studies(
    cfg: &WorkloadConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<StudyRecord>, Vec<Vec<usize>>, Vec<PatientId>) {
    let shares: Vec<f64> = cfg.modalities.iter().map(|m| m.share).collect();
    let modality_pick = WeightedIndex::new(&shares).expect("validated shares");
    let per_patient = Poisson::new(2.0).expect("positive rate");
    let birth_base = NaiveDate::from_ymd_opt(1930, 1, 1).unwrap();
    let birth_span = (NaiveDate::from_ymd_opt(2014, 12, 31).unwrap() - birth_base).num_days();

    let mut raw_sizes = Vec::with_capacity(cfg.n_studies);
    let mut studies = Vec::with_capacity(cfg.n_studies);
    let mut patient_studies: Vec<Vec<usize>> = Vec::new();
    let mut patient_ids = Vec::new();

    while studies.len() < cfg.n_studies {
        let pid = PatientId(format!("P{:05}", patient_ids.len() + 1));
        let sex = match rng.random_range(0..100) {
            0..49 => Sex::M,
            49..98 => Sex::F,
            _ => Sex::O,
        };
        let birth = birth_base + Duration::days(rng.random_range(0..=birth_span));
        let n = (1 + per_patient.sample(rng) as usize).min(cfg.n_studies - studies.len());
        let mut mine = Vec::with_capacity(n);
        for _ in 0..n {
            let prof = &cfg.modalities[modality_pick.sample(rng)];
            let study_date = if rng.random_bool(cfg.new_study_fraction) {
                cfg.start_date + Duration::days(rng.random_range(0..cfg.duration_days as i64))
            } else {
                cfg.start_date - Duration::days(rng.random_range(1..=cfg.history_days as i64))
            };
            let size = LogNormal::new(prof.median_mb.ln(), cfg.size_sigma)
                .expect("valid log-normal")
                .sample(rng);
            raw_sizes.push(size);
            mine.push(studies.len());
            studies.push(StudyRecord {
                study_uid: StudyUid(format!("S{:06}", studies.len() + 1)),
                patient_id: pid.clone(),
                patient_sex: sex,
                patient_birth_date: birth,
                modality: prof.modality.clone(),
                body_part: body_parts_for(&prof.modality).choose(rng).unwrap().clone(),
                institution: format!("INST{}", rng.random_range(1..=cfg.n_institutions)),
                study_date,
                size_bytes: 0,
                num_images: 1,
            });
        }
        mine.sort_by(|&a, &b| {
            studies[b]
                .study_date
                .cmp(&studies[a].study_date)
                .then_with(|| studies[a].study_uid.cmp(&studies[b].study_uid))
        });
        patient_studies.push(mine);
        patient_ids.push(pid);
    }

    // Rescale to the exact repository total; the rounding residual goes to the
    // largest study.
    let scale = cfg.total_repo_bytes as f64 / raw_sizes.iter().sum::<f64>();
    for (s, raw) in studies.iter_mut().zip(&raw_sizes) {
        s.size_bytes = ((raw * scale).round() as u64).max(1);
    }
    let total: u64 = studies.iter().map(|s| s.size_bytes).sum();
    let largest = (0..studies.len())
        .max_by_key(|&i| (studies[i].size_bytes, std::cmp::Reverse(i)))
        .unwrap();
    let adjusted =
        studies[largest].size_bytes as i128 + cfg.total_repo_bytes as i128 - total as i128;
    studies[largest].size_bytes = adjusted.max(1) as u64;
    for s in &mut studies {
        let image_bytes = cfg
            .modalities
            .iter()
            .find(|m| m.modality == s.modality)
            .map(|m| m.image_kb * 1024.0)
            .unwrap();
        s.num_images = ((s.size_bytes as f64 / image_bytes).round() as u32).max(1);
    }
    (studies, patient_studies, patient_ids)
}

/// Generates a repository index, a time-ordered trace and the per-session
/// ground-truth labels. Deterministic for a fixed configuration.
pub fn generate_workload(cfg: &WorkloadConfig) -> Result<GeneratedWorkload, ConfigError> {
    cfg.validate()?;
    let mut b = Builder::new(cfg);
    let mut bag = ClassBag {
        mix: cfg.class_mix,
        bag: Vec::new(),
    };

    // (timestamp, workstation, order within workstation) keeps the merge stable.
    let mut keyed: Vec<((Timestamp, usize, usize), TraceEvent)> = Vec::new();
    let mut labels = Vec::new();
    let mut next_qid: u64 = 1;
    let mut per_ws_seq = vec![0usize; cfg.n_workstations];

    for d in 0..cfg.duration_days as i64 {
        let day = cfg.start_date + Duration::days(d);
        let weekend = matches!(day.weekday(), Weekday::Sat | Weekday::Sun);
        let rate = cfg.session_rate_per_day * if weekend { cfg.weekend_factor } else { 1.0 };
        let n = if rate > 0.0 {
            Poisson::new(rate).unwrap().sample(&mut b.rng) as usize
        } else {
            0
        };
        let mut per_ws = vec![0usize; cfg.n_workstations];
        for _ in 0..n {
            per_ws[b.rng.random_range(0..cfg.n_workstations)] += 1;
        }
        let midnight = day_start(day);
        for (ws, &count) in per_ws.iter().enumerate() {
            let ae = format!("WS{}", ws + 1);
            let mut cursor = midnight + WORKDAY_START_S + b.rng.random_range(0..1200);
            for _ in 0..count {
                if cursor > midnight + LAST_SESSION_START_S {
                    break;
                }
                let class = bag.next(&mut b.rng);
                let plan = b.plan(class, day);
                let qid = next_qid;
                next_qid += 1;

                let mut t = cursor;
                keyed.push((
                    (t, ws, per_ws_seq[ws]),
                    TraceEvent::query(t, &ae, Some(qid), plan.query),
                ));
                per_ws_seq[ws] += 1;
                let k = plan.retrieves.len() as i64;
                let max_gap = (SESSION_SPAN_LIMIT_S / k.max(1)).clamp(31, 300);
                for (j, uid) in plan.retrieves.into_iter().enumerate() {
                    t += if j == 0 {
                        b.rng.random_range(20..=120)
                    } else {
                        b.rng.random_range(30..=max_gap)
                    };
                    keyed.push((
                        (t, ws, per_ws_seq[ws]),
                        TraceEvent::retrieve(t, &ae, uid, Some(qid)),
                    ));
                    per_ws_seq[ws] += 1;
                }
                labels.push(GroundTruth {
                    qid,
                    class: plan.class,
                });
                cursor = t + b.rng.random_range(120..=2400);
            }
        }
    }

    keyed.sort_by_key(|k| k.0);
    let events = keyed.into_iter().map(|(_, e)| e).collect();
    let index = RepositoryIndex::from_records(b.studies).expect("generated uids are unique");
    Ok(GeneratedWorkload {
        index,
        events,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            duration_days: 10,
            n_studies: 300,
            total_repo_bytes: 3_000_000_000,
            session_rate_per_day: 10.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        WorkloadConfig::default().validate().unwrap();
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = small(1);
        cfg.class_mix = [0.5, 0.5, 0.5, 0.0];
        assert_eq!(generate_workload(&cfg).unwrap_err().field, "class_mix");
        let mut cfg = small(1);
        cfg.n_studies = 0;
        assert_eq!(generate_workload(&cfg).unwrap_err().field, "n_studies");
        let mut cfg = small(1);
        cfg.retrieves_per_session.mean = 20.0;
        assert_eq!(
            generate_workload(&cfg).unwrap_err().field,
            "retrieves_per_session"
        );
    }

    #[test]
    fn sizes_sum_to_repository_total() {
        let w = generate_workload(&small(3)).unwrap();
        assert_eq!(w.index.len(), 300);
        assert_eq!(w.index.total_bytes(), 3_000_000_000);
        assert!(w
            .index
            .iter()
            .all(|s| s.size_bytes > 0 && s.num_images >= 1));
    }

    #[test]
    fn events_are_time_ordered_and_labelled() {
        let w = generate_workload(&small(4)).unwrap();
        assert!(w
            .events
            .windows(2)
            .all(|p| p[0].timestamp <= p[1].timestamp));
        let queries = w.events.iter().filter(|e| e.query.is_some()).count();
        assert_eq!(queries, w.labels.len());
    }

    #[test]
    fn class_bag_tracks_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bag = ClassBag {
            mix: [0.5, 0.3, 0.1, 0.1],
            bag: Vec::new(),
        };
        let mut counts = [0usize; 4];
        for _ in 0..200 {
            counts[bag.next(&mut rng).index()] += 1;
        }
        assert_eq!(counts, [100, 60, 20, 20]);
    }

    #[test]
    fn draw_k_respects_bounds() {
        let cfg = small(5);
        let mut b = Builder::new(&cfg);
        let draws: Vec<usize> = (0..2000).map(|_| b.draw_k()).collect();
        assert!(draws.iter().all(|k| (1..=8).contains(k)));
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        assert!((mean - 3.0).abs() < 0.15, "{mean}");
    }
}
