//! Usage-pattern recognition: end-of-day labelling of past query sessions and
//! live classification of new queries.
//!
//! Feature layout (all components in [0, 1]):
//!
//! | slots   | content                                                   |
//! |---------|-----------------------------------------------------------|
//! | 0..3    | hour / 23, day of month / 31, month / 12                  |
//! | 3..7    | prior count of each class for the node, capped at 20, /20 |
//! | 7..11   | last class one-hot (all zero with no history)             |
//! | 11      | time since last labelled session, log-scaled over 30 days |
//! | 12..17  | query key presence: patient, modality, dates, body part, institution |

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::domain::{EventKind, RepositoryIndex, StudyUid, Timestamp, TraceEvent, UsagePattern};
use crate::mlp::{MlpConfig, MlpError, MlpModel, OutputMode, Sample};

pub const FEATURE_DIM: usize = 17;
pub const HISTORY_CAP: u32 = 20;
const SINCE_LAST_SCALE_S: f64 = 30.0 * 86_400.0;

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("retrieved study {0} is not in the repository index")]
    UnknownStudy(StudyUid),
    #[error(transparent)]
    Model(#[from] MlpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    /// Retrieve-to-query attribution horizon.
    pub window_seconds: i64,
    pub mlp: MlpConfig,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            window_seconds: 3600,
            mlp: MlpConfig::default(),
        }
    }
}

/// A query and the retrieves attributed to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionWindow {
    pub query: TraceEvent,
    pub retrieves: Vec<TraceEvent>,
    pub aetitle: String,
    pub window_seconds: i64,
}

impl SessionWindow {
    pub fn new(query: TraceEvent, window_seconds: i64) -> Self {
        Self {
            aetitle: query.aetitle.clone(),
            query,
            retrieves: Vec::new(),
            window_seconds,
        }
    }

    pub fn retrieved_uids(&self) -> impl Iterator<Item = &StudyUid> {
        self.retrieves.iter().filter_map(|r| r.study_uid.as_ref())
    }
}

/// Groups events into sessions: each retrieve belongs to the most recent
/// earlier query from the same node, if that query is less than
/// `window_seconds` old. Unattributed retrieves are dropped. Sessions come out
/// in query order.
pub fn build_sessions(events: &[TraceEvent], window_seconds: i64) -> Vec<SessionWindow> {
    let mut sessions: Vec<SessionWindow> = Vec::new();
    let mut open: BTreeMap<&str, usize> = BTreeMap::new();
    for ev in events {
        match ev.kind {
            EventKind::Query => {
                open.insert(&ev.aetitle, sessions.len());
                sessions.push(SessionWindow::new(ev.clone(), window_seconds));
            }
            EventKind::Retrieve => {
                if let Some(&i) = open.get(ev.aetitle.as_str()) {
                    let s = &mut sessions[i];
                    let age = ev.timestamp - s.query.timestamp;
                    if (0..window_seconds).contains(&age) {
                        s.retrieves.push(ev.clone());
                    }
                }
            }
        }
    }
    sessions
}

/// Deterministic labelling rule:
/// no retrieves → inconsequent; every retrieve from one patient → patient
/// revising; two or more retrieves of one modality across patients → modality
/// revising; anything else → other.
pub fn label_session(
    s: &SessionWindow,
    index: &RepositoryIndex,
) -> Result<UsagePattern, PatternError> {
    let mut studies = Vec::with_capacity(s.retrieves.len());
    for uid in s.retrieved_uids() {
        studies.push(
            index
                .get(uid)
                .ok_or_else(|| PatternError::UnknownStudy(uid.clone()))?,
        );
    }
    let Some(first) = studies.first() else {
        return Ok(UsagePattern::InconsequentQuery);
    };
    if studies.iter().all(|st| st.patient_id == first.patient_id) {
        return Ok(UsagePattern::PatientRevising);
    }
    if studies.len() >= 2 && studies.iter().all(|st| st.modality == first.modality) {
        return Ok(UsagePattern::ModalityRevising);
    }
    Ok(UsagePattern::Other)
}

/// Labelled-session history of one node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHistory {
    pub counts: [u32; 4],
    pub last: Option<UsagePattern>,
    pub last_ts: Option<Timestamp>,
}

impl NodeHistory {
    pub fn record(&mut self, pattern: UsagePattern, ts: Timestamp) {
        self.counts[pattern.index()] += 1;
        self.last = Some(pattern);
        self.last_ts = Some(ts);
    }
}

pub type HistoryBook = BTreeMap<String, NodeHistory>;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn extract_features(s: &SessionWindow, history: &NodeHistory) -> FeatureVector {
    let ts = s.query.timestamp;
    let when = chrono::DateTime::from_timestamp(ts, 0).expect("valid timestamp");
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.push(when.hour() as f64 / 23.0);
    f.push(when.day() as f64 / 31.0);
    f.push(when.month() as f64 / 12.0);
    for c in history.counts {
        f.push(c.min(HISTORY_CAP) as f64 / HISTORY_CAP as f64);
    }
    for p in UsagePattern::ALL {
        f.push(if history.last == Some(p) { 1.0 } else { 0.0 });
    }
    f.push(match history.last_ts {
        Some(last) => {
            let since = (ts - last).max(0) as f64;
            ((1.0 + since).ln() / (1.0 + SINCE_LAST_SCALE_S).ln()).min(1.0)
        }
        None => 1.0,
    });
    let flags = s
        .query
        .query
        .as_ref()
        .map(|q| q.key_flags())
        .unwrap_or_default();
    f.extend(flags.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    debug_assert_eq!(f.len(), FEATURE_DIM);
    FeatureVector(f)
}

pub fn new_classifier(config: &MlpConfig, seed: u64) -> Result<MlpModel, MlpError> {
    MlpModel::from_config(config, FEATURE_DIM, 4, OutputMode::Classifier, seed)
}

/// Argmax class and its probability; ties go to the lowest class index.
pub fn classify(model: &MlpModel, f: &FeatureVector) -> Result<(UsagePattern, f64), MlpError> {
    if model.output_dim() != 4 {
        return Err(MlpError::DimensionMismatch {
            expected: 4,
            got: model.output_dim(),
        });
    }
    let probs = model.predict(f.as_slice())?;
    let best = probs
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if *p > probs[best] { i } else { best });
    Ok((UsagePattern::ALL[best], probs[best]))
}

fn one_hot(p: UsagePattern) -> Vec<f64> {
    let mut v = vec![0.0; 4];
    v[p.index()] = 1.0;
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub qid: Option<u64>,
    pub features: Vec<f64>,
    pub label: UsagePattern,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    entries: Vec<TrainingLogEntry>,
}

impl TrainingLog {
    pub fn entries(&self) -> &[TrainingLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Labels a finished day of sessions and trains on it. Features use the
/// history as it stood before the day, which is what live classification saw;
/// the history is then advanced with the day's labels in session order.
pub fn end_of_day_update(
    model: &MlpModel,
    sessions: &[SessionWindow],
    index: &RepositoryIndex,
    history: &mut HistoryBook,
    log: &mut TrainingLog,
    mlp: &MlpConfig,
) -> Result<MlpModel, PatternError> {
    if sessions.is_empty() {
        return Ok(model.clone());
    }
    let snapshot = history.clone();
    let empty = NodeHistory::default();
    let mut batch: Vec<Sample> = Vec::with_capacity(sessions.len());
    let mut labelled = Vec::with_capacity(sessions.len());
    for s in sessions {
        let label = label_session(s, index)?;
        let f = extract_features(s, snapshot.get(&s.aetitle).unwrap_or(&empty));
        log.entries.push(TrainingLogEntry {
            qid: s.query.query_id,
            features: f.0.clone(),
            label,
        });
        batch.push((f.0, one_hot(label)));
        labelled.push((s, label));
    }
    for (s, label) in labelled {
        history
            .entry(s.aetitle.clone())
            .or_default()
            .record(label, s.query.timestamp);
    }
    Ok(model.train_with(&batch, mlp)?)
}

/// Live recognizer: one shared classifier plus per-node histories.
#[derive(Debug, Clone)]
pub struct PatternRecognizer {
    pub model: MlpModel,
    pub history: HistoryBook,
    pub log: TrainingLog,
    config: PatternConfig,
}

impl PatternRecognizer {
    pub fn new(config: PatternConfig, seed: u64) -> Result<Self, MlpError> {
        Ok(Self {
            model: new_classifier(&config.mlp, seed)?,
            history: HistoryBook::new(),
            log: TrainingLog::default(),
            config,
        })
    }

    pub fn config(&self) -> &PatternConfig {
        &self.config
    }

    /// Classifies a query as it arrives.
    pub fn classify_query(&self, query: &TraceEvent) -> Result<(UsagePattern, f64), MlpError> {
        let s = SessionWindow::new(query.clone(), self.config.window_seconds);
        let empty = NodeHistory::default();
        let f = extract_features(&s, self.history.get(&query.aetitle).unwrap_or(&empty));
        classify(&self.model, &f)
    }

    /// Trains on a finished day and returns the label of each session.
    pub fn end_of_day(
        &mut self,
        sessions: &[SessionWindow],
        index: &RepositoryIndex,
    ) -> Result<Vec<UsagePattern>, PatternError> {
        self.model = end_of_day_update(
            &self.model,
            sessions,
            index,
            &mut self.history,
            &mut self.log,
            &self.config.mlp,
        )?;
        let fresh = &self.log.entries[self.log.len() - sessions.len()..];
        Ok(fresh.iter().map(|e| e.label).collect())
    }
}

/// Distinct patients and modalities among the retrieved studies.
pub fn session_spread(s: &SessionWindow, index: &RepositoryIndex) -> (usize, usize) {
    let studies: Vec<_> = s.retrieved_uids().filter_map(|u| index.get(u)).collect();
    let patients: BTreeSet<_> = studies.iter().map(|st| &st.patient_id).collect();
    let modalities: BTreeSet<_> = studies.iter().map(|st| &st.modality).collect();
    (patients.len(), modalities.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::test_support::*;
    use crate::domain::{day_start, Modality, QuerySpec};

    fn idx() -> RepositoryIndex {
        RepositoryIndex::from_records([
            study("A", "P1", Modality::Ct, d(2016, 1, 1), 1),
            study("B", "P1", Modality::Mr, d(2016, 1, 1), 1),
            study("C", "P1", Modality::Us, d(2016, 1, 1), 1),
            study("D", "P2", Modality::Ct, d(2016, 1, 1), 1),
            study("E", "P3", Modality::Ct, d(2016, 1, 1), 1),
            study("F", "P4", Modality::Ct, d(2016, 1, 1), 1),
            study("G", "P2", Modality::Mr, d(2016, 1, 1), 1),
        ])
        .unwrap()
    }

    fn session(uids: &[&str]) -> SessionWindow {
        let t0 = day_start(d(2016, 2, 1)) + 9 * 3600;
        let mut s = SessionWindow::new(
            TraceEvent::query(t0, "WS1", Some(1), QuerySpec::by_patient("P1".into())),
            3600,
        );
        for (i, u) in uids.iter().enumerate() {
            s.retrieves.push(TraceEvent::retrieve(
                t0 + 10 * (i as i64 + 1),
                "WS1",
                (*u).into(),
                Some(1),
            ));
        }
        s
    }

    #[test]
    fn labelling_examples() {
        let index = idx();
        assert_eq!(
            label_session(&session(&[]), &index).unwrap(),
            UsagePattern::InconsequentQuery
        );
        assert_eq!(
            label_session(&session(&["A", "B", "C"]), &index).unwrap(),
            UsagePattern::PatientRevising
        );
        assert_eq!(
            label_session(&session(&["A", "D", "E", "F"]), &index).unwrap(),
            UsagePattern::ModalityRevising
        );
        assert_eq!(
            label_session(&session(&["A", "B", "G"]), &index).unwrap(),
            UsagePattern::Other
        );
        assert_eq!(
            label_session(&session(&["D"]), &index).unwrap(),
            UsagePattern::PatientRevising
        );
        assert!(matches!(
            label_session(&session(&["Z"]), &index),
            Err(PatternError::UnknownStudy(u)) if u.as_str() == "Z"
        ));
    }

    #[test]
    fn attribution_respects_node_and_window() {
        let t = 1_000_000;
        let q = |ts, ae: &str, id| {
            TraceEvent::query(ts, ae, Some(id), QuerySpec::by_patient("P1".into()))
        };
        let r = |ts, ae: &str| TraceEvent::retrieve(ts, ae, "A".into(), None);
        let events = vec![
            r(t - 5, "WS1"),
            q(t, "WS1", 1),
            q(t + 1, "WS2", 2),
            r(t + 10, "WS1"),
            r(t + 11, "WS2"),
            r(t + 3599, "WS1"),
            r(t + 3600, "WS1"),
            q(t + 4000, "WS1", 3),
            r(t + 4001, "WS1"),
        ];
        let sessions = build_sessions(&events, 3600);
        let counts: Vec<usize> = sessions.iter().map(|s| s.retrieves.len()).collect();
        assert_eq!(counts, [2, 1, 1]);
        for s in &sessions {
            assert!(s.retrieves.iter().all(|r| r.aetitle == s.aetitle));
        }
    }

    #[test]
    fn boundary_time_features() {
        let t = day_start(d(2016, 1, 1));
        let s = SessionWindow::new(
            TraceEvent::query(t, "WS1", None, QuerySpec::by_patient("P1".into())),
            3600,
        );
        let f = extract_features(&s, &NodeHistory::default());
        assert_eq!(f.0.len(), FEATURE_DIM);
        assert_eq!(&f.0[0..3], &[0.0, 1.0 / 31.0, 1.0 / 12.0]);
        assert_eq!(&f.0[3..7], &[0.0; 4]);
        assert_eq!(&f.0[7..11], &[0.0; 4]);
        assert_eq!(&f.0[12..17], &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn history_counts_are_capped_and_scaled() {
        let s = session(&[]);
        let mut h = NodeHistory::default();
        for i in 0..5 {
            h.record(UsagePattern::PatientRevising, s.query.timestamp - 1000 + i);
        }
        let f = extract_features(&s, &h);
        assert_eq!(f.0[3], 5.0 / 20.0);
        assert_eq!(f.0[7], 1.0);
        for _ in 0..30 {
            h.record(UsagePattern::Other, s.query.timestamp);
        }
        let f = extract_features(&s, &h);
        assert_eq!(f.0[6], 1.0);
        assert_eq!(f.0[10], 1.0);
        assert_eq!(f.0[11], 0.0);
        assert_eq!(f, extract_features(&s, &h));
    }

    #[test]
    fn uniform_model_tiebreaks_to_first_class() {
        let m = MlpModel::zeros(&[FEATURE_DIM, 16, 4], OutputMode::Classifier).unwrap();
        let f = extract_features(&session(&[]), &NodeHistory::default());
        let (p, c) = classify(&m, &f).unwrap();
        assert_eq!(p, UsagePattern::PatientRevising);
        assert_eq!(c, 0.25);
        let scorer = MlpModel::zeros(&[FEATURE_DIM, 1], OutputMode::Scorer).unwrap();
        assert!(classify(&scorer, &f).is_err());
    }

    #[test]
    fn saturated_training_yields_confident_class() {
        let index = idx();
        let mut model = new_classifier(&MlpConfig::default(), 3).unwrap();
        let mut history = HistoryBook::new();
        let mut log = TrainingLog::default();
        let day: Vec<SessionWindow> = (0..10).map(|_| session(&["A", "D"])).collect();
        let cfg = MlpConfig {
            epochs: 50,
            learning_rate: 0.2,
            ..Default::default()
        };
        for _ in 0..5 {
            model = end_of_day_update(&model, &day, &index, &mut history, &mut log, &cfg).unwrap();
        }
        let f = extract_features(&day[0], &history["WS1"]);
        let (p, conf) = classify(&model, &f).unwrap();
        assert_eq!(p, UsagePattern::ModalityRevising);
        assert!(conf > 0.9, "{conf}");
        assert_eq!(log.len(), 50);
    }

    #[test]
    fn empty_day_leaves_model_unchanged() {
        let model = new_classifier(&MlpConfig::default(), 1).unwrap();
        let mut history = HistoryBook::new();
        let mut log = TrainingLog::default();
        let out = end_of_day_update(
            &model,
            &[],
            &idx(),
            &mut history,
            &mut log,
            &MlpConfig::default(),
        )
        .unwrap();
        assert_eq!(out, model);
        assert!(log.is_empty());
        assert!(history.is_empty());
    }

    #[test]
    fn training_log_lines() {
        let mut rec = PatternRecognizer::new(PatternConfig::default(), 2).unwrap();
        rec.end_of_day(&[session(&["A"]), session(&[])], &idx())
            .unwrap();
        let mut buf = Vec::new();
        rec.log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["label"], 1);
        assert_eq!(first["qid"], 1);
        assert_eq!(first["features"].as_array().unwrap().len(), FEATURE_DIM);
        assert_eq!(rec.history["WS1"].counts, [1, 0, 1, 0]);
    }
}
