//! Vocabulary types shared by the gateway: studies, trace events, queries and
//! the repository index.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};

/// Simulation and trace timestamps, whole seconds since the Unix epoch.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Calendar date of a timestamp (UTC, no timezone handling).
pub fn date_of(ts: Timestamp) -> NaiveDate {
    DateTime::from_timestamp(ts, 0)
        .expect("timestamp within chrono range")
        .date_naive()
}

/// Timestamp of midnight at the start of `date`.
pub fn day_start(date: NaiveDate) -> Timestamp {
    date.and_hms_opt(0, 0, 0)
        .expect("midnight is valid")
        .and_utc()
        .timestamp()
}

/// Whole years elapsed between `birth` and `on`; zero if `on` precedes `birth`.
pub fn age_in_years(birth: NaiveDate, on: NaiveDate) -> u32 {
    on.years_since(birth).unwrap_or(0)
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(StudyUid);
string_id!(PatientId);

macro_rules! token_enum {
    ($name:ident { $($variant:ident => $tok:literal),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(from = "String", into = "String")]
        pub enum $name {
            $($variant,)*
            /// Token outside the known vocabulary, kept verbatim.
            Other(String),
        }

        impl $name {
            /// The closed part of the vocabulary, in one-hot encoding order.
            pub const KNOWN: &'static [$name] = &[$($name::$variant),*];

            pub fn token(&self) -> &str {
                match self {
                    $($name::$variant => $tok,)*
                    $name::Other(t) => t,
                }
            }

            /// Position in [`Self::KNOWN`], or `KNOWN.len()` for `Other`.
            pub fn slot(&self) -> usize {
                Self::KNOWN
                    .iter()
                    .position(|k| k == self)
                    .unwrap_or(Self::KNOWN.len())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                match s.as_str() {
                    $($tok => $name::$variant,)*
                    _ => $name::Other(s),
                }
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::from(s.to_owned())
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.token().to_owned()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }
    };
}

token_enum!(Modality {
    Ct => "CT",
    Mr => "MR",
    Us => "US",
    Cr => "CR",
    Xa => "XA",
});

token_enum!(BodyPart {
    Head => "HEAD",
    Chest => "CHEST",
    Abdomen => "ABDOMEN",
    Pelvis => "PELVIS",
    Spine => "SPINE",
    Extremity => "EXTREMITY",
    Breast => "BREAST",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    O,
}

impl Sex {
    pub const ALL: [Sex; 3] = [Sex::M, Sex::F, Sex::O];

    pub fn slot(self) -> usize {
        self as usize
    }
}

/// Metadata of one imaging study, the unit of caching and prefetching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_uid: StudyUid,
    pub patient_id: PatientId,
    pub patient_sex: Sex,
    pub patient_birth_date: NaiveDate,
    pub modality: Modality,
    pub body_part: BodyPart,
    pub institution: String,
    pub study_date: NaiveDate,
    pub size_bytes: u64,
    pub num_images: u32,
}

impl StudyRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.size_bytes == 0 {
            return Err(format!("study {}: size_bytes must be > 0", self.study_uid));
        }
        if self.num_images == 0 {
            return Err(format!("study {}: num_images must be >= 1", self.study_uid));
        }
        Ok(())
    }

    pub fn patient_age_at(&self, ts: Timestamp) -> u32 {
        age_in_years(self.patient_birth_date, date_of(ts))
    }
}

/// Inclusive calendar-date range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange(pub NaiveDate, pub NaiveDate);

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.0 <= d && d <= self.1
    }
}

/// Query keys carried by a C-Find-like request. Present keys are combined
/// conjunctively.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<PatientId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study_date_range: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_part: Option<BodyPart>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub institution: Option<String>,
}

impl QuerySpec {
    pub fn by_patient(id: PatientId) -> Self {
        Self {
            patient_id: Some(id),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.key_flags().iter().all(|f| !f)
    }

    /// Presence of each key, in the order
    /// patient_id, modality, study_date_range, body_part, institution.
    pub fn key_flags(&self) -> [bool; 5] {
        [
            self.patient_id.is_some(),
            self.modality.is_some(),
            self.study_date_range.is_some(),
            self.body_part.is_some(),
            self.institution.is_some(),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.is_empty() {
            return Err("query carries no keys".into());
        }
        if let Some(DateRange(start, end)) = self.study_date_range {
            if start > end {
                return Err(format!("date range start {start} is after end {end}"));
            }
        }
        Ok(())
    }

    pub fn matches(&self, s: &StudyRecord) -> bool {
        self.patient_id.as_ref().is_none_or(|p| *p == s.patient_id)
            && self.modality.as_ref().is_none_or(|m| *m == s.modality)
            && self
                .study_date_range
                .is_none_or(|r| r.contains(s.study_date))
            && self.body_part.as_ref().is_none_or(|b| *b == s.body_part)
            && self
                .institution
                .as_ref()
                .is_none_or(|i| *i == s.institution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "find")]
    Query,
    #[serde(rename = "move")]
    Retrieve,
}

/// One timestamped request from a workstation. The serialized field names
/// form the trace file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    #[serde(rename = "ts")]
    pub timestamp: Timestamp,
    #[serde(rename = "ae")]
    pub aetitle: String,
    pub kind: EventKind,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySpec>,
    #[serde(rename = "uid", default, skip_serializing_if = "Option::is_none")]
    pub study_uid: Option<StudyUid>,
    /// On a query: its own id. On a retrieve: the query that produced it, if known.
    #[serde(rename = "qid", default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
}

impl TraceEvent {
    pub fn query(ts: Timestamp, ae: impl Into<String>, qid: Option<u64>, q: QuerySpec) -> Self {
        Self {
            timestamp: ts,
            aetitle: ae.into(),
            kind: EventKind::Query,
            query: Some(q),
            study_uid: None,
            query_id: qid,
        }
    }

    pub fn retrieve(ts: Timestamp, ae: impl Into<String>, uid: StudyUid, qid: Option<u64>) -> Self {
        Self {
            timestamp: ts,
            aetitle: ae.into(),
            kind: EventKind::Retrieve,
            query: None,
            study_uid: Some(uid),
            query_id: qid,
        }
    }

    /// True when exactly the payload matching `kind` is populated.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            EventKind::Query => self.query.is_some() && self.study_uid.is_none(),
            EventKind::Retrieve => self.study_uid.is_some() && self.query.is_none(),
        }
    }
}

/// One of the four usage behavior classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum UsagePattern {
    PatientRevising = 1,
    ModalityRevising = 2,
    InconsequentQuery = 3,
    Other = 4,
}

impl UsagePattern {
    pub const ALL: [UsagePattern; 4] = [
        UsagePattern::PatientRevising,
        UsagePattern::ModalityRevising,
        UsagePattern::InconsequentQuery,
        UsagePattern::Other,
    ];

    /// Zero-based position, used for one-hot and softmax slots.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn class_id(self) -> u8 {
        self as u8
    }
}

impl From<UsagePattern> for u8 {
    fn from(p: UsagePattern) -> u8 {
        p.class_id()
    }
}

impl TryFrom<u8> for UsagePattern {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1..=4 => Ok(Self::ALL[v as usize - 1]),
            _ => Err(format!("usage class must be 1..4, got {v}")),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("duplicate study uid {0}")]
    DuplicateUid(StudyUid),
    #[error("{0}")]
    InvalidRecord(String),
}

/// All studies held by the remote repository, keyed by uid.
#[derive(Debug, Clone, Default)]
pub struct RepositoryIndex {
    studies: BTreeMap<StudyUid, StudyRecord>,
    by_patient: BTreeMap<PatientId, BTreeSet<StudyUid>>,
    by_modality: BTreeMap<Modality, BTreeSet<StudyUid>>,
    by_modality_date: BTreeMap<Modality, BTreeSet<(NaiveDate, StudyUid)>>,
    total_bytes: u64,
}

impl RepositoryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(
        records: impl IntoIterator<Item = StudyRecord>,
    ) -> Result<Self, IndexError> {
        let mut index = Self::new();
        for r in records {
            index.insert(r)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, record: StudyRecord) -> Result<(), IndexError> {
        record.validate().map_err(IndexError::InvalidRecord)?;
        if self.studies.contains_key(&record.study_uid) {
            return Err(IndexError::DuplicateUid(record.study_uid));
        }
        let uid = record.study_uid.clone();
        self.by_patient
            .entry(record.patient_id.clone())
            .or_default()
            .insert(uid.clone());
        self.by_modality
            .entry(record.modality.clone())
            .or_default()
            .insert(uid.clone());
        self.by_modality_date
            .entry(record.modality.clone())
            .or_default()
            .insert((record.study_date, uid.clone()));
        self.total_bytes += record.size_bytes;
        self.studies.insert(uid, record);
        Ok(())
    }

    pub fn get(&self, uid: &StudyUid) -> Option<&StudyRecord> {
        self.studies.get(uid)
    }

    pub fn contains(&self, uid: &StudyUid) -> bool {
        self.studies.contains_key(uid)
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    /// Records in ascending uid order.
    pub fn iter(&self) -> impl Iterator<Item = &StudyRecord> {
        self.studies.values()
    }

    pub fn by_patient<'a>(&'a self, id: &PatientId) -> impl Iterator<Item = &'a StudyRecord> + 'a {
        self.by_patient
            .get(id)
            .into_iter()
            .flatten()
            .map(|u| &self.studies[u])
    }

    pub fn by_modality<'a>(&'a self, m: &Modality) -> impl Iterator<Item = &'a StudyRecord> + 'a {
        self.by_modality
            .get(m)
            .into_iter()
            .flatten()
            .map(|u| &self.studies[u])
    }

    /// Studies of modality `m` dated within `range`, oldest first.
    pub fn by_modality_between<'a>(
        &'a self,
        m: &Modality,
        range: DateRange,
    ) -> impl Iterator<Item = &'a StudyRecord> + 'a {
        let DateRange(from, to) = range;
        self.by_modality_date
            .get(m)
            .into_iter()
            .flat_map(move |set| {
                let lo = (from, StudyUid(String::new()));
                set.range(lo..).take_while(move |(d, _)| *d <= to)
            })
            .map(|(_, u)| &self.studies[u])
    }

    pub fn in_date_range(&self, range: DateRange) -> impl Iterator<Item = &StudyRecord> {
        self.studies
            .values()
            .filter(move |s| range.contains(s.study_date))
    }

    pub fn patients(&self) -> impl Iterator<Item = &PatientId> {
        self.by_patient.keys()
    }

    /// Studies matching `q` that already exist on `as_of` (study_date ≤ as_of),
    /// in ascending uid order.
    pub fn query(&self, q: &QuerySpec, as_of: NaiveDate) -> Vec<&StudyRecord> {
        let keep = |s: &&StudyRecord| s.study_date <= as_of && q.matches(s);
        if let Some(p) = &q.patient_id {
            self.by_patient(p).filter(keep).collect()
        } else if let (Some(m), Some(range)) = (&q.modality, q.study_date_range) {
            let mut v: Vec<&StudyRecord> =
                self.by_modality_between(m, range).filter(keep).collect();
            v.sort_by(|a, b| a.study_uid.cmp(&b.study_uid));
            v
        } else if let Some(m) = &q.modality {
            self.by_modality(m).filter(keep).collect()
        } else {
            self.studies.values().filter(keep).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Finding {
    MissingStudy {
        event: usize,
        uid: StudyUid,
    },
    StudyNotYetProduced {
        event: usize,
        uid: StudyUid,
    },
    TimestampInversion {
        event: usize,
        previous: Timestamp,
        current: Timestamp,
    },
    MalformedQuery {
        event: usize,
        reason: String,
    },
    PayloadMismatch {
        event: usize,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation finding(s)", self.findings.len())?;
        for finding in self.findings.iter().take(10) {
            write!(f, "\n  {finding:?}")?;
        }
        Ok(())
    }
}

/// Checks a trace against an index. Never fails; problems are reported.
pub fn validate_trace(events: &[TraceEvent], index: &RepositoryIndex) -> ValidationReport {
    let mut findings = Vec::new();
    let mut previous: Option<Timestamp> = None;
    for (i, ev) in events.iter().enumerate() {
        if let Some(prev) = previous {
            if ev.timestamp < prev {
                findings.push(Finding::TimestampInversion {
                    event: i,
                    previous: prev,
                    current: ev.timestamp,
                });
            }
        }
        previous = Some(ev.timestamp);

        if !ev.is_well_formed() {
            findings.push(Finding::PayloadMismatch { event: i });
            continue;
        }
        match ev.kind {
            EventKind::Query => {
                if let Err(reason) = ev.query.as_ref().expect("well formed").validate() {
                    findings.push(Finding::MalformedQuery { event: i, reason });
                }
            }
            EventKind::Retrieve => {
                let uid = ev.study_uid.as_ref().expect("well formed");
                match index.get(uid) {
                    None => findings.push(Finding::MissingStudy {
                        event: i,
                        uid: uid.clone(),
                    }),
                    Some(s) if s.study_date > date_of(ev.timestamp) => {
                        findings.push(Finding::StudyNotYetProduced {
                            event: i,
                            uid: uid.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
    }
    ValidationReport { findings }
}
