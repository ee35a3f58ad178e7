//! Labeled recordings, sessions, patient-disjoint splits and class weights.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Binary recording label. `Abnormal` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    /// 1.0 for `Abnormal`, 0.0 for `Normal`.
    pub fn target(self) -> f64 {
        match self {
            Label::Normal => 0.0,
            Label::Abnormal => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(Error::Invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub recording_id: String,
    pub session_id: String,
    pub patient_id: String,
    /// Seconds.
    pub duration: f64,
    pub label: Label,
    pub label_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub patient_id: String,
    pub recordings: Vec<Recording>,
    pub label: Label,
}

/// Which recordings are admitted into a corpus. Both bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InclusionPolicy {
    /// Seconds.
    pub min_duration: f64,
    pub min_label_confidence: f64,
}

impl InclusionPolicy {
    /// Manually labeled corpus: at least 15 minutes, fully confident labels.
    pub fn tuab() -> Self {
        Self {
            min_duration: 15.0 * 60.0,
            min_label_confidence: 1.0,
        }
    }

    /// Report-derived corpus: at least 6 minutes, label confidence 0.99.
    pub fn autotuab() -> Self {
        Self {
            min_duration: 6.0 * 60.0,
            min_label_confidence: 0.99,
        }
    }

    /// Admits everything with a positive duration.
    pub fn permissive() -> Self {
        Self {
            min_duration: 0.0,
            min_label_confidence: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tuab" => Ok(Self::tuab()),
            "autotuab" => Ok(Self::autotuab()),
            "permissive" | "none" => Ok(Self::permissive()),
            other => Err(Error::Config(format!("unknown inclusion preset `{other}`"))),
        }
    }

    pub fn admits(&self, record: &RecordDescriptor) -> bool {
        record.duration_seconds >= self.min_duration
            && record.confidence() >= self.min_label_confidence
    }
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDescriptor {
    pub recording_id: String,
    pub session_id: String,
    pub patient_id: String,
    pub duration_seconds: f64,
    pub label: Label,
    /// Missing means a manual label (confidence 1.0).
    #[serde(default)]
    pub confidence: Option<f64>,
}

impl RecordDescriptor {
    pub fn confidence(&self) -> f64 {
        self.confidence.unwrap_or(1.0)
    }
}

impl From<&Recording> for RecordDescriptor {
    fn from(r: &Recording) -> Self {
        Self {
            recording_id: r.recording_id.clone(),
            session_id: r.session_id.clone(),
            patient_id: r.patient_id.clone(),
            duration_seconds: r.duration,
            label: r.label,
            confidence: Some(r.label_confidence),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub recordings: usize,
    pub sessions: usize,
    pub patients: usize,
    pub normal: usize,
    pub abnormal: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub sessions: Vec<Session>,
    pub inclusion_policy: InclusionPolicy,
    /// Descriptors rejected by the policy during construction.
    pub excluded: usize,
}

impl Corpus {
    pub fn recordings(&self) -> impl Iterator<Item = &Recording> {
        self.sessions.iter().flat_map(|s| s.recordings.iter())
    }

    pub fn n_recordings(&self) -> usize {
        self.sessions.iter().map(|s| s.recordings.len()).sum()
    }

    pub fn counts(&self) -> CorpusCounts {
        let patients: HashSet<&str> = self.sessions.iter().map(|s| s.patient_id.as_str()).collect();
        let abnormal = self.recordings().filter(|r| r.label == Label::Abnormal).count();
        let recordings = self.n_recordings();
        CorpusCounts {
            recordings,
            sessions: self.sessions.len(),
            patients: patients.len(),
            normal: recordings - abnormal,
            abnormal,
            excluded: self.excluded,
        }
    }

    pub fn to_descriptors(&self) -> Vec<RecordDescriptor> {
        self.recordings().map(RecordDescriptor::from).collect()
    }

    pub fn recording(&self, id: &str) -> Option<&Recording> {
        self.recordings().find(|r| r.recording_id == id)
    }

    /// The sub-corpus whose recordings are in `ids`; sessions left empty are
    /// dropped.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Corpus {
        let sessions = self
            .sessions
            .iter()
            .filter_map(|s| {
                let recordings: Vec<Recording> = s
                    .recordings
                    .iter()
                    .filter(|r| ids.contains(&r.recording_id))
                    .cloned()
                    .collect();
                (!recordings.is_empty()).then(|| Session {
                    recordings,
                    ..s.clone()
                })
            })
            .collect();
        Corpus {
            name: self.name.clone(),
            sessions,
            inclusion_policy: self.inclusion_policy,
            excluded: 0,
        }
    }
}

/// Builds a corpus from manifest rows. Rows failing `policy` are dropped;
/// sessions are assembled in order of first appearance.
pub fn build_corpus(name: &str, records: &[RecordDescriptor], policy: InclusionPolicy) -> Result<Corpus> {
    let mut seen: HashSet<&str> = HashSet::with_capacity(records.len());
    let mut order: Vec<&str> = Vec::new();
    let mut by_session: HashMap<&str, Session> = HashMap::new();
    let mut excluded = 0;

    for rec in records {
        if rec.recording_id.is_empty() || rec.session_id.is_empty() || rec.patient_id.is_empty() {
            return Err(Error::Invalid(format!(
                "record `{}` has an empty identifier",
                rec.recording_id
            )));
        }
        if !(rec.duration_seconds > 0.0) || !rec.duration_seconds.is_finite() {
            return Err(Error::Invalid(format!(
                "record `{}` has non-positive duration {}",
                rec.recording_id, rec.duration_seconds
            )));
        }
        let confidence = rec.confidence();
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Invalid(format!(
                "record `{}` has confidence {confidence} outside [0, 1]",
                rec.recording_id
            )));
        }
        if !seen.insert(rec.recording_id.as_str()) {
            return Err(Error::DuplicateRecording(rec.recording_id.clone()));
        }
        if !policy.admits(rec) {
            excluded += 1;
            continue;
        }
        let recording = Recording {
            recording_id: rec.recording_id.clone(),
            session_id: rec.session_id.clone(),
            patient_id: rec.patient_id.clone(),
            duration: rec.duration_seconds,
            label: rec.label,
            label_confidence: confidence,
        };
        match by_session.get_mut(rec.session_id.as_str()) {
            Some(session) => {
                if session.patient_id != rec.patient_id {
                    return Err(Error::SessionPatientMismatch {
                        session: rec.session_id.clone(),
                        first: session.patient_id.clone(),
                        second: rec.patient_id.clone(),
                    });
                }
                if session.label != rec.label {
                    return Err(Error::SessionLabelMismatch {
                        session: rec.session_id.clone(),
                    });
                }
                session.recordings.push(recording);
            }
            None => {
                order.push(rec.session_id.as_str());
                by_session.insert(
                    rec.session_id.as_str(),
                    Session {
                        session_id: rec.session_id.clone(),
                        patient_id: rec.patient_id.clone(),
                        label: rec.label,
                        recordings: vec![recording],
                    },
                );
            }
        }
    }

    let sessions = order
        .into_iter()
        .map(|id| by_session.remove(id).expect("session recorded in order"))
        .collect();
    Ok(Corpus {
        name: name.to_string(),
        sessions,
        inclusion_policy: policy,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
    /// Realized test fraction of recordings.
    pub ratio: f64,
}

impl Split {
    pub fn patient_overlap<'a>(&self, corpus: &'a Corpus) -> BTreeSet<&'a str> {
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for r in corpus.recordings() {
            if self.train.contains(&r.recording_id) {
                train.insert(r.patient_id.as_str());
            } else if self.test.contains(&r.recording_id) {
                test.insert(r.patient_id.as_str());
            }
        }
        train.intersection(&test).copied().collect()
    }
}

/// Shuffles patients with `seed` and moves them to the test side until the
/// test side holds at least `test_fraction` of all recordings. At least one
/// patient always stays on the train side.
pub fn split_by_patient(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut per_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in corpus.recordings() {
        per_patient
            .entry(r.patient_id.as_str())
            .or_default()
            .push(r.recording_id.as_str());
    }
    if per_patient.is_empty() {
        return Err(Error::Invalid("cannot split an empty corpus".into()));
    }
    if per_patient.len() == 1 {
        return Err(Error::SinglePatient);
    }

    let mut patients: Vec<&str> = per_patient.keys().copied().collect();
    patients.shuffle(&mut rng::rng_for(seed, "split_by_patient"));

    let total = corpus.n_recordings();
    let target = test_fraction * total as f64;
    let mut test = BTreeSet::new();
    let mut taken = 0usize;
    for patient in &patients[..patients.len() - 1] {
        if taken as f64 >= target {
            break;
        }
        for id in &per_patient[patient] {
            test.insert(id.to_string());
        }
        taken += per_patient[patient].len();
    }
    let train = corpus
        .recordings()
        .filter(|r| !test.contains(&r.recording_id))
        .map(|r| r.recording_id.clone())
        .collect();
    Ok(Split {
        train,
        test,
        ratio: taken as f64 / total as f64,
    })
}

/// Assigns each sample to one of `k` folds so that samples sharing a group
/// land in the same fold. Groups are shuffled by `seed` and each goes to the
/// currently smallest fold.
pub fn group_folds(groups: &[&str], k: usize, seed: u64) -> Vec<usize> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for g in groups {
        *sizes.entry(g).or_default() += 1;
    }
    let mut unique: Vec<&str> = sizes.keys().copied().collect();
    unique.shuffle(&mut rng::rng_for(seed, "group_folds"));
    let mut load = vec![0usize; k.max(1)];
    let mut fold_of: HashMap<&str, usize> = HashMap::with_capacity(unique.len());
    for g in unique {
        let (fold, _) = load
            .iter()
            .enumerate()
            .min_by_key(|&(i, &l)| (l, i))
            .expect("at least one fold");
        load[fold] += sizes[g];
        fold_of.insert(g, fold);
    }
    groups.iter().map(|g| fold_of[g]).collect()
}

/// Per-class loss weights `a_i = max(n_normal, n_abnormal) / n_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub a_normal: f64,
    pub a_abnormal: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            n_normal: 0,
            n_abnormal: 0,
            a_normal: 1.0,
            a_abnormal: 1.0,
        }
    }

    pub fn weight(&self, label: Label) -> f64 {
        match label {
            Label::Normal => self.a_normal,
            Label::Abnormal => self.a_abnormal,
        }
    }
}

pub fn class_weights(labels: &[Label]) -> Result<ClassWeights> {
    let n_abnormal = labels.iter().filter(|&&l| l == Label::Abnormal).count();
    let n_normal = labels.len() - n_abnormal;
    if n_normal == 0 {
        return Err(Error::MissingClass(Label::Normal));
    }
    if n_abnormal == 0 {
        return Err(Error::MissingClass(Label::Abnormal));
    }
    let max = n_normal.max(n_abnormal) as f64;
    Ok(ClassWeights {
        n_normal,
        n_abnormal,
        a_normal: max / n_normal as f64,
        a_abnormal: max / n_abnormal as f64,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<RecordDescriptor>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

pub fn write_manifest(path: &Path, records: &[RecordDescriptor]) -> Result<()> {
    crate::io::write_csv(path, records)
}
