//! Confusion-matrix metrics and the plot-ready tables built on them.
//! Abnormal is the positive class throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::arbitration::decide;
use crate::corpus::{Corpus, Label};
use crate::error::{Error, Result};
use crate::firststage::WindowOutputs;
use crate::windower::WindowingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Window,
    Recording,
    Session,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Window => "window",
            Granularity::Recording => "recording",
            Granularity::Session => "session",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Abnormal, Label::Abnormal) => self.tp += 1,
            (Label::Abnormal, Label::Normal) => self.fp += 1,
            (Label::Normal, Label::Normal) => self.tn += 1,
            (Label::Normal, Label::Abnormal) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub granularity: Granularity,
    pub matrix: ConfusionMatrix,
    pub accuracy: f64,
    /// Absent when there are no abnormal truths.
    pub sensitivity: Option<f64>,
    /// Absent when there are no normal truths.
    pub specificity: Option<f64>,
    pub n: usize,
    pub subset_tag: Option<String>,
}

impl EvalReport {
    pub fn from_matrix(matrix: ConfusionMatrix, granularity: Granularity) -> Result<Self> {
        let accuracy = matrix
            .accuracy()
            .ok_or_else(|| Error::Invalid("cannot evaluate zero decisions".into()))?;
        Ok(Self {
            granularity,
            matrix,
            accuracy,
            sensitivity: matrix.sensitivity(),
            specificity: matrix.specificity(),
            n: matrix.total(),
            subset_tag: None,
        })
    }

    pub fn tagged(mut self, tag: impl Into<String>) -> Self {
        self.subset_tag = Some(tag.into());
        self
    }
}

pub fn evaluate(predicted: &[Label], truth: &[Label], granularity: Granularity) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        m.add(p, t);
    }
    EvalReport::from_matrix(m, granularity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionAccuracy {
    pub position: usize,
    pub n: usize,
    /// Absent when no recording reaches this position.
    pub accuracy: Option<f64>,
}

/// Accuracy of thresholded window outputs against the inherited recording
/// label, per window position `0..positions`.
pub fn per_position_accuracy(records: &[(&WindowOutputs, Label)], positions: usize) -> Vec<PositionAccuracy> {
    let mut n = vec![0usize; positions];
    let mut correct = vec![0usize; positions];
    for (outputs, truth) in records {
        for (k, w) in outputs.windows.iter().enumerate().take(positions) {
            n[k] += 1;
            correct[k] += usize::from(decide(w.p_abnormal) == *truth);
        }
    }
    (0..positions)
        .map(|k| PositionAccuracy {
            position: k,
            n: n[k],
            accuracy: ratio(correct[k], n[k]),
        })
        .collect()
}

/// Window-level report over every window, each judged against its
/// recording's label.
pub fn evaluate_windows(records: &[(&WindowOutputs, Label)]) -> Result<EvalReport> {
    let mut m = ConfusionMatrix::default();
    for (outputs, truth) in records {
        for w in &outputs.windows {
            m.add(decide(w.p_abnormal), *truth);
        }
    }
    EvalReport::from_matrix(m, Granularity::Window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBar {
    pub windows: usize,
    pub normal: usize,
    pub abnormal: usize,
}

/// Number of recordings per window count, split by label; only non-empty
/// bars, in increasing window count.
pub fn length_histogram(corpus: &Corpus, windowing: &WindowingConfig) -> Vec<LengthBar> {
    let mut bars: BTreeMap<usize, LengthBar> = BTreeMap::new();
    for r in corpus.recordings() {
        let windows = windowing.window_count(r.duration);
        let bar = bars.entry(windows).or_insert(LengthBar {
            windows,
            normal: 0,
            abnormal: 0,
        });
        match r.label {
            Label::Normal => bar.normal += 1,
            Label::Abnormal => bar.abnormal += 1,
        }
    }
    bars.into_values().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRecordingSubset {
    pub corpus: Corpus,
    pub retained_sessions: usize,
    pub total_sessions: usize,
}

impl MultiRecordingSubset {
    pub fn fraction_retained(&self) -> f64 {
        ratio(self.retained_sessions, self.total_sessions).unwrap_or(0.0)
    }
}

/// Sessions holding more than one recording.
pub fn multi_recording_subset(corpus: &Corpus) -> MultiRecordingSubset {
    let sessions: Vec<_> = corpus
        .sessions
        .iter()
        .filter(|s| s.recordings.len() > 1)
        .cloned()
        .collect();
    MultiRecordingSubset {
        retained_sessions: sessions.len(),
        total_sessions: corpus.sessions.len(),
        corpus: Corpus {
            name: format!("{}-multi", corpus.name),
            sessions,
            inclusion_policy: corpus.inclusion_policy,
            excluded: 0,
        },
    }
}
