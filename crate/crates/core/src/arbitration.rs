//! Second-stage arbitration (windows -> recording) and third-stage
//! arbitration (recordings -> session).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label};
use crate::encodings::encode;
use crate::error::{Error, Result};
use crate::firststage::WindowOutputs;
use crate::meta_ann::{predict_ann, AnnModel};
use crate::meta_gbt::{predict_gbt, GbtModel};

/// Threshold decision: `p >= 0.5` is Abnormal, so an exact tie falls on the
/// side of the costlier miss.
pub fn decide(p: f64) -> Label {
    if p >= 0.5 {
        Label::Abnormal
    } else {
        Label::Normal
    }
}

#[derive(Debug, Clone)]
pub enum ArbitrationMethod {
    /// Every window is its own decision; see [`window_decisions`].
    NoArbitration,
    Mean,
    Geomean,
    MetaAnn(Box<AnnModel>),
    MetaGbt(Box<GbtModel>),
}

impl ArbitrationMethod {
    pub fn name(&self) -> String {
        match self {
            ArbitrationMethod::NoArbitration => "no_arbitration".into(),
            ArbitrationMethod::Mean => "mean".into(),
            ArbitrationMethod::Geomean => "geomean".into(),
            ArbitrationMethod::MetaAnn(m) => format!("ann:{}", m.encoding_spec.kind.as_str()),
            ArbitrationMethod::MetaGbt(m) => format!("gbt:{}", m.encoding_spec.kind.as_str()),
        }
    }
}

pub fn mean(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Invalid("mean of zero probabilities".into()));
    }
    if all_equal(ps) {
        return Ok(ps[0]);
    }
    Ok(ps.iter().sum::<f64>() / ps.len() as f64)
}

/// Geometric mean, computed in the log domain. Any zero gives 0. The result
/// never exceeds the arithmetic mean, and equals it only when all inputs do.
pub fn geomean(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Invalid("geomean of zero probabilities".into()));
    }
    if all_equal(ps) {
        return Ok(ps[0]);
    }
    if ps.contains(&0.0) {
        return Ok(0.0);
    }
    let geo = (ps.iter().map(|p| p.ln()).sum::<f64>() / ps.len() as f64).exp();
    let am = mean(ps)?;
    // Rounding in exp/ln can land a hair above the true value.
    Ok(if geo < am { geo } else { f64::from_bits(am.to_bits() - 1) })
}

fn all_equal(ps: &[f64]) -> bool {
    ps.iter().all(|&p| p == ps[0])
}

fn check_probabilities(ps: &[f64], id: &str) -> Result<()> {
    match ps.iter().position(|p| !(0.0..=1.0).contains(p)) {
        Some(index) => Err(Error::BadWindow {
            recording: id.to_string(),
            index,
            reason: format!("probability {} outside [0, 1]", ps[index]),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingDecision {
    pub recording_id: String,
    pub p_abnormal: f64,
    pub label: Label,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDecision {
    pub recording_id: String,
    pub window_index: usize,
    pub p_abnormal: f64,
    pub label: Label,
}

/// Per-window decisions, the unit of evaluation for `NoArbitration`.
pub fn window_decisions(outputs: &WindowOutputs) -> Vec<WindowDecision> {
    outputs
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| WindowDecision {
            recording_id: outputs.recording_id.clone(),
            window_index: i,
            p_abnormal: w.p_abnormal,
            label: decide(w.p_abnormal),
        })
        .collect()
}

pub fn arbitrate_recording(outputs: &WindowOutputs, method: &ArbitrationMethod) -> Result<RecordingDecision> {
    let p = match method {
        ArbitrationMethod::NoArbitration => {
            return Err(Error::Unsupported(
                "no_arbitration has no recording-level output; evaluate window decisions instead".into(),
            ))
        }
        ArbitrationMethod::Mean | ArbitrationMethod::Geomean => {
            let ps = outputs.probabilities();
            if ps.is_empty() {
                return Err(Error::Invalid(format!("recording {} has no windows to arbitrate", outputs.recording_id)));
            }
            check_probabilities(&ps, &outputs.recording_id)?;
            if matches!(method, ArbitrationMethod::Mean) {
                mean(&ps)?
            } else {
                geomean(&ps)?
            }
        }
        ArbitrationMethod::MetaAnn(model) => predict_ann(model, &encode(outputs, &model.encoding_spec)?)?.1,
        ArbitrationMethod::MetaGbt(model) => predict_gbt(model, &encode(outputs, &model.encoding_spec)?)?,
    };
    Ok(RecordingDecision {
        recording_id: outputs.recording_id.clone(),
        p_abnormal: p,
        label: decide(p),
        method: method.name(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionMethod {
    /// Identity; only defined for single-recording sessions.
    None,
    Mean,
    Geomean,
}

impl SessionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionMethod::None => "none",
            SessionMethod::Mean => "mean",
            SessionMethod::Geomean => "geomean",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(SessionMethod::None),
            "mean" => Ok(SessionMethod::Mean),
            "geomean" => Ok(SessionMethod::Geomean),
            other => Err(Error::Config(format!("unknown session method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDecision {
    pub session_id: String,
    pub p_abnormal: f64,
    pub label: Label,
    pub method: SessionMethod,
}

pub fn arbitrate_session(session_id: &str, decisions: &[&RecordingDecision], method: SessionMethod) -> Result<SessionDecision> {
    let ps: Vec<f64> = decisions.iter().map(|d| d.p_abnormal).collect();
    if ps.is_empty() {
        return Err(Error::Invalid(format!("session {session_id} has no recording decisions")));
    }
    let p = match method {
        SessionMethod::None if ps.len() == 1 => ps[0],
        SessionMethod::None => {
            return Err(Error::Unsupported(format!(
                "session {session_id} has {} recordings; `none` applies to single recordings only",
                ps.len()
            )))
        }
        SessionMethod::Mean => mean(&ps)?,
        SessionMethod::Geomean => geomean(&ps)?,
    };
    Ok(SessionDecision {
        session_id: session_id.to_string(),
        p_abnormal: p,
        label: decide(p),
        method,
    })
}

/// Session decisions for every session in `corpus`, from recording decisions
/// keyed by recording id.
pub fn arbitrate_sessions(corpus: &Corpus, decisions: &BTreeMap<String, RecordingDecision>, method: SessionMethod) -> Result<Vec<SessionDecision>> {
    corpus
        .sessions
        .iter()
        .map(|s| {
            let members = s
                .recordings
                .iter()
                .map(|r| {
                    decisions
                        .get(&r.recording_id)
                        .ok_or_else(|| Error::Invalid(format!("no decision for recording {}", r.recording_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            arbitrate_session(&s.session_id, &members, method)
        })
        .collect()
}

/// Every recording inherits its session's label, in corpus order.
pub fn session_to_recording_labels(sessions: &[SessionDecision], corpus: &Corpus) -> Result<Vec<(String, Label)>> {
    let by_id: BTreeMap<&str, &SessionDecision> = sessions.iter().map(|s| (s.session_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(corpus.n_recordings());
    for s in &corpus.sessions {
        let d = by_id
            .get(s.session_id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no decision for session {}", s.session_id)))?;
        out.extend(s.recordings.iter().map(|r| (r.recording_id.clone(), d.label)));
    }
    Ok(out)
}

#[derive(Serialize)]
struct DecisionRow<'a> {
    id: &'a str,
    p_abnormal: f64,
    label: Label,
    method: &'a str,
}

pub fn write_recording_decisions(path: &Path, decisions: &[RecordingDecision]) -> Result<()> {
    let rows: Vec<DecisionRow> = decisions
        .iter()
        .map(|d| DecisionRow {
            id: &d.recording_id,
            p_abnormal: d.p_abnormal,
            label: d.label,
            method: &d.method,
        })
        .collect();
    crate::io::write_csv(path, &rows)
}

#[derive(Deserialize)]
struct OwnedDecisionRow {
    id: String,
    p_abnormal: f64,
    label: Label,
    method: String,
}

/// Reads a table written by [`write_recording_decisions`].
pub fn read_recording_decisions(path: &Path) -> Result<Vec<RecordingDecision>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|row| {
            let r: OwnedDecisionRow = row.map_err(|e| Error::csv(path, e))?;
            Ok(RecordingDecision {
                recording_id: r.id,
                p_abnormal: r.p_abnormal,
                label: r.label,
                method: r.method,
            })
        })
        .collect()
}

pub fn write_session_decisions(path: &Path, decisions: &[SessionDecision]) -> Result<()> {
    let rows: Vec<DecisionRow> = decisions
        .iter()
        .map(|d| DecisionRow {
            id: &d.session_id,
            p_abnormal: d.p_abnormal,
            label: d.label,
            method: d.method.as_str(),
        })
        .collect();
    crate::io::write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, InclusionPolicy, RecordDescriptor};
    use crate::encodings::{EncodingKind, EncodingSpec};
    use crate::meta_gbt::{GbtConfig, TreeNode};
    use proptest::prelude::*;

    fn rec(ps: &[f64]) -> WindowOutputs {
        WindowOutputs::from_probabilities("r", ps)
    }

    #[test]
    fn baseline_examples() {
        let d = arbitrate_recording(&rec(&[0.9, 0.1]), &ArbitrationMethod::Mean).unwrap();
        assert_eq!((d.p_abnormal, d.label), (0.5, Label::Abnormal));
        let g = arbitrate_recording(&rec(&[0.5, 0.125]), &ArbitrationMethod::Geomean).unwrap();
        assert!((g.p_abnormal - 0.25).abs() < 1e-15);
        let z = arbitrate_recording(&rec(&[0.0, 0.9, 0.8]), &ArbitrationMethod::Geomean).unwrap();
        assert_eq!(z.p_abnormal, 0.0);
        assert!(arbitrate_recording(&rec(&[]), &ArbitrationMethod::Mean).is_err());
        assert!(arbitrate_recording(&rec(&[0.4]), &ArbitrationMethod::NoArbitration).is_err());
    }

    fn d(p: f64) -> RecordingDecision {
        RecordingDecision {
            recording_id: "r".into(),
            p_abnormal: p,
            label: decide(p),
            method: "mean".into(),
        }
    }

    #[test]
    fn session_examples() {
        let a = d(0.9);
        let b = d(0.1);
        assert_eq!(arbitrate_session("s", &[&a, &b], SessionMethod::Mean).unwrap().p_abnormal, 0.5);
        let g = arbitrate_session("s", &[&a, &b], SessionMethod::Geomean).unwrap().p_abnormal;
        assert!((g - 0.3).abs() < 1e-15);
        assert!(arbitrate_session("s", &[], SessionMethod::Mean).is_err());
        assert!(arbitrate_session("s", &[&a, &b], SessionMethod::None).is_err());
        let c = d(0.37);
        for m in [SessionMethod::None, SessionMethod::Mean, SessionMethod::Geomean] {
            let s = arbitrate_session("s", &[&c], m).unwrap();
            assert_eq!((s.p_abnormal, s.label), (c.p_abnormal, c.label));
            let same = arbitrate_session("s", &[&c, &c, &c], SessionMethod::Geomean).unwrap();
            assert_eq!(same.p_abnormal, 0.37);
        }
    }

    #[test]
    fn recordings_inherit_session_label() {
        let records: Vec<RecordDescriptor> = (0..4)
            .map(|i| RecordDescriptor {
                recording_id: format!("r{i}"),
                session_id: if i < 3 { "s0".into() } else { "s1".into() },
                patient_id: if i < 3 { "p0".into() } else { "p1".into() },
                duration_seconds: 1260.0,
                label: Label::Abnormal,
                confidence: None,
            })
            .collect();
        let corpus = build_corpus("t", &records, InclusionPolicy::permissive()).unwrap();
        let decisions: BTreeMap<String, RecordingDecision> = [0.9, 0.2, 0.7, 0.1]
            .iter()
            .enumerate()
            .map(|(i, &p)| (format!("r{i}"), d(p)))
            .collect();
        let sessions = arbitrate_sessions(&corpus, &decisions, SessionMethod::Mean).unwrap();
        let labels = session_to_recording_labels(&sessions, &corpus).unwrap();
        assert_eq!(labels.len(), 4);
        assert!(labels[..3].iter().all(|(_, l)| *l == Label::Abnormal));
        assert_eq!(labels[3].1, Label::Normal);
        assert!(session_to_recording_labels(&sessions[..1], &corpus).is_err());
    }

    #[test]
    fn raw_meta_model_is_order_sensitive() {
        let spec = EncodingSpec::new(EncodingKind::RawProb, 2);
        let model = GbtModel {
            trees: vec![TreeNode::Split {
                feature: 0,
                threshold: 0.5,
                left: Box::new(TreeNode::Leaf { value: -3.0 }),
                right: Box::new(TreeNode::Leaf { value: 3.0 }),
            }],
            base_score: 0.0,
            encoding_spec: spec,
            config: GbtConfig {
                learning_rate: 1.0,
                ..GbtConfig::default()
            },
            input_len: 2,
            degenerate: false,
            training_loss: vec![],
        };
        let m = ArbitrationMethod::MetaGbt(Box::new(model));
        let a = arbitrate_recording(&rec(&[0.9, 0.1]), &m).unwrap();
        let b = arbitrate_recording(&rec(&[0.1, 0.9]), &m).unwrap();
        assert_ne!(a.label, b.label);
    }

    proptest! {
        #[test]
        fn am_gm(ps in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let g = geomean(&ps).unwrap();
            let a = mean(&ps).unwrap();
            prop_assert!(g <= a);
            let equal = ps.iter().all(|&p| p == ps[0]);
            prop_assert_eq!(g == a, equal);
        }

        #[test]
        fn baselines_ignore_window_order(ps in prop::collection::vec(0.001f64..=1.0, 1..30), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = ps.clone();
            shuffled.shuffle(&mut crate::rng::rng_from(seed));
            let a = mean(&ps).unwrap();
            let b = mean(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let a = geomean(&ps).unwrap();
            let b = geomean(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn monotone_calibration_keeps_labels(p in 0.0f64..=1.0, k in 0.5f64..4.0) {
            // Logit scaling: strictly increasing and fixes 0.5.
            let calibrated = if p == 0.0 || p == 1.0 { p } else {
                let l = (p / (1.0 - p)).ln();
                1.0 / (1.0 + (-k * l).exp())
            };
            prop_assert_eq!(decide(p), decide(calibrated));
        }
    }

    #[test]
    fn decisions_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds: Vec<RecordingDecision> = [0.1, 0.5, 1.0 / 3.0]
            .iter()
            .enumerate()
            .map(|(i, &p)| RecordingDecision {
                recording_id: format!("r{i}"),
                p_abnormal: p,
                label: decide(p),
                method: "mean".into(),
            })
            .collect();
        write_recording_decisions(&path, &ds).unwrap();
        assert_eq!(read_recording_decisions(&path).unwrap(), ds);
    }
}
