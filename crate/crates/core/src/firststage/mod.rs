//! Per-window first-stage outputs: the data type, a synthetic simulator with
//! a known generative model, a file reader for outputs of an external model,
//! and the exact Bayes posterior under the simulator's model.

mod ingest;
mod oracle;
mod simulate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_outputs, write_outputs};
pub use oracle::{bayes_optimal_arbiter, bayes_optimal_session, ResponseChannel};
pub use simulate::{simulate, Distribution, SynthConfig, SyntheticData};

/// One window's first-stage result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutput {
    pub p_abnormal: f64,
    pub logit_normal: f64,
    pub logit_abnormal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl WindowOutput {
    /// Output with logits `(0, ln(p / (1 - p)))`, consistent with `p` under
    /// softmax.
    pub fn from_probability(p: f64) -> Self {
        Self {
            p_abnormal: p,
            logit_normal: 0.0,
            logit_abnormal: (p / (1.0 - p)).ln(),
            features: None,
        }
    }

    /// Softmax probability of the abnormal class from the stored logits.
    pub fn softmax_abnormal(&self) -> f64 {
        softmax_abnormal(self.logit_normal, self.logit_abnormal)
    }
}

pub fn softmax_abnormal(logit_normal: f64, logit_abnormal: f64) -> f64 {
    let m = logit_normal.max(logit_abnormal);
    let en = (logit_normal - m).exp();
    let ea = (logit_abnormal - m).exp();
    ea / (en + ea)
}

/// Ordered first-stage outputs for one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowOutputs {
    pub recording_id: String,
    pub windows: Vec<WindowOutput>,
}

impl WindowOutputs {
    pub fn from_probabilities(recording_id: impl Into<String>, probs: &[f64]) -> Self {
        Self {
            recording_id: recording_id.into(),
            windows: probs.iter().map(|&p| WindowOutput::from_probability(p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.p_abnormal).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.windows
            .first()
            .and_then(|w| w.features.as_ref())
            .map(Vec::len)
    }
}

pub type OutputsMap = BTreeMap<String, WindowOutputs>;
