//! Fixed-length meta-model inputs built from a recording's window outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::firststage::WindowOutputs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// One abnormal probability per window, padded to `max_windows`.
    RawProb,
    /// Normalized histogram of window probabilities.
    Histogram,
    /// `RawProb` followed by `Histogram`.
    Hybrid,
    /// Both logits per window, padded.
    Logits,
    /// Concatenated per-window feature vectors, padded.
    Features,
}

impl EncodingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::RawProb => "raw",
            EncodingKind::Histogram => "histogram",
            EncodingKind::Hybrid => "hybrid",
            EncodingKind::Logits => "logits",
            EncodingKind::Features => "features",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "raw" | "raw_prob" => Ok(EncodingKind::RawProb),
            "histogram" | "hist" => Ok(EncodingKind::Histogram),
            "hybrid" => Ok(EncodingKind::Hybrid),
            "logits" => Ok(EncodingKind::Logits),
            "features" => Ok(EncodingKind::Features),
            other => Err(Error::Config(format!("unknown encoding `{other}`"))),
        }
    }

    /// Whether the encoding depends on window order.
    pub fn is_positional(self) -> bool {
        !matches!(self, EncodingKind::Histogram)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub kind: EncodingKind,
    /// Longest window sequence the padded kinds accept.
    pub max_windows: usize,
    pub bins: usize,
    pub feature_dim: usize,
    /// Fill value for the padded tail of the probability block.
    #[serde(with = "crate::hexfloat")]
    pub pad_value: f64,
}

impl EncodingSpec {
    pub fn new(kind: EncodingKind, max_windows: usize) -> Self {
        Self {
            kind,
            max_windows,
            bins: 10,
            feature_dim: 0,
            pad_value: 0.0,
        }
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            EncodingKind::RawProb => self.max_windows,
            EncodingKind::Histogram => self.bins,
            EncodingKind::Hybrid => self.max_windows + self.bins,
            EncodingKind::Logits => 2 * self.max_windows,
            EncodingKind::Features => self.feature_dim * self.max_windows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, EncodingKind::Histogram | EncodingKind::Hybrid) && self.bins < 2 {
            return Err(Error::Config(format!("histogram needs at least 2 bins, got {}", self.bins)));
        }
        if self.kind == EncodingKind::Features && self.feature_dim == 0 {
            return Err(Error::MissingFeatures);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaInput {
    pub values: Vec<f64>,
}

impl MetaInput {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<f64>> for MetaInput {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// Bin of `p` among `bins` equal-width bins on [0, 1]; 1.0 falls in the last.
pub fn histogram_bin(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor() as usize).min(bins - 1)
}

fn histogram_into(out: &mut Vec<f64>, probs: impl Iterator<Item = f64> + Clone, bins: usize) {
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    for p in probs {
        counts[histogram_bin(p, bins)] += 1;
        n += 1;
    }
    if n == 0 {
        out.extend(std::iter::repeat_n(0.0, bins));
    } else {
        out.extend(counts.iter().map(|&c| c as f64 / n as f64));
    }
}

pub fn encode(outputs: &WindowOutputs, spec: &EncodingSpec) -> Result<MetaInput> {
    spec.validate()?;
    let n = outputs.len();
    let padded = !matches!(spec.kind, EncodingKind::Histogram);
    if padded && n > spec.max_windows {
        return Err(Error::TooManyWindows {
            count: n,
            max: spec.max_windows,
        });
    }
    let pad = spec.max_windows - n.min(spec.max_windows);
    let probs = outputs.windows.iter().map(|w| w.p_abnormal);
    let mut values = Vec::with_capacity(spec.input_len());
    match spec.kind {
        EncodingKind::RawProb => {
            values.extend(probs);
            values.extend(std::iter::repeat_n(spec.pad_value, pad));
        }
        EncodingKind::Histogram => histogram_into(&mut values, probs, spec.bins),
        EncodingKind::Hybrid => {
            values.extend(probs.clone());
            values.extend(std::iter::repeat_n(spec.pad_value, pad));
            histogram_into(&mut values, probs, spec.bins);
        }
        EncodingKind::Logits => {
            for w in &outputs.windows {
                values.push(w.logit_normal);
                values.push(w.logit_abnormal);
            }
            values.extend(std::iter::repeat_n(0.0, 2 * pad));
        }
        EncodingKind::Features => {
            for w in &outputs.windows {
                let f = w.features.as_ref().ok_or(Error::MissingFeatures)?;
                if f.len() != spec.feature_dim {
                    return Err(Error::LengthMismatch {
                        expected: spec.feature_dim,
                        got: f.len(),
                    });
                }
                values.extend_from_slice(f);
            }
            values.extend(std::iter::repeat_n(0.0, spec.feature_dim * pad));
        }
    }
    debug_assert_eq!(values.len(), spec.input_len());
    Ok(MetaInput { values })
}

/// Freezes an encoding from training outputs: `max_windows` is the longest
/// training recording, `feature_dim` the first feature dimension seen.
pub fn fit_spec<'a>(training: impl IntoIterator<Item = &'a WindowOutputs>, kind: EncodingKind, bins: usize) -> EncodingSpec {
    let mut max_windows = 0;
    let mut feature_dim = 0;
    for out in training {
        max_windows = max_windows.max(out.len());
        if feature_dim == 0 {
            feature_dim = out.feature_dim().unwrap_or(0);
        }
    }
    EncodingSpec {
        kind,
        max_windows,
        bins,
        feature_dim,
        pad_value: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firststage::{simulate, SynthConfig, WindowOutput};
    use crate::windower::WindowingConfig;

    fn outs(probs: &[f64]) -> WindowOutputs {
        WindowOutputs::from_probabilities("r", probs)
    }

    #[test]
    fn raw_pads_with_zero() {
        let spec = EncodingSpec::new(EncodingKind::RawProb, 4);
        assert_eq!(encode(&outs(&[0.5, 0.125]), &spec).unwrap().values, vec![0.5, 0.125, 0.0, 0.0]);
        let spec = EncodingSpec {
            pad_value: 0.5,
            ..spec
        };
        assert_eq!(encode(&outs(&[0.25]), &spec).unwrap().values, vec![0.25, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn histogram_edges() {
        let spec = EncodingSpec::new(EncodingKind::Histogram, 0);
        let v = encode(&outs(&[0.05, 0.05, 0.95, 0.95]), &spec).unwrap().values;
        let mut expected = vec![0.0; 10];
        expected[0] = 0.5;
        expected[9] = 0.5;
        assert_eq!(v, expected);
        assert_eq!(histogram_bin(1.0, 10), 9);
        assert_eq!(histogram_bin(0.0, 10), 0);
        assert_eq!(histogram_bin(0.1, 10), 1);
    }

    #[test]
    fn empty_histogram_is_zero() {
        let spec = EncodingSpec::new(EncodingKind::Histogram, 20);
        assert_eq!(encode(&outs(&[]), &spec).unwrap().values, vec![0.0; 10]);
    }

    #[test]
    fn logits_interleave() {
        let mut o = outs(&[0.5]);
        o.windows[0].logit_normal = 1.5;
        o.windows[0].logit_abnormal = 1.5;
        let spec = EncodingSpec::new(EncodingKind::Logits, 2);
        assert_eq!(encode(&o, &spec).unwrap().values, vec![1.5, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn features_required() {
        let spec = EncodingSpec {
            feature_dim: 3,
            ..EncodingSpec::new(EncodingKind::Features, 2)
        };
        assert!(matches!(encode(&outs(&[0.5]), &spec), Err(Error::MissingFeatures)));
        let with = WindowOutputs {
            recording_id: "r".into(),
            windows: vec![WindowOutput {
                features: Some(vec![1.0, 2.0, 3.0]),
                ..WindowOutput::from_probability(0.5)
            }],
        };
        assert_eq!(encode(&with, &spec).unwrap().values, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn stale_spec_is_rejected() {
        let spec = EncodingSpec::new(EncodingKind::RawProb, 2);
        assert!(matches!(encode(&outs(&[0.1, 0.2, 0.3]), &spec), Err(Error::TooManyWindows { count: 3, max: 2 })));
    }

    #[test]
    fn raw_is_order_sensitive() {
        let spec = EncodingSpec::new(EncodingKind::RawProb, 2);
        assert_ne!(encode(&outs(&[0.1, 0.9]), &spec).unwrap(), encode(&outs(&[0.9, 0.1]), &spec).unwrap());
        let spec = EncodingSpec::new(EncodingKind::Logits, 2);
        assert_ne!(encode(&outs(&[0.1, 0.9]), &spec).unwrap(), encode(&outs(&[0.9, 0.1]), &spec).unwrap());
    }

    #[test]
    fn fitted_max_windows() {
        let a = outs(&[0.1; 20]);
        let b = outs(&[0.1; 7]);
        assert_eq!(fit_spec([&a, &b], EncodingKind::RawProb, 10).max_windows, 20);

        let cfg = SynthConfig {
            n_patients: 300,
            seed: 1,
            ..SynthConfig::default()
        };
        let data = simulate(&cfg, &WindowingConfig::default()).unwrap();
        let t = fit_spec(data.outputs.values(), EncodingKind::RawProb, 10).max_windows;
        assert!(t == 19 || t == 20);

        let cfg = SynthConfig {
            n_patients: 5,
            duration: crate::firststage::Distribution::Fixed { value: 1260.0 },
            ..cfg
        };
        let data = simulate(&cfg, &WindowingConfig::new(60.0, 10.0)).unwrap();
        assert_eq!(fit_spec(data.outputs.values(), EncodingKind::RawProb, 10).max_windows, 115);
    }

    #[test]
    fn input_lengths() {
        let mut spec = EncodingSpec::new(EncodingKind::Hybrid, 20);
        assert_eq!(spec.input_len(), 30);
        spec.kind = EncodingKind::Logits;
        assert_eq!(spec.input_len(), 40);
        spec.kind = EncodingKind::Features;
        spec.feature_dim = 4;
        assert_eq!(spec.input_len(), 80);
    }
}
