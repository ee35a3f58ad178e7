use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{OutputsMap, WindowOutput, WindowOutputs};
use crate::corpus::{build_corpus, Corpus, InclusionPolicy, Label, RecordDescriptor};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};
use crate::windower::WindowingConfig;

/// A scalar distribution for durations and per-session recording counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Fixed { value: f64 },
    Uniform { min: f64, max: f64 },
    Choice { values: Vec<f64> },
}

impl Distribution {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Distribution::Fixed { value } => *value,
            Distribution::Uniform { min, max } => {
                if max > min {
                    rng.random_range(*min..*max)
                } else {
                    *min
                }
            }
            Distribution::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }

    pub fn sample_count(&self, rng: &mut Rng) -> usize {
        match self {
            Distribution::Uniform { min, max } => {
                let lo = min.round().max(1.0) as usize;
                let hi = max.round().max(lo as f64) as usize;
                rng.random_range(lo..=hi)
            }
            _ => self.sample(rng).round().max(1.0) as usize,
        }
    }

    /// Values the distribution can produce, as a closed range for `Uniform`.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Distribution::Fixed { value } => (*value, *value),
            Distribution::Uniform { min, max } => (*min, *max),
            Distribution::Choice { values } => values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match self {
            Distribution::Fixed { value } => value.is_finite(),
            Distribution::Uniform { min, max } => min.is_finite() && max.is_finite() && min <= max,
            Distribution::Choice { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {what} distribution {self:?}")))
        }
    }
}

/// Parameters of the synthetic corpus and of the simulated per-window
/// classifier channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub recordings_per_session: Distribution,
    /// Seconds.
    pub duration: Distribution,
    pub prevalence_abnormal: f64,
    /// Probability that a window of an abnormal recording carries an event.
    pub event_density: f64,
    /// Probability that an event window gets the elevated response.
    pub window_tpr: f64,
    /// Probability that a clean window gets the elevated response.
    pub window_fpr: f64,
    pub response_noise: f64,
    pub response_high: f64,
    pub response_low: f64,
    /// Place events as one contiguous run instead of independently.
    pub bursty: bool,
    /// Emit feature vectors of this dimension (two logits plus nuisance).
    pub feature_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            recordings_per_session: Distribution::Fixed { value: 1.0 },
            duration: Distribution::Uniform {
                min: 1200.0,
                max: 1500.0,
            },
            prevalence_abnormal: 0.5,
            event_density: 0.15,
            window_tpr: 0.95,
            window_fpr: 0.05,
            response_noise: 0.1,
            response_high: 0.8,
            response_low: 0.2,
            bursty: false,
            feature_dim: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fractions = [
            ("prevalence_abnormal", self.prevalence_abnormal),
            ("event_density", self.event_density),
            ("window_tpr", self.window_tpr),
            ("window_fpr", self.window_fpr),
            ("response_high", self.response_high),
            ("response_low", self.response_low),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.event_density > 0.0) {
            return Err(Error::Config("event_density must be positive".into()));
        }
        if !(self.response_noise >= 0.0) || !self.response_noise.is_finite() {
            return Err(Error::Config("response_noise must be a finite non-negative value".into()));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.response_high) || !open(self.response_low) {
            return Err(Error::Config("response levels must lie strictly inside (0, 1)".into()));
        }
        if matches!(self.feature_dim, Some(d) if d < 2) {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        self.duration.validate("duration")?;
        self.recordings_per_session.validate("recordings_per_session")?;
        Ok(())
    }
}

/// Simulator output: the corpus, per-recording first-stage outputs, and the
/// planted event windows.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub outputs: OutputsMap,
    pub events: BTreeMap<String, Vec<bool>>,
}

/// Length of the contiguous event run in bursty mode.
pub(crate) fn burst_length(windows: usize, density: f64) -> usize {
    ((density * windows as f64).round() as usize).clamp(1, windows.max(1))
}

struct SimRecording {
    descriptor: RecordDescriptor,
    outputs: WindowOutputs,
    events: Vec<bool>,
}

pub fn simulate(config: &SynthConfig, windowing: &WindowingConfig) -> Result<SyntheticData> {
    config.validate()?;
    windowing.validate()?;
    let (_, longest) = config.duration.support();
    if longest < windowing.min_duration() {
        return Err(Error::Config(format!(
            "no duration in {:?} reaches the {} s needed for one window",
            config.duration,
            windowing.min_duration()
        )));
    }

    let patients = par::try_map_range(config.n_patients, |i| simulate_patient(config, windowing, i))?;

    let mut descriptors = Vec::new();
    let mut outputs = OutputsMap::new();
    let mut events = BTreeMap::new();
    for rec in patients.into_iter().flatten() {
        events.insert(rec.descriptor.recording_id.clone(), rec.events);
        outputs.insert(rec.descriptor.recording_id.clone(), rec.outputs);
        descriptors.push(rec.descriptor);
    }
    let corpus = build_corpus("synthetic", &descriptors, InclusionPolicy::permissive())?;
    Ok(SyntheticData {
        corpus,
        outputs,
        events,
    })
}

fn simulate_patient(config: &SynthConfig, windowing: &WindowingConfig, index: usize) -> Result<Vec<SimRecording>> {
    let patient_id = format!("p{index:05}");
    let session_id = format!("{patient_id}_s0");
    let mut rng = rng::rng_for(config.seed, &patient_id);
    let label = if rng.random::<f64>() < config.prevalence_abnormal {
        Label::Abnormal
    } else {
        Label::Normal
    };
    let n_recordings = config.recordings_per_session.sample_count(&mut rng);

    (0..n_recordings)
        .map(|r| {
            let recording_id = format!("{session_id}_r{r}");
            let duration = sample_duration(config, windowing, &mut rng)?;
            let n_windows = windowing.window_count(duration);
            let mut rec_rng = rng::rng_for(config.seed, &recording_id);
            let events = place_events(config, label, n_windows, &mut rec_rng);
            let windows = events
                .iter()
                .map(|&event| respond(config, event, &mut rec_rng))
                .collect();
            Ok(SimRecording {
                descriptor: RecordDescriptor {
                    recording_id: recording_id.clone(),
                    session_id: session_id.clone(),
                    patient_id: patient_id.clone(),
                    duration_seconds: duration,
                    label,
                    confidence: Some(1.0),
                },
                outputs: WindowOutputs {
                    recording_id,
                    windows,
                },
                events,
            })
        })
        .collect()
}

fn sample_duration(config: &SynthConfig, windowing: &WindowingConfig, rng: &mut Rng) -> Result<f64> {
    for _ in 0..10_000 {
        let d = config.duration.sample(rng);
        if windowing.window_count(d) > 0 {
            return Ok(d);
        }
    }
    Err(Error::Config(format!(
        "duration distribution {:?} almost never yields a window",
        config.duration
    )))
}

fn place_events(config: &SynthConfig, label: Label, n: usize, rng: &mut Rng) -> Vec<bool> {
    if label == Label::Normal || n == 0 {
        return vec![false; n];
    }
    if config.bursty {
        let len = burst_length(n, config.event_density);
        let start = rng.random_range(0..=n - len);
        return (0..n).map(|j| j >= start && j < start + len).collect();
    }
    loop {
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < config.event_density).collect();
        if events.iter().any(|&e| e) {
            return events;
        }
    }
}

fn respond(config: &SynthConfig, event: bool, rng: &mut Rng) -> WindowOutput {
    let rate = if event { config.window_tpr } else { config.window_fpr };
    let elevated = rng.random::<f64>() < rate;
    let base = if elevated { config.response_high } else { config.response_low };
    let p = if config.response_noise > 0.0 {
        // Gaussian noise truncated so the response stays inside (0, 1).
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let p = base + config.response_noise * z;
            if p > 0.0 && p < 1.0 {
                break p;
            }
        }
    } else {
        base
    };
    let mut out = WindowOutput::from_probability(p);
    if let Some(d) = config.feature_dim {
        let mut features = Vec::with_capacity(d);
        features.push(out.logit_normal);
        features.push(out.logit_abnormal);
        features.extend((2..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        out.features = Some(features);
    }
    out
}
