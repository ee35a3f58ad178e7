//! Window segmentation of a recording timeline.

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Recording};
use crate::error::{Error, Result};

/// Window length and stride, plus the head trim and usable-content cap
/// applied before windowing. All values in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowingConfig {
    pub window_length: f64,
    pub stride: f64,
    pub head_trim: f64,
    pub max_used: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            window_length: 60.0,
            stride: 60.0,
            head_trim: 60.0,
            max_used: 1200.0,
        }
    }
}

impl WindowingConfig {
    pub fn new(window_length: f64, stride: f64) -> Self {
        Self {
            window_length,
            stride,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.window_length, self.stride, self.head_trim, self.max_used]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("windowing values must be finite".into()));
        }
        if !(self.stride > 0.0 && self.stride <= self.window_length) {
            return Err(Error::Config(format!(
                "stride {} must satisfy 0 < stride <= window length {}",
                self.stride, self.window_length
            )));
        }
        if self.head_trim < 0.0 {
            return Err(Error::Config("head trim must be non-negative".into()));
        }
        if self.max_used < self.window_length {
            return Err(Error::Config(format!(
                "max used {} is shorter than the window length {}",
                self.max_used, self.window_length
            )));
        }
        Ok(())
    }

    /// Usable seconds after trimming and capping.
    pub fn usable(&self, duration: f64) -> f64 {
        (duration - self.head_trim).min(self.max_used).max(0.0)
    }

    pub fn count_for_usable(&self, usable: f64) -> usize {
        if usable < self.window_length {
            return 0;
        }
        // Tolerate representation error in ratios such as 1140 / 10.
        ((usable - self.window_length) / self.stride + 1e-9).floor() as usize + 1
    }

    pub fn window_count(&self, duration: f64) -> usize {
        self.count_for_usable(self.usable(duration))
    }

    /// Largest window count any recording can produce.
    pub fn max_windows(&self) -> usize {
        self.count_for_usable(self.max_used)
    }

    /// Shortest duration that yields at least one window.
    pub fn min_duration(&self) -> f64 {
        self.head_trim + self.window_length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowIndexing {
    pub recording_id: String,
    pub usable: f64,
    pub count: usize,
    /// Window start times in seconds from the start of the recording.
    pub offsets: Vec<f64>,
    /// Usable seconds after the end of the last window.
    pub discarded_tail: f64,
    /// Set when the recording is shorter than one window and is excluded.
    pub too_short: bool,
}

pub fn segment(recording: &Recording, config: &WindowingConfig) -> Result<WindowIndexing> {
    config.validate()?;
    let usable = config.usable(recording.duration);
    let count = config.count_for_usable(usable);
    let offsets: Vec<f64> = (0..count)
        .map(|k| config.head_trim + k as f64 * config.stride)
        .collect();
    let discarded_tail = match offsets.last() {
        Some(last) => (config.head_trim + usable - (last + config.window_length)).max(0.0),
        None => usable,
    };
    if count == 0 {
        log::warn!(
            "recording `{}` has {usable} usable seconds, shorter than one {} s window",
            recording.recording_id,
            config.window_length
        );
    }
    Ok(WindowIndexing {
        recording_id: recording.recording_id.clone(),
        usable,
        count,
        offsets,
        discarded_tail,
        too_short: count == 0,
    })
}

/// Every window takes the label of its recording.
pub fn inherit_labels(indexing: &WindowIndexing, label: Label) -> Vec<(usize, Label)> {
    (0..indexing.count).map(|k| (k, label)).collect()
}
