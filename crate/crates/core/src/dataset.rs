//! Labeled meta-model training data and the validation carve shared by both
//! meta-model families.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::corpus::{ClassWeights, Label};
use crate::encodings::MetaInput;
use crate::error::{Error, Result};
use crate::rng;

/// Encoded inputs with labels and optional grouping ids (patients). Samples
/// sharing a group never straddle a train/validation boundary.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub inputs: &'a [MetaInput],
    pub labels: &'a [Label],
    pub groups: Option<&'a [String]>,
}

impl<'a> TrainingSet<'a> {
    pub fn new(inputs: &'a [MetaInput], labels: &'a [Label]) -> Self {
        Self {
            inputs,
            labels,
            groups: None,
        }
    }

    pub fn with_groups(mut self, groups: &'a [String]) -> Self {
        self.groups = Some(groups);
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Common input length; errors when inputs disagree or lengths mismatch.
    pub fn validate(&self, min_per_class: usize) -> Result<usize> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::LengthMismatch {
                expected: self.inputs.len(),
                got: self.labels.len(),
            });
        }
        if let Some(g) = self.groups {
            if g.len() != self.inputs.len() {
                return Err(Error::LengthMismatch {
                    expected: self.inputs.len(),
                    got: g.len(),
                });
            }
        }
        let abnormal = self.labels.iter().filter(|&&l| l == Label::Abnormal).count();
        let normal = self.labels.len() - abnormal;
        if normal < min_per_class {
            return Err(Error::MissingClass(Label::Normal));
        }
        if abnormal < min_per_class {
            return Err(Error::MissingClass(Label::Abnormal));
        }
        let width = self.inputs.first().map_or(0, MetaInput::len);
        if let Some(bad) = self.inputs.iter().find(|x| x.len() != width) {
            return Err(Error::LengthMismatch {
                expected: width,
                got: bad.len(),
            });
        }
        Ok(width)
    }

    pub fn group_of(&self, i: usize) -> String {
        match self.groups {
            Some(g) => g[i].clone(),
            None => format!("#{i}"),
        }
    }

    pub fn sample_weights(&self, weights: &ClassWeights) -> Vec<f64> {
        self.labels.iter().map(|&l| weights.weight(l)).collect()
    }

    pub fn select(&self, idx: &[usize]) -> OwnedSet {
        OwnedSet {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            groups: self.groups.map(|g| idx.iter().map(|&i| g[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OwnedSet {
    pub inputs: Vec<MetaInput>,
    pub labels: Vec<Label>,
    pub groups: Option<Vec<String>>,
}

impl OwnedSet {
    pub fn view(&self) -> TrainingSet<'_> {
        TrainingSet {
            inputs: &self.inputs,
            labels: &self.labels,
            groups: self.groups.as_deref(),
        }
    }
}

/// Splits sample indices into (train, validation) with whole groups moved to
/// validation until it holds `fraction` of the samples. Returns an empty
/// validation side when `fraction` is zero or there is a single group.
pub fn carve_validation(set: &TrainingSet<'_>, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..set.len() {
        members.entry(set.group_of(i)).or_default().push(i);
    }
    if fraction <= 0.0 || members.len() < 2 {
        return ((0..set.len()).collect(), Vec::new());
    }
    let mut groups: Vec<&String> = members.keys().collect();
    groups.shuffle(&mut rng::rng_for(seed, "carve_validation"));
    let target = fraction * set.len() as f64;
    let mut in_val = vec![false; set.len()];
    let mut taken = 0usize;
    for g in &groups[..groups.len() - 1] {
        if taken as f64 >= target {
            break;
        }
        for &i in &members[*g] {
            in_val[i] = true;
        }
        taken += members[*g].len();
    }
    (0..set.len()).partition(|&i| !in_val[i])
}
