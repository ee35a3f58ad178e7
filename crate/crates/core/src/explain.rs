//! Attribution of meta-model decisions to window positions.
//!
//! Shapley values here are interventional: the value of a coalition `S` is
//! the model margin (log-odds) averaged over a background set, with features
//! in `S` taken from the instance and the rest from the background row. For
//! the linear ANN, [`window_importance`] gives the closed-form alternative.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use crate::meta_ann::{importance_from_weights, window_importance, ImportanceProfile};

use crate::encodings::MetaInput;
use crate::error::{Error, Result};
use crate::meta_gbt::GbtModel;
use crate::{par, rng};

/// Largest input length accepted by [`shapley_exact`].
pub const MAX_EXACT_FEATURES: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub instance_id: String,
    pub inputs: Vec<f64>,
    pub phi: Vec<f64>,
    /// Per-feature standard error (infinite from a single permutation);
    /// absent for exact attributions.
    pub std_err: Option<Vec<f64>>,
    /// Mean margin over the background set.
    pub base_value: f64,
    /// Margin at the instance.
    pub model_output: f64,
    pub encoding: String,
}

impl Attribution {
    /// `sum(phi) + base - output`; zero up to rounding for exact attributions.
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() + self.base_value - self.model_output
    }
}

fn check(model: &GbtModel, instance: &MetaInput, background: &[MetaInput]) -> Result<()> {
    model.margin(instance)?;
    if background.is_empty() {
        return Err(Error::Invalid("empty background set".into()));
    }
    for b in background {
        if b.len() != model.input_len {
            return Err(Error::LengthMismatch {
                expected: model.input_len,
                got: b.len(),
            });
        }
    }
    Ok(())
}

fn mean_margin(model: &GbtModel, background: &[MetaInput]) -> f64 {
    background.iter().map(|b| model.margin_unchecked(&b.values)).sum::<f64>() / background.len() as f64
}

/// Exact interventional Shapley values by enumerating all coalitions.
/// Features no tree splits on are dummies and get exactly zero, so only the
/// used features are enumerated.
pub fn shapley_exact(model: &GbtModel, instance_id: &str, instance: &MetaInput, background: &[MetaInput]) -> Result<Attribution> {
    check(model, instance, background)?;
    let m = model.input_len;
    if m > MAX_EXACT_FEATURES {
        return Err(Error::Unsupported(format!(
            "exact Shapley enumerates 2^{m} coalitions; use shapley_sampled above {MAX_EXACT_FEATURES} features"
        )));
    }
    let players: Vec<usize> = (0..m).filter(|&f| model.trees.iter().any(|t| t.uses_feature(f))).collect();
    let k = players.len();

    // value[mask]: background-averaged margin with `players[i]` taken from
    // the instance for every bit i set in mask.
    let value: Vec<f64> = par::map_range(1usize << k, |mask| {
        let mut z = vec![0.0; m];
        let total: f64 = background
            .iter()
            .map(|b| {
                z.copy_from_slice(&b.values);
                for (i, &f) in players.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        z[f] = instance.values[f];
                    }
                }
                model.margin_unchecked(&z)
            })
            .sum();
        total / background.len() as f64
    });

    // weight[s] = s! (k - s - 1)! / k!
    let weight: Vec<f64> = (0..k.max(1))
        .map(|s| {
            let mut w = 1.0 / k as f64;
            for i in 1..=s {
                w *= i as f64 / (k - i) as f64;
            }
            w
        })
        .collect();
    let mut phi = vec![0.0; m];
    for (i, &f) in players.iter().enumerate() {
        let bit = 1usize << i;
        phi[f] = (0..1usize << k)
            .filter(|mask| mask & bit == 0)
            .map(|mask| weight[mask.count_ones() as usize] * (value[mask | bit] - value[mask]))
            .sum();
    }
    Ok(Attribution {
        instance_id: instance_id.to_string(),
        inputs: instance.values.clone(),
        phi,
        std_err: None,
        base_value: mean_margin(model, background),
        model_output: model.margin_unchecked(&instance.values),
        encoding: model.encoding_spec.kind.as_str().to_string(),
    })
}

/// Monte Carlo permutation estimate. Each permutation draws its own order and
/// one background row from a seed derived from `(seed, permutation index)`.
pub fn shapley_sampled(
    model: &GbtModel,
    instance_id: &str,
    instance: &MetaInput,
    background: &[MetaInput],
    permutations: usize,
    seed: u64,
) -> Result<Attribution> {
    check(model, instance, background)?;
    if permutations == 0 {
        return Err(Error::Config("permutations must be at least 1".into()));
    }
    let m = model.input_len;
    let x = &instance.values;
    let draws: Vec<Vec<f64>> = par::map_range(permutations, |k| {
        let mut r = rng::rng_for(seed, &format!("shapley_perm_{k}"));
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut r);
        let mut z = background[r.random_range(0..background.len())].values.clone();
        let mut contrib = vec![0.0; m];
        let mut prev = model.margin_unchecked(&z);
        for &f in &order {
            z[f] = x[f];
            let cur = model.margin_unchecked(&z);
            contrib[f] = cur - prev;
            prev = cur;
        }
        contrib
    });
    let n = permutations as f64;
    let mut phi = vec![0.0; m];
    for d in &draws {
        for (p, v) in phi.iter_mut().zip(d) {
            *p += v;
        }
    }
    phi.iter_mut().for_each(|p| *p /= n);
    let std_err = (0..m)
        .map(|f| {
            if permutations < 2 {
                return f64::INFINITY;
            }
            let var = draws.iter().map(|d| (d[f] - phi[f]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(Attribution {
        instance_id: instance_id.to_string(),
        inputs: x.clone(),
        phi,
        std_err: Some(std_err),
        base_value: mean_margin(model, background),
        model_output: model.margin_unchecked(x),
        encoding: model.encoding_spec.kind.as_str().to_string(),
    })
}

/// Up to `n` rows drawn without replacement, in their original order.
pub fn background_sample(rows: &[MetaInput], n: usize, seed: u64) -> Vec<MetaInput> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut rng::rng_for(seed, "shapley_background"));
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapleyMethod {
    Exact,
    Sampled { permutations: usize },
}

/// Attributions for many instances; sampled runs use a per-instance seed.
pub fn explain_all(
    model: &GbtModel,
    instances: &[(String, MetaInput)],
    background: &[MetaInput],
    method: ShapleyMethod,
    seed: u64,
) -> Result<Vec<Attribution>> {
    par::try_map(instances, |(id, x)| match method {
        ShapleyMethod::Exact => shapley_exact(model, id, x, background),
        ShapleyMethod::Sampled { permutations } => {
            shapley_sampled(model, id, x, background, permutations, rng::derive_seed(seed, id))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub position: usize,
    pub mean_abs_phi: f64,
    /// 1 for the most influential position.
    pub rank: usize,
    /// Variance of phi over instances whose input here is >= 0.5.
    pub high_value_phi_variance: Option<f64>,
    /// Variance of phi over instances whose input here is < 0.5.
    pub low_value_phi_variance: Option<f64>,
}

impl PositionSummary {
    /// High-minus-low variance; positive when large inputs swing the
    /// decision more than small ones.
    pub fn asymmetry(&self) -> Option<f64> {
        Some(self.high_value_phi_variance? - self.low_value_phi_variance?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub instance_id: String,
    pub position: usize,
    pub value: f64,
    pub phi: f64,
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub encoding: String,
    pub positions: Vec<PositionSummary>,
    pub scatter: Vec<ScatterPoint>,
}

const HIGH_VALUE: f64 = 0.5;

fn variance(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Some(xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64)
}

pub fn attribution_summary(attributions: &[Attribution]) -> Result<AttributionSummary> {
    let Some(first) = attributions.first() else {
        return Err(Error::Invalid("no attributions to summarise".into()));
    };
    let m = first.phi.len();
    if let Some(bad) = attributions.iter().find(|a| a.encoding != first.encoding || a.phi.len() != m) {
        return Err(Error::Invalid(format!(
            "attribution {} ({}, {} features) does not match {} ({}, {m} features)",
            bad.instance_id,
            bad.encoding,
            bad.phi.len(),
            first.instance_id,
            first.encoding
        )));
    }
    let mut sorted: Vec<&Attribution> = attributions.iter().collect();
    sorted.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let mut positions: Vec<PositionSummary> = (0..m)
        .map(|j| {
            let (high, low): (Vec<&&Attribution>, Vec<&&Attribution>) = sorted.iter().partition(|a| a.inputs[j] >= HIGH_VALUE);
            let phis = |set: &[&&Attribution]| set.iter().map(|a| a.phi[j]).collect::<Vec<f64>>();
            PositionSummary {
                position: j,
                mean_abs_phi: sorted.iter().map(|a| a.phi[j].abs()).sum::<f64>() / sorted.len() as f64,
                rank: 0,
                high_value_phi_variance: variance(&phis(&high)),
                low_value_phi_variance: variance(&phis(&low)),
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| positions[b].mean_abs_phi.total_cmp(&positions[a].mean_abs_phi).then(a.cmp(&b)));
    for (r, &j) in order.iter().enumerate() {
        positions[j].rank = r + 1;
    }

    let scatter = sorted
        .iter()
        .flat_map(|a| {
            (0..m).map(move |j| ScatterPoint {
                instance_id: a.instance_id.clone(),
                position: j,
                value: a.inputs[j],
                phi: a.phi[j],
                std_err: a.std_err.as_ref().map(|s| s[j]),
            })
        })
        .collect();
    Ok(AttributionSummary {
        encoding: first.encoding.clone(),
        positions,
        scatter,
    })
}

/// One row per (instance, position): input value, phi and standard error.
pub fn write_attributions(path: &Path, attributions: &[Attribution]) -> Result<()> {
    let rows: Vec<ScatterPoint> = attributions
        .iter()
        .flat_map(|a| {
            (0..a.phi.len()).map(move |j| ScatterPoint {
                instance_id: a.instance_id.clone(),
                position: j,
                value: a.inputs[j],
                phi: a.phi[j],
                std_err: a.std_err.as_ref().map(|s| s[j]),
            })
        })
        .collect();
    crate::io::write_csv(path, &rows)
}
