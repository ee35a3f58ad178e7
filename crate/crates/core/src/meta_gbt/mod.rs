//! Gradient-boosted tree meta-model with second-order boosting on the
//! class-weighted logistic loss.

mod cv;
mod tree;

use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use cv::{cv_select_depth, CvOutcome, CvRow};
pub use tree::{leaf_value, split_gain, threshold_between, TreeNode, TreeParams};

use crate::corpus::{ClassWeights, Label};
use crate::dataset::TrainingSet;
use crate::encodings::{EncodingSpec, MetaInput};
use crate::error::{Error, Result};
use crate::rng;
use tree::TreeBuilder;

pub const MODEL_FORMAT: &str = "winstack.gbt";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub rounds: usize,
    /// Shrinkage applied to every tree's output.
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Minimum hessian sum in each child.
    pub min_child_weight: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub depth_grid: Vec<usize>,
    pub cv_folds: usize,
    /// Fraction of features offered to each round's tree; `None` offers all.
    pub feature_subsample: Option<f64>,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            learning_rate: 0.1,
            max_depth: 6,
            min_child_weight: 1.0,
            lambda: 1.0,
            depth_grid: vec![5, 10, 15, 20, 25],
            cv_folds: 3,
            feature_subsample: None,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if !(self.lambda >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::Config("lambda and min_child_weight must be non-negative".into()));
        }
        if self.depth_grid.is_empty() {
            return Err(Error::Config("depth grid is empty".into()));
        }
        if let Some(f) = self.feature_subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("feature subsample {f} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_child_weight: self.min_child_weight,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub trees: Vec<TreeNode>,
    /// Prior log-odds of the weighted training labels.
    #[serde(with = "crate::hexfloat")]
    pub base_score: f64,
    pub encoding_spec: EncodingSpec,
    pub config: GbtConfig,
    pub input_len: usize,
    /// Set when every input feature was constant during training.
    pub degenerate: bool,
    /// Weighted logistic training loss after each round.
    #[serde(with = "crate::hexfloat::vec")]
    pub training_loss: Vec<f64>,
}

pub fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

impl GbtModel {
    /// Log-odds output for a raw feature slice (no length check).
    pub fn margin_unchecked(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.eval(x)).sum();
        self.base_score + self.config.learning_rate * sum
    }

    pub fn margin(&self, input: &MetaInput) -> Result<f64> {
        self.check_len(input.len())?;
        Ok(self.margin_unchecked(&input.values))
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.input_len {
            return Err(Error::LengthMismatch {
                expected: self.input_len,
                got,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &ModelFile::new(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json::<ModelFile>(path)?.into_model()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::new(self.clone()))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(text)?.into_model()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: GbtModel,
}

impl ModelFile {
    fn new(model: GbtModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model,
        }
    }

    fn into_model(self) -> Result<GbtModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Invalid(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let m = &self.model;
        if let Some(bad) = m.trees.iter().filter_map(TreeNode::max_feature).find(|&f| f >= m.input_len) {
            return Err(Error::Invalid(format!("split on feature {bad} beyond input length {}", m.input_len)));
        }
        Ok(self.model)
    }
}

pub fn predict_gbt(model: &GbtModel, input: &MetaInput) -> Result<f64> {
    Ok(sigmoid(model.margin(input)?))
}

/// Mean class-weighted logistic loss of `margins`.
pub fn weighted_logistic_loss(margins: &[f64], labels: &[Label], sample_weights: &[f64]) -> f64 {
    let n = margins.len().max(1) as f64;
    margins
        .iter()
        .zip(labels)
        .zip(sample_weights)
        .map(|((&m, &y), &w)| {
            // log(1 + e^m) - y m, computed without overflow.
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            w * (softplus - y.target() * m)
        })
        .sum::<f64>()
        / n
}

/// Gradient and hessian of the weighted logistic loss at `margin`.
pub fn gradient_pair(margin: f64, label: Label, weight: f64) -> (f64, f64) {
    let p = sigmoid(margin);
    (weight * (p - label.target()), weight * p * (1.0 - p))
}

pub fn base_score(labels: &[Label], weights: &ClassWeights) -> f64 {
    let (pos, neg) = labels.iter().fold((0.0, 0.0), |(p, n), &l| match l {
        Label::Abnormal => (p + weights.a_abnormal, n),
        Label::Normal => (p, n + weights.a_normal),
    });
    (pos / neg).ln()
}

pub fn train_gbt(data: TrainingSet<'_>, weights: &ClassWeights, config: &GbtConfig, encoding_spec: EncodingSpec) -> Result<GbtModel> {
    config.validate()?;
    let width = data.validate(2)?;
    let rows: Vec<&[f64]> = data.inputs.iter().map(|x| x.values.as_slice()).collect();
    let labels = data.labels;
    let sample_w = data.sample_weights(weights);
    let base = base_score(labels, weights);

    let varying: Vec<usize> = (0..width)
        .filter(|&f| rows.iter().any(|r| r[f] != rows[0][f]))
        .collect();
    let mut model = GbtModel {
        trees: Vec::new(),
        base_score: base,
        encoding_spec,
        config: config.clone(),
        input_len: width,
        degenerate: varying.is_empty(),
        training_loss: Vec::new(),
    };
    if model.degenerate {
        log::warn!("all {width} input features are constant; the model reduces to its base score");
        return Ok(model);
    }

    // Presorted sample order per feature, ties broken by sample index.
    let presorted: Vec<Vec<u32>> = (0..width)
        .map(|f| {
            let mut idx: Vec<u32> = (0..rows.len() as u32).collect();
            idx.sort_by(|&a, &b| rows[a as usize][f].total_cmp(&rows[b as usize][f]).then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut margins = vec![base; rows.len()];
    let mut grad = vec![0.0; rows.len()];
    let mut hess = vec![0.0; rows.len()];
    for round in 0..config.rounds {
        for i in 0..rows.len() {
            let (g, h) = gradient_pair(margins[i], labels[i], sample_w[i]);
            grad[i] = g;
            hess[i] = h;
        }
        let features = round_features(&varying, config, round);
        let sorted = features.iter().map(|&f| presorted[f].clone()).collect();
        let builder = TreeBuilder {
            rows: &rows,
            grad: &grad,
            hess: &hess,
            params: config.tree_params(),
        };
        let tree = builder.build(&features, sorted, 0);
        for (m, row) in margins.iter_mut().zip(&rows) {
            *m += config.learning_rate * tree.eval(row);
        }
        model.trees.push(tree);
        model.training_loss.push(weighted_logistic_loss(&margins, labels, &sample_w));
    }
    Ok(model)
}

fn round_features(varying: &[usize], config: &GbtConfig, round: usize) -> Vec<usize> {
    match config.feature_subsample {
        Some(frac) if frac < 1.0 => {
            let k = ((frac * varying.len() as f64).ceil() as usize).clamp(1, varying.len());
            let mut rng = rng::rng_for(config.seed, &format!("gbt_features_{round}"));
            let mut picked: Vec<usize> = sample(&mut rng, varying.len(), k).into_iter().map(|i| varying[i]).collect();
            picked.sort_unstable();
            picked
        }
        _ => varying.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::class_weights;
    use crate::encodings::EncodingKind;
    use rand::Rng as _;

    fn spec(t: usize) -> EncodingSpec {
        EncodingSpec::new(EncodingKind::RawProb, t)
    }

    fn step_data() -> (Vec<MetaInput>, Vec<Label>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..100 {
            let abnormal = i >= 50;
            xs.push(MetaInput::from(vec![if abnormal { 1.0 } else { 0.0 }]));
            ys.push(if abnormal { Label::Abnormal } else { Label::Normal });
        }
        (xs, ys)
    }

    #[test]
    fn one_stump_closes_by_hand() {
        let (xs, ys) = step_data();
        let cfg = GbtConfig {
            rounds: 1,
            max_depth: 1,
            lambda: 0.0,
            learning_rate: 1.0,
            ..GbtConfig::default()
        };
        let w = class_weights(&ys).unwrap();
        let m = train_gbt(TrainingSet::new(&xs, &ys), &w, &cfg, spec(1)).unwrap();
        assert_eq!(m.base_score, 0.0);
        // p0 = 0.5: each left sample has g = 0.5, h = 0.25, so the leaf is
        // -(50 * 0.5) / (50 * 0.25) = -2; the right leaf is +2.
        match &m.trees[0] {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                assert_eq!((*feature, *threshold), (0, 0.5));
                assert_eq!(**left, TreeNode::Leaf { value: -2.0 });
                assert_eq!(**right, TreeNode::Leaf { value: 2.0 });
            }
            other => panic!("expected a split, got {other:?}"),
        }
        let hi = predict_gbt(&m, &MetaInput::from(vec![1.0])).unwrap();
        let lo = predict_gbt(&m, &MetaInput::from(vec![0.0])).unwrap();
        assert!(hi > 0.5 && 0.5 > lo);
    }

    #[test]
    fn zero_trees_give_sigmoid_of_base() {
        let m = GbtModel {
            trees: vec![],
            base_score: 0.3,
            encoding_spec: spec(2),
            config: GbtConfig::default(),
            input_len: 2,
            degenerate: false,
            training_loss: vec![],
        };
        assert_eq!(predict_gbt(&m, &MetaInput::from(vec![0.0, 1.0])).unwrap(), sigmoid(0.3));
        assert!(predict_gbt(&m, &MetaInput::from(vec![0.0])).is_err());
    }

    #[test]
    fn constant_features_are_flagged() {
        let xs = vec![MetaInput::from(vec![0.5, 0.5]); 6];
        let ys = vec![Label::Normal, Label::Normal, Label::Abnormal, Label::Abnormal, Label::Abnormal, Label::Abnormal];
        let w = class_weights(&ys).unwrap();
        let m = train_gbt(TrainingSet::new(&xs, &ys), &w, &GbtConfig::default(), spec(2)).unwrap();
        assert!(m.degenerate);
        assert!(m.trees.is_empty());
        assert_eq!(m.base_score, 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        let xs = vec![MetaInput::from(vec![0.1]); 4];
        let ys = vec![Label::Abnormal; 4];
        assert!(train_gbt(TrainingSet::new(&xs, &ys), &ClassWeights::uniform(), &GbtConfig::default(), spec(1)).is_err());
    }

    #[test]
    fn monotone_feature_gives_monotone_predictions() {
        let mut rng = rng::rng_from(8);
        let xs: Vec<MetaInput> = (0..300).map(|_| MetaInput::from(vec![rng.random::<f64>()])).collect();
        let ys: Vec<Label> = xs
            .iter()
            .map(|x| if rng.random::<f64>() < x.values[0] { Label::Abnormal } else { Label::Normal })
            .collect();
        let cfg = GbtConfig {
            rounds: 30,
            max_depth: 1,
            ..GbtConfig::default()
        };
        let m = train_gbt(TrainingSet::new(&xs, &ys), &class_weights(&ys).unwrap(), &cfg, spec(1)).unwrap();
        // Depth-1 trees on one feature: every stump puts the larger leaf on
        // the side with more positives, which for this data is the right.
        let grid: Vec<f64> = (0..=100).map(|i| predict_gbt(&m, &MetaInput::from(vec![i as f64 / 100.0])).unwrap()).collect();
        for pair in grid.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "{pair:?}");
        }
        assert!(grid[100] > grid[0]);
    }

    #[test]
    fn model_file_round_trips() {
        let (xs, ys) = step_data();
        let m = train_gbt(TrainingSet::new(&xs, &ys), &class_weights(&ys).unwrap(), &GbtConfig { rounds: 5, ..GbtConfig::default() }, spec(1)).unwrap();
        let back = GbtModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for v in [0.0, 0.3, 1.0] {
            let x = MetaInput::from(vec![v]);
            assert_eq!(predict_gbt(&m, &x).unwrap().to_bits(), predict_gbt(&back, &x).unwrap().to_bits());
        }
    }

    #[test]
    fn loaded_model_rejects_out_of_range_feature() {
        let m = GbtModel {
            trees: vec![TreeNode::Split {
                feature: 3,
                threshold: 0.5,
                left: Box::new(TreeNode::Leaf { value: 0.0 }),
                right: Box::new(TreeNode::Leaf { value: 0.0 }),
            }],
            base_score: 0.0,
            encoding_spec: spec(2),
            config: GbtConfig::default(),
            input_len: 2,
            degenerate: false,
            training_loss: vec![],
        };
        assert!(GbtModel::from_json(&m.to_json().unwrap()).is_err());
    }

    #[test]
    fn feature_subsample_is_seeded() {
        let cfg = GbtConfig {
            feature_subsample: Some(0.5),
            seed: 4,
            ..GbtConfig::default()
        };
        let varying: Vec<usize> = (0..10).collect();
        let a = round_features(&varying, &cfg, 3);
        assert_eq!(a.len(), 5);
        assert_eq!(a, round_features(&varying, &cfg, 3));
    }
}
