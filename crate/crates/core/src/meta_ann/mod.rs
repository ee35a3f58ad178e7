//! Neural-network meta-model: a linear or shallow MLP over an encoded
//! recording with a two-way softmax head, trained by mini-batch SGD on the
//! class-weighted cross-entropy.

mod grid;
mod network;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use grid::{grid_search_ann, AnnGrid, AnnGridCell, AnnGridReport};
pub use network::{Activation, Dense};

use crate::corpus::{ClassWeights, Label};
use crate::dataset::{carve_validation, TrainingSet};
use crate::encodings::{EncodingKind, EncodingSpec, MetaInput};
use crate::error::{Error, Result};
use crate::rng;
use network::Network;

pub const MODEL_FORMAT: &str = "winstack.ann";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnArchitecture {
    pub input_len: usize,
    /// 0 to 3.
    pub hidden_layers: usize,
    /// Ignored when `hidden_layers` is 0.
    pub hidden_width: usize,
    pub activation: Activation,
}

impl AnnArchitecture {
    pub fn linear(input_len: usize) -> Self {
        Self {
            input_len,
            hidden_layers: 0,
            hidden_width: 0,
            activation: Activation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 {
            return Err(Error::Config("ANN input length must be positive".into()));
        }
        if self.hidden_layers > 3 {
            return Err(Error::Config(format!("{} hidden layers; at most 3 are supported", self.hidden_layers)));
        }
        if self.hidden_layers > 0 && !(5..=20).contains(&self.hidden_width) {
            return Err(Error::Config(format!("hidden width {} outside 5..=20", self.hidden_width)));
        }
        Ok(())
    }

    /// (inputs, outputs) of every layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_len;
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, 2));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for AnnHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 500,
            batch: 32,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnModel {
    pub architecture: AnnArchitecture,
    pub layers: Vec<Dense>,
    pub encoding_spec: EncodingSpec,
    pub training: Option<TrainingMeta>,
}

/// `W` (2 x T) and `b` of a hidden-layer-free model on raw probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearArbitrationWeights {
    pub weights: [Vec<f64>; 2],
    pub bias: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub importance: Vec<f64>,
}

impl AnnModel {
    /// All-zero parameters.
    pub fn zeros(architecture: AnnArchitecture, encoding_spec: EncodingSpec) -> Self {
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Self {
            architecture,
            layers,
            encoding_spec,
            training: None,
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(architecture: AnnArchitecture, encoding_spec: EncodingSpec, seed: u64) -> Self {
        let mut model = Self::zeros(architecture, encoding_spec);
        let mut rng = rng::rng_for(seed, "ann_init");
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..=bound);
            }
        }
        model
    }

    fn network(&self) -> Network<'_> {
        Network {
            layers: &self.layers,
            activation: self.architecture.activation,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.layers.iter().map(Dense::n_params).sum();
        if flat.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                got: flat.len(),
            });
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn linear_weights(&self) -> Result<LinearArbitrationWeights> {
        if self.architecture.hidden_layers != 0 || self.encoding_spec.kind != EncodingKind::RawProb {
            return Err(Error::Unsupported(
                "window importance is defined only for hidden-layer-free models on raw probabilities".into(),
            ));
        }
        let head = &self.layers[0];
        let t = head.inputs;
        Ok(LinearArbitrationWeights {
            weights: [head.weights[..t].to_vec(), head.weights[t..].to_vec()],
            bias: [head.bias[0], head.bias[1]],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &ModelFile::new(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = crate::io::read_json(path)?;
        file.into_model()
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
    model: AnnModel,
}

impl ModelFile {
    fn new(model: AnnModel) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model,
        }
    }

    fn into_model(self) -> Result<AnnModel> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Invalid(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        let shapes = self.model.architecture.layer_shapes();
        let consistent = shapes.len() == self.model.layers.len()
            && shapes.iter().zip(&self.model.layers).all(|(&(i, o), l)| {
                l.inputs == i && l.outputs == o && l.weights.len() == i * o && l.bias.len() == o
            });
        if !consistent {
            return Err(Error::Invalid("layer shapes disagree with the architecture".into()));
        }
        Ok(self.model)
    }
}

/// `(p_normal, p_abnormal)` for one encoded recording.
pub fn predict_ann(model: &AnnModel, input: &MetaInput) -> Result<(f64, f64)> {
    if input.len() != model.architecture.input_len {
        return Err(Error::LengthMismatch {
            expected: model.architecture.input_len,
            got: input.len(),
        });
    }
    let [p0, p1] = model.network().predict(&input.values);
    Ok((p0, p1))
}

/// `-(1/N) sum_n w_n log p_{y_n}` and its gradient with respect to the
/// flattened parameters.
pub fn loss_and_gradient(model: &AnnModel, inputs: &[MetaInput], labels: &[Label], sample_weights: &[f64]) -> (f64, Vec<f64>) {
    let samples = inputs
        .iter()
        .zip(labels)
        .zip(sample_weights)
        .map(|((x, &y), &w)| (x.values.as_slice(), y, w));
    gradient_over(model, samples, inputs.len())
}

fn gradient_over<'a>(model: &AnnModel, samples: impl Iterator<Item = (&'a [f64], Label, f64)>, n: usize) -> (f64, Vec<f64>) {
    let mut grads: Vec<Dense> = model.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
    let n = n.max(1) as f64;
    let net = model.network();
    let mut loss = 0.0;
    for (x, y, w) in samples {
        loss += w * net.accumulate_gradient(x, y, w / n, &mut grads);
    }
    let flat = grads
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect();
    (loss / n, flat)
}

pub fn weighted_loss(model: &AnnModel, inputs: &[MetaInput], labels: &[Label], sample_weights: &[f64]) -> f64 {
    let net = model.network();
    let n = inputs.len().max(1) as f64;
    inputs
        .iter()
        .zip(labels)
        .zip(sample_weights)
        .map(|((x, &y), &w)| {
            let z = forward_logits(&net, &x.values);
            w * network::neg_log_softmax(&z, y.index())
        })
        .sum::<f64>()
        / n
}

fn forward_logits(net: &Network<'_>, x: &[f64]) -> Vec<f64> {
    let trace = net.forward_trace(x);
    trace.pre.into_iter().last().expect("at least one layer")
}

/// Trains with a patient-disjoint validation carve for early stopping.
pub fn train_ann(
    data: TrainingSet<'_>,
    weights: &ClassWeights,
    arch: AnnArchitecture,
    hyper: &AnnHyper,
    encoding_spec: EncodingSpec,
) -> Result<AnnModel> {
    data.validate(2)?;
    let (train_idx, val_idx) = carve_validation(&data, hyper.validation_fraction, hyper.seed);
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);
    let val = (!val.inputs.is_empty()).then_some(val);
    train_with_validation(train.view(), val.as_ref().map(|v| v.view()), weights, arch, hyper, encoding_spec)
}

pub(crate) fn train_with_validation(
    train: TrainingSet<'_>,
    val: Option<TrainingSet<'_>>,
    weights: &ClassWeights,
    arch: AnnArchitecture,
    hyper: &AnnHyper,
    encoding_spec: EncodingSpec,
) -> Result<AnnModel> {
    arch.validate()?;
    let width = train.validate(1)?;
    if width != arch.input_len {
        return Err(Error::LengthMismatch {
            expected: arch.input_len,
            got: width,
        });
    }
    if !(hyper.learning_rate > 0.0) || hyper.batch == 0 || hyper.epochs == 0 {
        return Err(Error::Config("learning rate, batch and epochs must be positive".into()));
    }

    let mut model = AnnModel::init(arch, encoding_spec, hyper.seed);
    let train_w = train.sample_weights(weights);
    let val_w = val.map(|v| v.sample_weights(weights));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::rng_for(hyper.seed, "ann_shuffle");

    let mut best = (f64::INFINITY, model.params(), 0usize);
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut params = model.params();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(hyper.batch) {
            let batch = chunk
                .iter()
                .map(|&i| (train.inputs[i].values.as_slice(), train.labels[i], train_w[i]));
            let (_, grad) = gradient_over(&model, batch, chunk.len());
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= hyper.learning_rate * g;
            }
            model.set_params(&params)?;
        }
        epochs_run = epoch + 1;
        let train_loss = weighted_loss(&model, train.inputs, train.labels, &train_w);
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { epoch, loss: train_loss });
        }
        let monitored = match (&val, &val_w) {
            (Some(v), Some(w)) => weighted_loss(&model, v.inputs, v.labels, w),
            _ => train_loss,
        };
        if monitored < best.0 {
            best = (monitored, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if val.is_some() && since_best >= hyper.patience {
                break;
            }
        }
    }

    if val.is_some() {
        model.set_params(&best.1)?;
    }
    let final_train_loss = weighted_loss(&model, train.inputs, train.labels, &train_w);
    let final_validation_loss = match (&val, &val_w) {
        (Some(v), Some(w)) => Some(weighted_loss(&model, v.inputs, v.labels, w)),
        _ => None,
    };
    model.training = Some(TrainingMeta {
        seed: hyper.seed,
        learning_rate: hyper.learning_rate,
        batch: hyper.batch,
        epochs_run,
        best_epoch: best.2,
        final_train_loss,
        final_validation_loss,
    });
    Ok(model)
}

/// Importance of window position `j`: `(W_0j^2 + W_1j^2) / 2`.
pub fn importance_from_weights(weights: &LinearArbitrationWeights) -> ImportanceProfile {
    ImportanceProfile {
        importance: weights.weights[0]
            .iter()
            .zip(&weights.weights[1])
            .map(|(a, b)| (a * a + b * b) / 2.0)
            .collect(),
    }
}

pub fn window_importance(model: &AnnModel) -> Result<ImportanceProfile> {
    Ok(importance_from_weights(&model.linear_weights()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::class_weights;

    fn toy(n: usize, t: usize) -> (Vec<MetaInput>, Vec<Label>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let abnormal = i % 2 == 1;
            xs.push(MetaInput::from(vec![if abnormal { 0.9 } else { 0.1 }; t]));
            ys.push(if abnormal { Label::Abnormal } else { Label::Normal });
        }
        (xs, ys)
    }

    fn raw_spec(t: usize) -> EncodingSpec {
        EncodingSpec::new(EncodingKind::RawProb, t)
    }

    #[test]
    fn zero_model_is_uninformative() {
        let m = AnnModel::zeros(AnnArchitecture::linear(4), raw_spec(4));
        assert_eq!(predict_ann(&m, &MetaInput::from(vec![0.3, 0.9, 0.0, 1.0])).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn linear_decision_follows_weight_difference() {
        let mut m = AnnModel::zeros(AnnArchitecture::linear(2), raw_spec(2));
        m.layers[0].weights = vec![0.5, -1.0, -0.5, 2.0];
        m.layers[0].bias = vec![0.1, -0.2];
        for x in [[0.1, 0.2], [0.9, 0.05], [0.4, 0.4], [0.0, 1.0]] {
            let (p0, p1) = predict_ann(&m, &MetaInput::from(x.to_vec())).unwrap();
            let margin = (-0.5 - 0.5) * x[0] + (2.0 + 1.0) * x[1] + (-0.2 - 0.1);
            assert_eq!(p1 > p0, margin > 0.0);
            assert!((p0 + p1 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let m = AnnModel::zeros(AnnArchitecture::linear(3), raw_spec(3));
        assert!(matches!(predict_ann(&m, &MetaInput::from(vec![0.1])), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn separable_toy_is_learned() {
        let (xs, ys) = toy(64, 20);
        let w = class_weights(&ys).unwrap();
        let hyper = AnnHyper {
            epochs: 200,
            validation_fraction: 0.0,
            seed: 7,
            ..AnnHyper::default()
        };
        let m = train_ann(TrainingSet::new(&xs, &ys), &w, AnnArchitecture::linear(20), &hyper, raw_spec(20)).unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| {
                let (_, p1) = predict_ann(&m, x).unwrap();
                (p1 >= 0.5) == (y == Label::Abnormal)
            })
            .count();
        assert_eq!(correct, xs.len());
    }

    #[test]
    fn balanced_weights_leave_loss_unchanged() {
        let (xs, ys) = toy(10, 3);
        let m = AnnModel::init(AnnArchitecture::linear(3), raw_spec(3), 1);
        let w = class_weights(&ys).unwrap();
        let weighted: Vec<f64> = ys.iter().map(|&l| w.weight(l)).collect();
        let (l1, g1) = loss_and_gradient(&m, &xs, &ys, &weighted);
        let (l2, g2) = loss_and_gradient(&m, &xs, &ys, &vec![1.0; xs.len()]);
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn duplication_matches_doubled_weight() {
        let mut rng = rng::rng_from(5);
        let xs: Vec<MetaInput> = (0..12).map(|_| MetaInput::from((0..4).map(|_| rng.random::<f64>()).collect::<Vec<_>>())).collect();
        let ys: Vec<Label> = (0..12).map(|i| if i < 4 { Label::Normal } else { Label::Abnormal }).collect();
        let arch = AnnArchitecture {
            input_len: 4,
            hidden_layers: 1,
            hidden_width: 5,
            activation: Activation::Gelu,
        };
        let m = AnnModel::init(arch, raw_spec(4), 3);

        let mut dup_x = xs.clone();
        let mut dup_y = ys.clone();
        for i in 0..4 {
            dup_x.push(xs[i].clone());
            dup_y.push(ys[i]);
        }
        let (_, g_dup) = loss_and_gradient(&m, &dup_x, &dup_y, &vec![1.0; dup_x.len()]);
        // Same normalization constant N as the duplicated set.
        let weights: Vec<f64> = ys.iter().map(|&l| if l == Label::Normal { 2.0 } else { 1.0 }).collect();
        let (_, g_w) = loss_and_gradient(&m, &xs, &ys, &weights);
        let scale = xs.len() as f64 / dup_x.len() as f64;
        for (a, b) in g_dup.iter().zip(&g_w) {
            assert!((a - b * scale).abs() < 1e-10, "{a} vs {}", b * scale);
        }
    }

    #[test]
    fn importance_hand_values() {
        let w = LinearArbitrationWeights {
            weights: [vec![0.0, 1.0, 3.0], vec![0.0, -1.0, 4.0]],
            bias: [0.0, 0.0],
        };
        assert_eq!(importance_from_weights(&w).importance, vec![0.0, 1.0, 12.5]);
    }

    #[test]
    fn importance_requires_linear_raw_model() {
        let arch = AnnArchitecture {
            input_len: 3,
            hidden_layers: 1,
            hidden_width: 5,
            activation: Activation::Relu,
        };
        assert!(window_importance(&AnnModel::zeros(arch, raw_spec(3))).is_err());
        let hist = EncodingSpec::new(EncodingKind::Histogram, 0);
        assert!(window_importance(&AnnModel::zeros(AnnArchitecture::linear(10), hist)).is_err());
        assert!(window_importance(&AnnModel::zeros(AnnArchitecture::linear(3), raw_spec(3))).is_ok());
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let arch = AnnArchitecture {
            input_len: 6,
            hidden_layers: 2,
            hidden_width: 7,
            activation: Activation::Elu,
        };
        let m = AnnModel::init(arch, raw_spec(6), 99);
        let back = AnnModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let x = MetaInput::from(vec![0.1, 0.7, 0.3, 0.9, 0.2, 0.0]);
        let (a0, a1) = predict_ann(&m, &x).unwrap();
        let (b0, b1) = predict_ann(&back, &x).unwrap();
        assert_eq!((a0.to_bits(), a1.to_bits()), (b0.to_bits(), b1.to_bits()));
    }

    #[test]
    fn bad_architecture_rejected() {
        let mut arch = AnnArchitecture::linear(3);
        arch.hidden_layers = 4;
        arch.hidden_width = 5;
        assert!(arch.validate().is_err());
        arch.hidden_layers = 1;
        arch.hidden_width = 30;
        assert!(arch.validate().is_err());
    }

    #[test]
    fn single_class_training_fails() {
        let xs = vec![MetaInput::from(vec![0.1]); 4];
        let ys = vec![Label::Normal; 4];
        let r = train_ann(TrainingSet::new(&xs, &ys), &ClassWeights::uniform(), AnnArchitecture::linear(1), &AnnHyper::default(), raw_spec(1));
        assert!(matches!(r, Err(Error::MissingClass(Label::Abnormal))));
    }
}
