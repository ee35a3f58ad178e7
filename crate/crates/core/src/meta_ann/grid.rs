use serde::{Deserialize, Serialize};

use super::{predict_ann, train_with_validation, Activation, AnnArchitecture, AnnHyper, AnnModel};
use crate::corpus::{ClassWeights, Label};
use crate::dataset::{carve_validation, TrainingSet};
use crate::encodings::EncodingSpec;
use crate::error::{Error, Result};
use crate::{par, rng};

/// Architecture grid. Depth 0 contributes a single cell regardless of the
/// width and activation lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnGrid {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl Default for AnnGrid {
    fn default() -> Self {
        Self {
            depths: vec![0, 1, 2, 3],
            widths: vec![5, 10, 20],
            activations: vec![Activation::Relu],
        }
    }
}

impl AnnGrid {
    pub fn single(arch: AnnArchitecture) -> Self {
        Self {
            depths: vec![arch.hidden_layers],
            widths: vec![arch.hidden_width],
            activations: vec![arch.activation],
        }
    }

    pub fn cells(&self, input_len: usize) -> Vec<AnnArchitecture> {
        let mut cells = Vec::new();
        for &depth in &self.depths {
            if depth == 0 {
                if !cells.iter().any(|c: &AnnArchitecture| c.hidden_layers == 0) {
                    cells.push(AnnArchitecture::linear(input_len));
                }
                continue;
            }
            for &width in &self.widths {
                for &activation in &self.activations {
                    cells.push(AnnArchitecture {
                        input_len,
                        hidden_layers: depth,
                        hidden_width: width,
                        activation,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnGridCell {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub params: usize,
    pub validation_accuracy: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnGridReport {
    pub cells: Vec<AnnGridCell>,
    pub best: usize,
}

fn accuracy(model: &AnnModel, data: &TrainingSet<'_>) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(data.labels) {
        let (_, p1) = predict_ann(model, x)?;
        let predicted = if p1 >= 0.5 { Label::Abnormal } else { Label::Normal };
        correct += usize::from(predicted == y);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains every grid cell on the same train/validation carve and keeps the
/// cell with the best validation accuracy; ties go to fewer parameters, then
/// to lower depth. Without a usable validation side, training accuracy is
/// used.
pub fn grid_search_ann(
    data: TrainingSet<'_>,
    weights: &ClassWeights,
    grid: &AnnGrid,
    hyper: &AnnHyper,
    encoding_spec: &EncodingSpec,
) -> Result<(AnnModel, AnnGridReport)> {
    let input_len = data.validate(2)?;
    let cells = grid.cells(input_len);
    if cells.is_empty() {
        return Err(Error::Config("empty ANN grid".into()));
    }
    let (train_idx, val_idx) = carve_validation(&data, hyper.validation_fraction, hyper.seed);
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);
    let val_view = (!val.inputs.is_empty()).then(|| val.view());

    let trained = par::try_map(&cells.iter().enumerate().collect::<Vec<_>>(), |&(i, arch)| {
        let cell_hyper = AnnHyper {
            seed: rng::derive_seed(hyper.seed, &format!("ann_cell_{i}")),
            ..*hyper
        };
        let model = train_with_validation(train.view(), val_view, weights, *arch, &cell_hyper, encoding_spec.clone())?;
        let score = accuracy(&model, val_view.as_ref().unwrap_or(&train.view()))?;
        Ok((model, score))
    })?;

    let report_cells: Vec<AnnGridCell> = cells
        .iter()
        .zip(&trained)
        .map(|(arch, (model, score))| AnnGridCell {
            hidden_layers: arch.hidden_layers,
            hidden_width: arch.hidden_width,
            activation: arch.activation,
            params: arch.n_params(),
            validation_accuracy: *score,
            validation_loss: model.training.as_ref().and_then(|t| t.final_validation_loss),
        })
        .collect();

    let best = (0..cells.len())
        .min_by(|&a, &b| {
            let (ca, cb) = (&report_cells[a], &report_cells[b]);
            cb.validation_accuracy
                .total_cmp(&ca.validation_accuracy)
                .then(ca.params.cmp(&cb.params))
                .then(ca.hidden_layers.cmp(&cb.hidden_layers))
                .then(a.cmp(&b))
        })
        .expect("non-empty grid");
    let model = trained.into_iter().nth(best).expect("index in range").0;
    Ok((
        model,
        AnnGridReport {
            cells: report_cells,
            best,
        },
    ))
}
