use serde::{Deserialize, Serialize};

use super::{train_gbt, GbtConfig, GbtModel};
use crate::corpus::{group_folds, ClassWeights, Label};
use crate::dataset::TrainingSet;
use crate::encodings::EncodingSpec;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub depth: usize,
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub best_depth: usize,
    pub table: Vec<CvRow>,
    pub model: GbtModel,
}

/// K-fold selection of `max_depth` over `config.depth_grid`, with folds
/// split by group (patient) when groups are present. The winning depth is
/// retrained on all of `data`.
pub fn cv_select_depth(data: TrainingSet<'_>, weights: &ClassWeights, config: &GbtConfig, encoding_spec: &EncodingSpec) -> Result<CvOutcome> {
    config.validate()?;
    let k = config.cv_folds;
    if k < 2 {
        return Err(Error::Config(format!("cv_folds must be at least 2, got {k}")));
    }
    data.validate(k)?;
    let names: Vec<String> = (0..data.len()).map(|i| data.group_of(i)).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let fold_of = group_folds(&refs, k, config.seed);

    let mut depths = config.depth_grid.clone();
    depths.sort_unstable();
    depths.dedup();
    let cells: Vec<(usize, usize)> = depths.iter().flat_map(|&d| (0..k).map(move |f| (d, f))).collect();
    let scores = par::try_map(&cells, |&(depth, fold)| {
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| fold_of[i] != fold);
        let train = data.select(&train_idx);
        let val = data.select(&val_idx);
        let cfg = GbtConfig {
            max_depth: depth,
            ..config.clone()
        };
        let model = train_gbt(train.view(), weights, &cfg, encoding_spec.clone())?;
        let correct = val
            .inputs
            .iter()
            .zip(&val.labels)
            .filter(|(x, &y)| {
                let p = super::sigmoid(model.margin_unchecked(&x.values));
                (p >= 0.5) == (y == Label::Abnormal)
            })
            .count();
        Ok(correct as f64 / val.inputs.len().max(1) as f64)
    })?;

    let table: Vec<CvRow> = depths
        .iter()
        .enumerate()
        .map(|(di, &depth)| {
            let fold_accuracy = scores[di * k..(di + 1) * k].to_vec();
            let mean_accuracy = fold_accuracy.iter().sum::<f64>() / k as f64;
            CvRow {
                depth,
                fold_accuracy,
                mean_accuracy,
            }
        })
        .collect();
    // Strict improvement required, so ties stay with the smaller depth.
    let best = table
        .iter()
        .fold(&table[0], |best, row| if row.mean_accuracy > best.mean_accuracy { row } else { best });
    let best_depth = best.depth;
    let model = train_gbt(
        data,
        weights,
        &GbtConfig {
            max_depth: best_depth,
            ..config.clone()
        },
        encoding_spec.clone(),
    )?;
    Ok(CvOutcome { best_depth, table, model })
}
