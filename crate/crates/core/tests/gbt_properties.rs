mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use winstack::corpus::{class_weights, ClassWeights, Label};
use winstack::dataset::TrainingSet;
use winstack::encodings::{EncodingKind, EncodingSpec, MetaInput};
use winstack::meta_gbt::{predict_gbt, train_gbt, GbtConfig};

fn spec(width: usize) -> EncodingSpec {
    EncodingSpec::new(EncodingKind::RawProb, width)
}

fn small_cfg(rounds: usize, depth: usize) -> GbtConfig {
    GbtConfig {
        rounds,
        max_depth: depth,
        ..GbtConfig::default()
    }
}

fn both_classes(ys: &[Label]) -> bool {
    let a = ys.iter().filter(|&&y| y == Label::Abnormal).count();
    a >= 2 && ys.len() - a >= 2
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn leaves_and_gains_are_exact(seed in any::<u64>(), n in 20usize..80, width in 1usize..5, depth in 1usize..4) {
        let (xs, ys) = common::random_dataset(n, width, seed);
        prop_assume!(both_classes(&ys));
        let w = class_weights(&ys).unwrap();
        let model = train_gbt(TrainingSet::new(&xs, &ys), &w, &small_cfg(8, depth), spec(width)).unwrap();
        let sw: Vec<f64> = ys.iter().map(|&y| w.weight(y)).collect();
        prop_assert!(common::max_leaf_error(&model, &xs, &ys, &sw) <= 1e-12);
        prop_assert!(common::min_gain_slack(&model, &xs, &ys, &sw) >= 0.0);
        prop_assert!(model.trees.iter().all(|t| t.depth() <= depth));
        prop_assert!(model.trees.iter().all(|t| t.max_feature().is_none_or(|f| f < width)));
    }

    #[test]
    fn loss_never_increases(seed in any::<u64>(), n in 20usize..120, eta in 0.05f64..=1.0) {
        let (xs, ys) = common::random_dataset(n, 3, seed);
        prop_assume!(both_classes(&ys));
        let cfg = GbtConfig { learning_rate: eta, ..small_cfg(30, 3) };
        let model = train_gbt(TrainingSet::new(&xs, &ys), &class_weights(&ys).unwrap(), &cfg, spec(3)).unwrap();
        for pair in model.training_loss.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "{:?}", pair);
        }
    }

    #[test]
    fn row_order_does_not_change_predictions(seed in any::<u64>(), n in 20usize..80) {
        let (xs, ys) = common::random_dataset(n, 3, seed);
        prop_assume!(both_classes(&ys));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut common::rng(seed ^ 0x9e37));
        let xs2: Vec<MetaInput> = idx.iter().map(|&i| xs[i].clone()).collect();
        let ys2: Vec<Label> = idx.iter().map(|&i| ys[i]).collect();
        let w = class_weights(&ys).unwrap();
        let a = train_gbt(TrainingSet::new(&xs, &ys), &w, &small_cfg(10, 3), spec(3)).unwrap();
        let b = train_gbt(TrainingSet::new(&xs2, &ys2), &w, &small_cfg(10, 3), spec(3)).unwrap();
        for (ta, tb) in a.trees.iter().zip(&b.trees) {
            prop_assert!(common::trees_match(ta, tb, 1e-12));
        }
        for x in &xs {
            prop_assert!((predict_gbt(&a, x).unwrap() - predict_gbt(&b, x).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicating_minority_equals_weighting_it() {
    let (xs, ys) = common::random_dataset(60, 3, 17);
    // Keep every abnormal sample but only a third of the normals, so the
    // abnormal class is the majority and normals get weight 3 when tripled.
    let keep: Vec<usize> = (0..xs.len()).filter(|&i| ys[i] == Label::Abnormal || i % 3 == 0).collect();
    let xs: Vec<MetaInput> = keep.iter().map(|&i| xs[i].clone()).collect();
    let ys: Vec<Label> = keep.iter().map(|&i| ys[i]).collect();
    let mut dup_x = xs.clone();
    let mut dup_y = ys.clone();
    for (x, &y) in xs.iter().zip(&ys) {
        if y == Label::Normal {
            for _ in 0..2 {
                dup_x.push(x.clone());
                dup_y.push(y);
            }
        }
    }
    let weighted = ClassWeights {
        n_normal: 0,
        n_abnormal: 0,
        a_normal: 3.0,
        a_abnormal: 1.0,
    };
    let cfg = small_cfg(20, 4);
    let a = train_gbt(TrainingSet::new(&xs, &ys), &weighted, &cfg, spec(3)).unwrap();
    let b = train_gbt(TrainingSet::new(&dup_x, &dup_y), &ClassWeights::uniform(), &cfg, spec(3)).unwrap();
    assert!((a.base_score - b.base_score).abs() < 1e-12);
    assert_eq!(a.trees.len(), b.trees.len());
    for (ta, tb) in a.trees.iter().zip(&b.trees) {
        assert!(common::trees_match(ta, tb, 1e-12));
    }
}
