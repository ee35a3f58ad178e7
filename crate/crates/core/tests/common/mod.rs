//! Independent re-derivations used as oracles by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use winstack::corpus::Label;
use winstack::encodings::MetaInput;
use winstack::meta_gbt::{gradient_pair, split_gain, GbtModel, TreeNode};

pub fn rng(seed: u64) -> winstack::rng::Rng {
    winstack::rng::rng_from(seed)
}

/// Leaf reached by `x`, identified by its address inside `tree`.
fn leaf_of(tree: &TreeNode, x: &[f64]) -> usize {
    let mut node = tree;
    loop {
        match node {
            TreeNode::Leaf { .. } => return node as *const TreeNode as usize,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => node = if x[*feature] < *threshold { left } else { right },
        }
    }
}

fn leaves(tree: &TreeNode, out: &mut Vec<(usize, f64)>) {
    match tree {
        TreeNode::Leaf { value } => out.push((tree as *const TreeNode as usize, *value)),
        TreeNode::Split { left, right, .. } => {
            leaves(left, out);
            leaves(right, out);
        }
    }
}

/// Margins after each prefix of trees, starting from the base score.
fn margins_before_each_round(model: &GbtModel, rows: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut m = vec![model.base_score; rows.len()];
    let mut out = Vec::with_capacity(model.trees.len());
    for tree in &model.trees {
        out.push(m.clone());
        for (mi, x) in m.iter_mut().zip(rows) {
            *mi += model.config.learning_rate * tree.eval(x);
        }
    }
    out
}

/// Largest |leaf - (-G / (H + lambda))| over every leaf of every tree, with
/// G and H recomputed from the training set and the preceding trees.
pub fn max_leaf_error(model: &GbtModel, inputs: &[MetaInput], labels: &[Label], sample_w: &[f64]) -> f64 {
    let rows: Vec<&[f64]> = inputs.iter().map(|x| x.values.as_slice()).collect();
    let lambda = model.config.lambda;
    let mut worst: f64 = 0.0;
    for (tree, margins) in model.trees.iter().zip(margins_before_each_round(model, &rows)) {
        let mut list = Vec::new();
        leaves(tree, &mut list);
        for (id, value) in list {
            let (mut g, mut h) = (0.0, 0.0);
            for i in 0..rows.len() {
                if leaf_of(tree, rows[i]) == id {
                    let (gi, hi) = gradient_pair(margins[i], labels[i], sample_w[i]);
                    g += gi;
                    h += hi;
                }
            }
            let expected = if h + lambda > 0.0 { -g / (h + lambda) } else { 0.0 };
            worst = worst.max((value - expected).abs());
        }
    }
    worst
}

/// For every split node of every tree, the chosen gain minus the best gain
/// found by brute force over all features and thresholds at that node.
/// Non-negative (up to rounding) when the search is exact.
pub fn min_gain_slack(model: &GbtModel, inputs: &[MetaInput], labels: &[Label], sample_w: &[f64]) -> f64 {
    let rows: Vec<&[f64]> = inputs.iter().map(|x| x.values.as_slice()).collect();
    let mut slack = f64::INFINITY;
    for (tree, margins) in model.trees.iter().zip(margins_before_each_round(model, &rows)) {
        let gh: Vec<(f64, f64)> = (0..rows.len()).map(|i| gradient_pair(margins[i], labels[i], sample_w[i])).collect();
        let all: Vec<usize> = (0..rows.len()).collect();
        walk_gain(tree, &rows, &gh, &all, model, &mut slack);
    }
    slack
}

fn walk_gain(node: &TreeNode, rows: &[&[f64]], gh: &[(f64, f64)], members: &[usize], model: &GbtModel, slack: &mut f64) {
    let TreeNode::Split {
        feature,
        threshold,
        left,
        right,
    } = node
    else {
        return;
    };
    let lambda = model.config.lambda;
    let mcw = model.config.min_child_weight;
    // Hessian sums recomputed here round differently from the builder's
    // running sums, so candidates within 1e-9 of the bound are ambiguous.
    let gain_of = |f: usize, t: f64, bound: f64| -> Option<f64> {
        let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
        for &i in members {
            if rows[i][f] < t {
                gl += gh[i].0;
                hl += gh[i].1;
            } else {
                gr += gh[i].0;
                hr += gh[i].1;
            }
        }
        (hl >= bound && hr >= bound).then(|| split_gain(gl, hl, gr, hr, lambda))
    };
    let chosen = gain_of(*feature, *threshold, mcw - 1e-9).expect("chosen split respects min_child_weight");
    let mut best = f64::NEG_INFINITY;
    for f in 0..rows[0].len() {
        let mut vals: Vec<f64> = members.iter().map(|&i| rows[i][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            if let Some(g) = gain_of(f, (w[0] + w[1]) / 2.0, mcw + 1e-9) {
                best = best.max(g);
            }
        }
    }
    *slack = slack.min(chosen - best + 1e-9 * best.abs().max(1.0));
    let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| rows[i][*feature] < *threshold);
    walk_gain(left, rows, gh, &l, model, slack);
    walk_gain(right, rows, gh, &r, model, slack);
}

/// Same shape and thresholds everywhere; leaf values within `tol`.
pub fn trees_match(a: &TreeNode, b: &TreeNode, tol: f64) -> bool {
    match (a, b) {
        (TreeNode::Leaf { value: x }, TreeNode::Leaf { value: y }) => (x - y).abs() <= tol,
        (
            TreeNode::Split {
                feature: fa,
                threshold: ta,
                left: la,
                right: ra,
            },
            TreeNode::Split {
                feature: fb,
                threshold: tb,
                left: lb,
                right: rb,
            },
        ) => fa == fb && ta == tb && trees_match(la, lb, tol) && trees_match(ra, rb, tol),
        _ => false,
    }
}

/// Random classification set: label is a noisy threshold of a random
/// linear score, so trees have real structure to find.
pub fn random_dataset(n: usize, width: usize, seed: u64) -> (Vec<MetaInput>, Vec<Label>) {
    let mut r = rng(seed);
    let coef: Vec<f64> = (0..width).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..width).map(|_| r.random::<f64>()).collect();
        let score: f64 = x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + r.random_range(-0.3..0.3);
        let mid: f64 = coef.iter().sum::<f64>() / 2.0;
        ys.push(if score > mid { Label::Abnormal } else { Label::Normal });
        xs.push(MetaInput::from(x));
    }
    (xs, ys)
}

/// XOR of two window positions plus nuisance positions.
pub fn xor_dataset(n: usize, width: usize, seed: u64) -> (Vec<MetaInput>, Vec<Label>, Vec<String>) {
    let mut r = rng(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let a: bool = r.random();
        let b: bool = r.random();
        let mut x: Vec<f64> = (0..width).map(|_| r.random::<f64>()).collect();
        x[0] = if a { r.random_range(0.6..1.0) } else { r.random_range(0.0..0.4) };
        x[1] = if b { r.random_range(0.6..1.0) } else { r.random_range(0.0..0.4) };
        xs.push(MetaInput::from(x));
        ys.push(if a ^ b { Label::Abnormal } else { Label::Normal });
    }
    let groups = (0..n).map(|i| format!("p{i:04}")).collect();
    (xs, ys, groups)
}
