//! Exact-greedy regression tree on first- and second-order gradients.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        #[serde(with = "crate::hexfloat")]
        value: f64,
    },
    /// Samples with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        #[serde(with = "crate::hexfloat")]
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    pub fn uses_feature(&self, f: usize) -> bool {
        match self {
            TreeNode::Leaf { .. } => false,
            TreeNode::Split {
                feature, left, right, ..
            } => *feature == f || left.uses_feature(f) || right.uses_feature(f),
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        match self {
            TreeNode::Leaf { .. } => None,
            TreeNode::Split {
                feature, left, right, ..
            } => Some(
                (*feature)
                    .max(left.max_feature().unwrap_or(0))
                    .max(right.max_feature().unwrap_or(0)),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_child_weight: f64,
    pub lambda: f64,
}

/// Second-order split gain; leaf score is `G^2 / (H + lambda)`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let score = |g: f64, h: f64| if h + lambda > 0.0 { g * g / (h + lambda) } else { 0.0 };
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

pub fn leaf_value(g: f64, h: f64, lambda: f64) -> f64 {
    if h + lambda > 0.0 {
        -g / (h + lambda)
    } else {
        0.0
    }
}

/// Midpoint threshold that keeps `lo` on the left of `x < threshold`.
pub fn threshold_between(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

pub(crate) struct TreeBuilder<'a> {
    pub rows: &'a [&'a [f64]],
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub params: TreeParams,
}

/// Relative gain margin a later candidate needs to displace the incumbent.
/// Candidates that split the node's rows identically have equal gains up to
/// summation rounding, and that rounding differs between a duplicated row and
/// a weighted one; treating near-equal gains as ties keeps the first
/// candidate (lowest feature, then lowest threshold) in both cases.
const GAIN_TIE: f64 = 1e-10;

struct Best {
    gain: f64,
    slot: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    /// `sorted[k]` lists the node's samples ordered by feature `features[k]`.
    pub fn build(&self, features: &[usize], sorted: Vec<Vec<u32>>, depth: usize) -> TreeNode {
        let (g, h) = sorted[0].iter().fold((0.0, 0.0), |(g, h), &i| {
            (g + self.grad[i as usize], h + self.hess[i as usize])
        });
        let leaf = TreeNode::Leaf {
            value: leaf_value(g, h, self.params.lambda),
        };
        if depth >= self.params.max_depth || sorted[0].len() < 2 {
            return leaf;
        }
        let Some(best) = self.best_split(features, &sorted, g, h) else {
            return leaf;
        };
        let feature = features[best.slot];
        let goes_left = |i: u32| self.rows[i as usize][feature] < best.threshold;
        let (left, right): (Vec<Vec<u32>>, Vec<Vec<u32>>) = sorted
            .into_iter()
            .map(|list| list.into_iter().partition(|&i| goes_left(i)))
            .unzip();
        TreeNode::Split {
            feature,
            threshold: best.threshold,
            left: Box::new(self.build(features, left, depth + 1)),
            right: Box::new(self.build(features, right, depth + 1)),
        }
    }

    fn best_split(&self, features: &[usize], sorted: &[Vec<u32>], g: f64, h: f64) -> Option<Best> {
        let mut best: Option<Best> = None;
        let mcw = self.params.min_child_weight;
        for (slot, list) in sorted.iter().enumerate() {
            let f = features[slot];
            let mut gl = 0.0;
            let mut hl = 0.0;
            for w in 0..list.len() - 1 {
                let i = list[w] as usize;
                gl += self.grad[i];
                hl += self.hess[i];
                let here = self.rows[i][f];
                let next = self.rows[list[w + 1] as usize][f];
                if !(here < next) {
                    continue;
                }
                let hr = h - hl;
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = split_gain(gl, hl, g - gl, hr, self.params.lambda);
                if gain > 0.0 && best.as_ref().is_none_or(|b| gain > b.gain + GAIN_TIE * b.gain) {
                    best = Some(Best {
                        gain,
                        slot,
                        threshold: threshold_between(here, next),
                    });
                }
            }
        }
        best
    }
}
