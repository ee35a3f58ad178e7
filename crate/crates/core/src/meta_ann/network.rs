use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::corpus::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Elu,
    None,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Relu, Activation::Gelu, Activation::Elu, Activation::None];

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "elu" => Ok(Activation::Elu),
            "none" | "linear" | "identity" => Ok(Activation::None),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + erf(z / std::f64::consts::SQRT_2)),
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::None => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
                cdf + z * INV_SQRT_2PI * (-0.5 * z * z).exp()
            }
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::None => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    #[serde(with = "crate::hexfloat::vec")]
    pub weights: Vec<f64>,
    #[serde(with = "crate::hexfloat::vec")]
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }
}

pub(crate) fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-log softmax(z)[y]` without forming the probability.
pub(crate) fn neg_log_softmax(z: &[f64], y: usize) -> f64 {
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[y]
}

/// Layer stack with a shared hidden activation and a 2-way softmax head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Network<'a> {
    pub layers: &'a [Dense],
    pub activation: Activation,
}

pub(crate) struct Trace {
    /// Input to each layer (index 0 is the sample itself).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Vec<f64>>,
    pub probs: [f64; 2],
}

impl Network<'_> {
    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            let next = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        let probs = softmax2(&pre[last]);
        Trace { inputs, pre, probs }
    }

    pub fn predict(&self, x: &[f64]) -> [f64; 2] {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            a = if l == last {
                z
            } else {
                z.into_iter().map(|v| self.activation.apply(v)).collect()
            };
        }
        softmax2(&a)
    }

    /// Adds `coef * d(-log p_label)/d(params)` into `grads` (one buffer per
    /// layer, weights then bias) and returns `-log p_label`.
    pub fn accumulate_gradient(&self, x: &[f64], label: Label, coef: f64, grads: &mut [Dense]) -> f64 {
        let trace = self.forward_trace(x);
        let y = label.index();
        let nll = neg_log_softmax(&trace.pre[trace.pre.len() - 1], y);
        let mut delta: Vec<f64> = (0..2)
            .map(|k| coef * (trace.probs[k] - if k == y { 1.0 } else { 0.0 }))
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads[l];
            for o in 0..layer.outputs {
                let d = delta[o];
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (gw, &v) in row.iter_mut().zip(input) {
                    *gw += d * v;
                }
            }
            if l > 0 {
                let z_prev = &trace.pre[l - 1];
                delta = (0..layer.inputs)
                    .map(|i| {
                        let back: f64 = (0..layer.outputs)
                            .map(|o| layer.weights[o * layer.inputs + i] * delta[o])
                            .sum();
                        back * self.activation.derivative(z_prev[i])
                    })
                    .collect();
            }
        }
        nll
    }
}
