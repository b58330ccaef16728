//! Trainable classification head: dense -> ReLU -> dropout -> dense -> softmax.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden_units: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub seed: u64,
}

impl HeadSpec {
    pub fn new(num_classes: usize) -> Self {
        Self {
            hidden_units: 512,
            dropout_rate: 0.5,
            num_classes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "head needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("head hidden_units must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Fully connected layer, `y = x W + b` with `W` shaped (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub hidden: Dense,
    pub output: Dense,
}

/// Gradients of the mean loss with respect to every head parameter.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub hidden: Dense,
    pub output: Dense,
}

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre_activation: Array2<f64>,
    /// Dropout multipliers (0 or 1/(1-rate)), all ones in inference mode.
    pub mask: Array2<f64>,
    pub dropped: Array2<f64>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl Head {
    pub fn new(spec: HeadSpec, feature_len: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self {
            hidden: Dense::glorot(feature_len, spec.hidden_units, &mut rng),
            output: Dense::glorot(spec.hidden_units, spec.num_classes, &mut rng),
            spec,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.hidden.weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden.parameter_count() + self.output.parameter_count()
    }

    /// Inference-mode probabilities (dropout disabled).
    pub fn predict(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.forward(features, None).probabilities
    }

    /// Forward pass; dropout is applied only when `rng` is given.
    pub fn forward(&self, features: ArrayView2<f64>, rng: Option<&mut ChaCha8Rng>) -> ForwardCache {
        let pre_activation = self.hidden.forward(features);
        let activated = pre_activation.mapv(|v| v.max(0.0));
        let mask = match rng {
            Some(rng) if self.spec.dropout_rate > 0.0 => {
                let keep = 1.0 - self.spec.dropout_rate;
                Array2::from_shape_simple_fn(activated.dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            }
            _ => Array2::ones(activated.dim()),
        };
        let dropped = &activated * &mask;
        let logits = self.output.forward(dropped.view());
        let probabilities = softmax_rows(logits.view());
        ForwardCache {
            pre_activation,
            mask,
            dropped,
            logits,
            probabilities,
        }
    }

    /// Backpropagates the logit gradient through the head.
    pub fn backward(
        &self,
        features: ArrayView2<f64>,
        cache: &ForwardCache,
        logit_grad: ArrayView2<f64>,
    ) -> HeadGradients {
        let output = Dense {
            weight: cache.dropped.t().dot(&logit_grad),
            bias: logit_grad.sum_axis(Axis(0)),
        };
        let mut d_hidden = logit_grad.dot(&self.output.weight.t()) * &cache.mask;
        d_hidden.zip_mut_with(&cache.pre_activation, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let hidden = Dense {
            weight: features.t().dot(&d_hidden),
            bias: d_hidden.sum_axis(Axis(0)),
        };
        HeadGradients { hidden, output }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for a in [
            self.hidden.weight.as_slice(),
            self.hidden.bias.as_slice(),
            self.output.weight.as_slice(),
            self.output.bias.as_slice(),
        ] {
            for v in a.expect("contiguous parameters") {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
