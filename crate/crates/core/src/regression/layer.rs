use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at the pre-activation `z`. ReLU uses 0 at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `activation(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Array2<f64>,
    biases: Array1<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::DimensionMismatch {
                context: "dense layer biases",
                expected: weights.nrows(),
                actual: biases.len(),
            });
        }
        if weights.is_empty() {
            return Err(Error::Empty("dense layer has no weights"));
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "dense layer parameters".into(),
                context: "construction".into(),
            });
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    /// Weights uniform in `±sqrt(6 / (in + out))`, zero biases.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            rng.random_range(-limit..=limit)
        });
        Self {
            weights,
            biases: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn with_biases(mut self, biases: Array1<f64>) -> Result<Self> {
        if biases.len() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                context: "dense layer biases",
                expected: self.out_dim(),
                actual: biases.len(),
            });
        }
        self.biases = biases;
        Ok(self)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &Array1<f64> {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.weights, &mut self.biases)
    }

    /// `W x + b` before the activation.
    pub fn pre_activation(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                context: "dense layer input",
                expected: self.in_dim(),
                actual: x.len(),
            });
        }
        Ok(self.weights.dot(&x) + &self.biases)
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let act = self.activation;
        Ok(self.pre_activation(x)?.mapv(|z| act.apply(z)))
    }
}
