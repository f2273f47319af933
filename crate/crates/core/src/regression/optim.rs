use crate::error::{Error, Result};

/// One SGD-with-momentum update, in place:
/// `velocity <- m * velocity - lr * grads`, then `params <- params + velocity`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "optimizer state",
            expected: params.len(),
            actual: grads.len().min(velocity.len()),
        });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Parameter vector together with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        sgd_momentum_step(
            params,
            grads,
            &mut self.velocity,
            self.learning_rate,
            self.momentum,
        )
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}
