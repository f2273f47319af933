//! Regression heads, costs, optimizer and end-to-end refinement.

mod cost;
mod head;
mod layer;
mod optim;
mod refine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScalePreset;

pub use cost::{bce_cost, mse_cost, BCE_EPS};
pub use head::{predict, round_to_range, train_fc2, AffineMap, OutputScaling, Prediction, SymptomModel};
pub use layer::{Activation, DenseLayer};
pub use optim::{sgd_momentum_step, MomentumSgd};
pub use refine::{
    init_fc1, loss_and_gradient, refine_end_to_end, stack_features, stack_loss, ParamGroup,
    ParamLayout, RefinableStack, RefineOutcome, RefineSample,
};

/// Optimizer settings for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Rescale raw outputs to the scale's range with a map learned on the
    /// training predictions.
    pub cains_scaling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 200,
            seed: 0,
            cains_scaling: false,
        }
    }
}

impl TrainConfig {
    /// Joint mixture/FV/FC1 settings: lr 0.005 for CAINS, 0.001 for PANSS.
    pub fn gmm_fv_fc1(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::CainsExp => Self {
                learning_rate: 0.005,
                cains_scaling: true,
                ..Self::default()
            },
            ScalePreset::PanssNeg => Self::default(),
        }
    }

    /// Total-score head settings.
    pub fn fc2(preset: ScalePreset) -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 2000,
            cains_scaling: preset == ScalePreset::CainsExp,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}
