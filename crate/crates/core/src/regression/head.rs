use ndarray::{Array1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer};
use super::optim::MomentumSgd;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::fisher::{encode, EncodeConfig};
use crate::gmm::GaussianMixture;
use crate::model::{normalize_sequence, ExpressionSequence, SymptomRecord, SymptomScaleSpec};

/// `p -> scale * p + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, p: f64) -> f64 {
        self.scale * p + self.offset
    }
}

/// Output rescaling learned on training predictions, one map per symptom
/// plus one for the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub symptoms: Vec<AffineMap>,
    pub total: AffineMap,
}

/// Everything needed to score a new video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomModel {
    pub gmm: GaussianMixture,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub scale: SymptomScaleSpec,
    pub scaling: Option<OutputScaling>,
    pub posterior_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub raw_symptoms: Vec<f64>,
    pub raw_total: f64,
    pub symptom_scores: Vec<i32>,
    pub total_score: i32,
}

impl Prediction {
    pub fn to_record(&self) -> SymptomRecord {
        SymptomRecord {
            video_id: self.video_id.clone(),
            symptom_scores: self.symptom_scores.clone(),
            total_score: self.total_score,
        }
    }
}

impl SymptomModel {
    /// Unscaled, unrounded FC1 and FC2 outputs. Raw sequences are
    /// mean-normalized first.
    pub fn raw_outputs(&self, seq: &ExpressionSequence) -> Result<(Array1<f64>, f64)> {
        let normalized;
        let seq = if seq.is_normalized() {
            seq
        } else {
            normalized = normalize_sequence(seq)?;
            &normalized
        };
        let fv = encode(
            seq,
            &self.gmm,
            &EncodeConfig {
                sparsify_threshold: self.posterior_threshold,
            },
        )?;
        let symptoms = self.fc1.forward(fv.values())?;
        let total = self.fc2.forward(symptoms.view())?[0];
        Ok((symptoms, total))
    }
}

/// Nearest integer (halves away from zero), clamped to `[min, max]`.
pub fn round_to_range(value: f64, min: i32, max: i32) -> Result<i32> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            tensor: "raw prediction".into(),
            context: "rounding".into(),
        });
    }
    Ok(value.round().clamp(min as f64, max as f64) as i32)
}

/// Integer symptom and total scores for one video.
pub fn predict(model: &SymptomModel, seq: &ExpressionSequence) -> Result<Prediction> {
    let (raw_symptoms, raw_total) = model.raw_outputs(seq)?;
    let scale = &model.scale;
    let mut symptom_scores = Vec::with_capacity(raw_symptoms.len());
    for (i, &raw) in raw_symptoms.iter().enumerate() {
        let v = match &model.scaling {
            Some(s) => s.symptoms[i].apply(raw),
            None => raw,
        };
        symptom_scores.push(round_to_range(v, scale.min_score, scale.max_score)?);
    }
    let total = match &model.scaling {
        Some(s) => s.total.apply(raw_total),
        None => raw_total,
    };
    Ok(Prediction {
        video_id: seq.video_id().to_string(),
        raw_symptoms: raw_symptoms.to_vec(),
        raw_total,
        symptom_scores,
        total_score: round_to_range(total, scale.total_min, scale.total_max)?,
    })
}

/// Trains the single-output total-score head on symptom estimates.
///
/// Weights start from the Glorot scheme; the bias starts at the mean total so
/// the ReLU output is live from the first epoch.
pub fn train_fc2(
    symptom_predictions: ArrayView2<'_, f64>,
    totals: &[f64],
    config: &TrainConfig,
) -> Result<DenseLayer> {
    config.check()?;
    let (v, w) = symptom_predictions.dim();
    if v == 0 {
        return Err(Error::Empty("no training videos for FC2"));
    }
    if totals.len() != v {
        return Err(Error::DimensionMismatch {
            context: "FC2 targets",
            expected: v,
            actual: totals.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mean_total = totals.iter().sum::<f64>() / v as f64;
    let mut layer = DenseLayer::glorot(w, 1, Activation::Relu, &mut rng)
        .with_biases(Array1::from_elem(1, mean_total))?;

    let mut flat: Vec<f64> = layer
        .weights()
        .iter()
        .chain(layer.biases().iter())
        .copied()
        .collect();
    let mut opt = MomentumSgd::new(flat.len(), config.learning_rate, config.momentum);
    for epoch in 0..config.epochs {
        let mut grad = vec![0.0; w + 1];
        for (x, &t) in symptom_predictions.rows().into_iter().zip(totals) {
            let z = layer.pre_activation(x)?[0];
            let d = 2.0 * (layer.activation().apply(z) - t) * layer.activation().derivative(z)
                / v as f64;
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += d * xi;
            }
            grad[w] += d;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "FC2 gradient".into(),
                context: format!("epoch {epoch}"),
            });
        }
        opt.step(&mut flat, &grad)?;
        let (weights, biases) = layer.params_mut();
        weights.iter_mut().zip(&flat[..w]).for_each(|(p, v)| *p = *v);
        biases[0] = flat[w];
    }
    Ok(layer)
}
