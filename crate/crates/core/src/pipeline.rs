//! Staged training, leave-one-out evaluation and frequency analysis.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{fit_em, EmConfig, DEFAULT_POSTERIOR_THRESHOLD, DEFAULT_VARIANCE_FLOOR};
use crate::model::{
    normalize_sequence, ExpressionSequence, LabeledDataset, ScalePreset, SymptomRecord,
    ValidationOptions,
};
use crate::regression::{
    init_fc1, predict, refine_end_to_end, train_fc2, AffineMap, OutputScaling, Prediction,
    RefinableStack, RefineSample, SymptomModel, TrainConfig,
};
use crate::stats::{correlation_table, mae, pearson, rmse, CorrelationTable};

pub const DEFAULT_COMPONENTS: usize = 16;
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Settings shared by every training stage.
///
/// The per-stage `seed` fields inside `em`, `refine` and `fc2` are
/// overwritten with values derived from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub components: usize,
    pub variance_floor: f64,
    pub posterior_threshold: f64,
    pub binarize_threshold: f64,
    pub preset: ScalePreset,
    pub em: EmConfig,
    pub refine: TrainConfig,
    pub fc2: TrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_preset(ScalePreset::PanssNeg)
    }
}

impl PipelineConfig {
    pub fn for_preset(preset: ScalePreset) -> Self {
        Self {
            components: DEFAULT_COMPONENTS,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            posterior_threshold: DEFAULT_POSTERIOR_THRESHOLD,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
            preset,
            em: EmConfig::default(),
            refine: TrainConfig::gmm_fv_fc1(preset),
            fc2: TrainConfig::fc2(preset),
            seed: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance floor must be positive, got {}",
                self.variance_floor
            )));
        }
        if !(self.posterior_threshold >= 0.0 && self.posterior_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "posterior threshold must lie in [0, 1), got {}",
                self.posterior_threshold
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "binarize threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        self.refine.check()?;
        self.fc2.check()
    }

    fn em_config(&self) -> EmConfig {
        EmConfig {
            variance_floor: self.variance_floor,
            seed: self.seed,
            ..self.em
        }
    }

    fn fc1_seed(&self) -> u64 {
        self.seed ^ 0xfc1_fc1
    }

    fn fc2_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed ^ 0xfc2_fc2,
            ..self.fc2
        }
    }
}

/// Summary of one completed training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub iterations: usize,
    /// Objective before the stage: EM log-likelihood, or the stage's MSE.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: Option<bool>,
}

/// A trained model together with what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedBundle {
    pub model: SymptomModel,
    pub config: PipelineConfig,
    pub expression_names: Vec<String>,
    pub training_ids: Vec<String>,
    pub stage_log: Vec<StageRecord>,
}

fn normalized_frames(dataset: &LabeledDataset) -> Result<Vec<Array2<f64>>> {
    dataset
        .sequences()
        .iter()
        .map(|s| {
            if s.is_normalized() {
                Ok(s.frames().to_owned())
            } else {
                Ok(normalize_sequence(s)?.frames().to_owned())
            }
        })
        .collect()
}

fn symptom_targets(dataset: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
    dataset
        .sequences()
        .iter()
        .map(|s| {
            dataset
                .record(s.video_id())
                .map(|r| r.symptom_scores.iter().map(|&v| v as f64).collect())
                .ok_or_else(|| Error::Invalid(format!("no record for video {}", s.video_id())))
        })
        .collect()
}

fn column_means(rows: &[Vec<f64>]) -> Array1<f64> {
    let w = rows[0].len();
    let mut m = Array1::zeros(w);
    for r in rows {
        for (a, &b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m / rows.len() as f64
}

/// EM on pooled normalized frames, joint refinement on symptom targets, then
/// the total-score head on the frozen symptom outputs.
pub fn run_training_stages(
    dataset: &LabeledDataset,
    config: &PipelineConfig,
) -> Result<TrainedBundle> {
    config.check()?;
    dataset.ensure_valid(&ValidationOptions::default())?;
    if dataset.is_empty() {
        return Err(Error::Empty("no training videos"));
    }
    let scale = dataset.scale().clone();
    let frames = normalized_frames(dataset)?;
    let targets = symptom_targets(dataset)?;
    let ids: Vec<String> = dataset.video_ids().iter().map(|s| s.to_string()).collect();
    let mut stage_log = Vec::with_capacity(3);

    let views: Vec<ArrayView2<f64>> = frames.iter().map(|f| f.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| Error::Invalid(e.to_string()))?;
    let (gmm, trace) =
        fit_em(pooled.view(), config.components, &config.em_config()).map_err(|e| e.in_stage("em"))?;
    stage_log.push(StageRecord {
        stage: "em".into(),
        iterations: trace.iterations,
        initial_objective: trace.log_likelihoods[0],
        final_objective: *trace.log_likelihoods.last().expect("initial entry"),
        converged: Some(trace.converged),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(config.fc1_seed());
    let fc1 = init_fc1(&gmm, scale.len(), &mut rng)
        .with_biases(column_means(&targets))
        .map_err(|e| e.in_stage("refine"))?;
    let stack = RefinableStack::new(
        &gmm,
        fc1,
        scale.clone(),
        config.posterior_threshold,
        config.variance_floor,
    )
    .map_err(|e| e.in_stage("refine"))?;
    let samples: Vec<RefineSample> = frames
        .iter()
        .zip(&targets)
        .zip(&ids)
        .map(|((f, t), id)| RefineSample {
            id,
            frames: f.view(),
            targets: t,
        })
        .collect();
    let outcome =
        refine_end_to_end(&stack, &samples, &config.refine).map_err(|e| e.in_stage("refine"))?;
    stage_log.push(StageRecord {
        stage: "refine".into(),
        iterations: config.refine.epochs,
        initial_objective: outcome.loss_trace[0],
        final_objective: *outcome.loss_trace.last().expect("final loss"),
        converged: None,
    });
    let stack = outcome.stack;

    let fc2_stage = || -> Result<(SymptomModel, StageRecord)> {
        let v = frames.len();
        let w = scale.len();
        let mut raw = Array2::zeros((v, w));
        for (mut row, f) in raw.rows_mut().into_iter().zip(&frames) {
            row.assign(&stack.predict_raw(f.view())?);
        }
        let totals: Vec<f64> = ids
            .iter()
            .map(|id| dataset.record(id).expect("validated").total_score as f64)
            .collect();
        let fc2_config = config.fc2_config();
        let head_mse = |layer: &crate::regression::DenseLayer| -> Result<f64> {
            let mut sum = 0.0;
            for (x, &t) in raw.rows().into_iter().zip(&totals) {
                let p = layer.forward(x)?[0];
                sum += (p - t) * (p - t);
            }
            Ok(sum / v as f64)
        };
        let untrained = train_fc2(
            raw.view(),
            &totals,
            &TrainConfig {
                epochs: 0,
                ..fc2_config
            },
        )?;
        let fc2 = train_fc2(raw.view(), &totals, &fc2_config)?;
        let record = StageRecord {
            stage: "fc2".into(),
            iterations: fc2_config.epochs,
            initial_objective: head_mse(&untrained)?,
            final_objective: head_mse(&fc2)?,
            converged: None,
        };

        let scaling = if config.refine.cains_scaling || config.fc2.cains_scaling {
            let symptoms = (0..w)
                .map(|j| {
                    if config.refine.cains_scaling {
                        let col = raw.column(j).to_vec();
                        learn_output_scaling(&col, scale.min_score, scale.max_score)
                    } else {
                        Ok(AffineMap::IDENTITY)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let total = if config.fc2.cains_scaling {
                let outs = raw
                    .rows()
                    .into_iter()
                    .map(|x| Ok(fc2.forward(x)?[0]))
                    .collect::<Result<Vec<f64>>>()?;
                learn_output_scaling(&outs, scale.total_min, scale.total_max)?
            } else {
                AffineMap::IDENTITY
            };
            Some(OutputScaling { symptoms, total })
        } else {
            None
        };
        let model = SymptomModel {
            gmm: stack.gmm(),
            fc1: stack.fc1().clone(),
            fc2,
            scale: scale.clone(),
            scaling,
            posterior_threshold: config.posterior_threshold,
        };
        Ok((model, record))
    };
    let (model, record) = fc2_stage().map_err(|e| e.in_stage("fc2"))?;
    stage_log.push(record);

    Ok(TrainedBundle {
        model,
        config: config.clone(),
        expression_names: dataset.sequences()[0].expression_names().to_vec(),
        training_ids: ids,
        stage_log,
    })
}

/// Affine map sending `[min(p), max(p)]` onto `[lo, hi]`. Constant
/// predictions map to the midpoint.
pub fn learn_output_scaling(predictions: &[f64], lo: i32, hi: i32) -> Result<AffineMap> {
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to scale"));
    }
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "training predictions".into(),
            context: "output scaling".into(),
        });
    }
    let pmin = predictions.iter().copied().fold(f64::INFINITY, f64::min);
    let pmax = predictions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (lo as f64, hi as f64);
    if pmax == pmin {
        return Ok(AffineMap {
            scale: 0.0,
            offset: (lo + hi) / 2.0,
        });
    }
    let scale = (hi - lo) / (pmax - pmin);
    Ok(AffineMap {
        scale,
        offset: lo - scale * pmin,
    })
}

/// Fraction of frames in which each expression is present
/// (`probability >= threshold`).
pub fn activation_frequency(seq: &ExpressionSequence, threshold: f64) -> Result<Vec<f64>> {
    if seq.is_normalized() {
        return Err(Error::InvalidParameter(format!(
            "activation frequency needs raw probabilities, {} is mean-normalized",
            seq.video_id()
        )));
    }
    if seq.is_empty() {
        return Err(Error::Empty("sequence has no frames"));
    }
    let t = seq.len() as f64;
    Ok(seq
        .frames()
        .columns()
        .into_iter()
        .map(|c| c.iter().filter(|&&p| p >= threshold).count() as f64 / t)
        .collect())
}

/// Video-by-expression activation frequencies in dataset order.
pub fn frequency_matrix(dataset: &LabeledDataset, threshold: f64) -> Result<Array2<f64>> {
    let seqs = dataset.sequences();
    if seqs.is_empty() {
        return Err(Error::Empty("no videos"));
    }
    let n = seqs[0].dim();
    let mut out = Array2::zeros((seqs.len(), n));
    for (mut row, s) in out.rows_mut().into_iter().zip(seqs) {
        let f = activation_frequency(s, threshold)?;
        if f.len() != n {
            return Err(Error::DimensionMismatch {
                context: "expression count",
                expected: n,
                actual: f.len(),
            });
        }
        row.assign(&Array1::from(f));
    }
    Ok(out)
}

/// Indices of the videos whose frequency lies within 1.5 population standard
/// deviations of the cohort mean.
pub fn outlier_band_filter(frequencies: &[f64]) -> Result<Vec<usize>> {
    if frequencies.len() < 2 {
        return Err(Error::InvalidParameter(
            "outlier band needs at least two videos".into(),
        ));
    }
    let n = frequencies.len() as f64;
    let mean = frequencies.iter().sum::<f64>() / n;
    let sigma = (frequencies.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n).sqrt();
    Ok(frequencies
        .iter()
        .enumerate()
        .filter(|(_, &f)| (f - mean).abs() <= 1.5 * sigma)
        .map(|(i, _)| i)
        .collect())
}

/// Frequencies, banded per expression, correlated with every symptom and the
/// total.
pub fn correlation_report(dataset: &LabeledDataset, threshold: f64) -> Result<CorrelationTable> {
    let freqs = frequency_matrix(dataset, threshold)?;
    let cohorts = freqs
        .columns()
        .into_iter()
        .map(|c| outlier_band_filter(&c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<SymptomRecord> = dataset
        .sequences()
        .iter()
        .map(|s| {
            dataset
                .record(s.video_id())
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("no record for video {}", s.video_id())))
        })
        .collect::<Result<_>>()?;
    correlation_table(
        freqs.view(),
        dataset.sequences()[0].expression_names(),
        &records,
        &dataset.scale().symptom_names,
        Some(&cohorts),
    )
}

/// Anything that can be trained on a fold and score the held-out video.
pub trait FoldTrainer: Sync {
    type Model;
    fn train(&self, training: &LabeledDataset) -> Result<Self::Model>;
    fn predict(&self, model: &Self::Model, seq: &ExpressionSequence) -> Result<Prediction>;
}

/// The full staged pipeline as a fold trainer.
pub struct PipelineTrainer<'a> {
    pub config: &'a PipelineConfig,
}

impl FoldTrainer for PipelineTrainer<'_> {
    type Model = TrainedBundle;

    fn train(&self, training: &LabeledDataset) -> Result<TrainedBundle> {
        run_training_stages(training, self.config)
    }

    fn predict(&self, model: &TrainedBundle, seq: &ExpressionSequence) -> Result<Prediction> {
        predict(&model.model, seq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_id: String,
    pub predicted: SymptomRecord,
    pub truth: SymptomRecord,
    pub raw_symptoms: Vec<f64>,
    pub raw_total: f64,
    pub training_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    /// `None` when either side is constant across folds.
    pub pcc: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

impl MetricRow {
    fn compute(name: &str, predicted: &[f64], truth: &[f64]) -> Result<Self> {
        let pcc = match pearson(predicted, truth) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            name: name.to_string(),
            pcc,
            mae: mae(predicted, truth)?,
            rmse: rmse(predicted, truth)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvReport {
    pub folds: Vec<FoldResult>,
    pub symptoms: Vec<MetricRow>,
    pub total: MetricRow,
}

impl LoocvReport {
    pub fn render(&self) -> String {
        let mut out = format!("{:<40} {:>8} {:>8} {:>8}\n", "", "PCC", "MAE", "RMSE");
        for row in self.symptoms.iter().chain(std::iter::once(&self.total)) {
            let pcc = row.pcc.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
            out.push_str(&format!(
                "{:<40} {:>8} {:>8.3} {:>8.3}\n",
                row.name, pcc, row.mae, row.rmse
            ));
        }
        out
    }
}

/// Leave-one-out over videos: each fold trains on all other videos and
/// predicts the held-out one. Folds run in parallel and are reported in
/// video-id order.
pub fn loocv<T: FoldTrainer>(dataset: &LabeledDataset, trainer: &T) -> Result<LoocvReport> {
    if dataset.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "leave-one-out needs at least two videos, got {}",
            dataset.len()
        )));
    }
    let folds = dataset
        .video_ids()
        .par_iter()
        .map(|&id| -> Result<FoldResult> {
            let training = dataset.without(id);
            let model = trainer.train(&training)?;
            let seq = dataset.sequence(id).expect("id from dataset");
            let pred = trainer.predict(&model, seq)?;
            Ok(FoldResult {
                held_out_id: id.to_string(),
                predicted: pred.to_record(),
                truth: dataset.record(id).cloned().ok_or_else(|| {
                    Error::Invalid(format!("no record for video {id}"))
                })?,
                raw_symptoms: pred.raw_symptoms,
                raw_total: pred.raw_total,
                training_ids: training.video_ids().iter().map(|s| s.to_string()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = dataset.scale();
    let symptoms = (0..scale.len())
        .map(|j| {
            let p: Vec<f64> = folds.iter().map(|f| f.predicted.symptom_scores[j] as f64).collect();
            let t: Vec<f64> = folds.iter().map(|f| f.truth.symptom_scores[j] as f64).collect();
            MetricRow::compute(&scale.symptom_names[j], &p, &t)
        })
        .collect::<Result<Vec<_>>>()?;
    let p: Vec<f64> = folds.iter().map(|f| f.predicted.total_score as f64).collect();
    let t: Vec<f64> = folds.iter().map(|f| f.truth.total_score as f64).collect();
    let total = MetricRow::compute("total", &p, &t)?;
    Ok(LoocvReport {
        folds,
        symptoms,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn raw_seq(frames: Array2<f64>) -> ExpressionSequence {
        let n = frames.ncols();
        ExpressionSequence::new("v", frames, (0..n).map(|i| format!("e{i}")).collect(), 25.0)
            .unwrap()
    }

    #[test]
    fn scaling_maps_endpoints() {
        let m = learn_output_scaling(&[0.0, 1.0, 2.0], 0, 4).unwrap();
        assert_eq!((m.scale, m.offset), (2.0, 0.0));
        let m = learn_output_scaling(&[1.0, 3.0, 2.2], 0, 4).unwrap();
        assert_abs_diff_eq!(m.apply(1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.apply(3.0), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.apply(2.0), 2.0, epsilon = 1e-15);
        let m = learn_output_scaling(&[1.7, 1.7], 0, 4).unwrap();
        assert_eq!(m.apply(1.7), 2.0);
        assert!(learn_output_scaling(&[], 0, 4).is_err());
    }

    #[test]
    fn frequency_spot_values() {
        let col: Vec<f64> = (0..10).map(|t| if t < 5 { 0.9 } else { 0.1 }).collect();
        let frames = Array2::from_shape_fn((10, 3), |(t, j)| match j {
            0 => col[t],
            1 => 0.2,
            _ => 0.5,
        });
        let f = activation_frequency(&raw_seq(frames), 0.5).unwrap();
        assert_eq!(f, vec![0.5, 0.0, 1.0]);
    }

    #[test]
    fn frequency_requires_raw_probabilities() {
        let seq = raw_seq(array![[0.2, 0.7], [0.9, 0.1]]);
        let norm = normalize_sequence(&seq).unwrap();
        assert!(activation_frequency(&norm, 0.5).is_err());
    }

    #[test]
    fn constant_cohort_is_fully_retained() {
        assert_eq!(outlier_band_filter(&[0.3; 7]).unwrap(), (0..7).collect::<Vec<_>>());
        assert!(outlier_band_filter(&[0.3]).is_err());
    }

    #[test]
    fn two_point_cohort_is_retained() {
        let f = [0.2f64, 0.4];
        // mean 0.3, population sigma 0.1, both deviations 0.1 <= 0.15
        let mean = (f[0] + f[1]) / 2.0;
        let sigma = (((f[0] - mean).powi(2) + (f[1] - mean).powi(2)) / 2.0).sqrt();
        assert_abs_diff_eq!(sigma, 0.1, epsilon = 1e-12);
        assert!((f[0] - mean).abs() <= 1.5 * sigma);
        assert_eq!(outlier_band_filter(&f).unwrap(), vec![0, 1]);
    }

    #[test]
    fn extreme_value_is_banded_out() {
        let mut f: Vec<f64> = (0..29).map(|i| 0.30 + 0.001 * (i % 5) as f64).collect();
        f.push(0.95);
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let sigma = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.95 - mean).abs() > 1.5 * sigma);
        let kept = outlier_band_filter(&f).unwrap();
        assert_eq!(kept, (0..29).collect::<Vec<_>>());
    }

    #[test]
    fn config_defaults_follow_presets() {
        let p = PipelineConfig::for_preset(ScalePreset::PanssNeg);
        assert_eq!(p.components, 16);
        assert_eq!(p.variance_floor, 1e-3);
        assert_eq!(p.posterior_threshold, 1e-4);
        assert_eq!(p.refine.learning_rate, 0.001);
        assert_eq!(p.refine.momentum, 0.9);
        assert_eq!(p.fc2.learning_rate, 0.01);
        assert!(!p.refine.cains_scaling);
        let c = PipelineConfig::for_preset(ScalePreset::CainsExp);
        assert_eq!(c.refine.learning_rate, 0.005);
        assert!(c.refine.cains_scaling);
        let bad = PipelineConfig {
            components: 0,
            ..p
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = PipelineConfig::for_preset(ScalePreset::CainsExp);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"components": 4}"#).unwrap();
        assert_eq!(partial.components, 4);
        assert_eq!(partial.posterior_threshold, 1e-4);
    }

    proptest! {
        #[test]
        fn frequencies_lie_in_unit_interval(
            values in prop::collection::vec(0.0f64..=1.0, 1..60),
            threshold in 0.01f64..0.99,
        ) {
            let t = values.len();
            let frames = Array2::from_shape_vec((t, 1), values).unwrap();
            let f = activation_frequency(&raw_seq(frames), threshold).unwrap();
            prop_assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn scaled_training_predictions_stay_in_range(
            preds in prop::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let m = learn_output_scaling(&preds, 1, 7).unwrap();
            for p in &preds {
                let v = m.apply(*p);
                prop_assert!((1.0 - 1e-9..=7.0 + 1e-9).contains(&v));
            }
        }
    }
}
