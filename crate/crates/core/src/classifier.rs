//! Linear-logistic frame classifier trained with binary cross-entropy.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::{bce_cost, MomentumSgd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Drop majority-class samples until both classes have equal counts.
    pub undersample: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            momentum: 0.9,
            epochs: 500,
            undersample: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameClassifier {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl FrameClassifier {
    /// Probability that the expression is present.
    pub fn probability(&self, x: ArrayView1<'_, f64>) -> f64 {
        let z = self.weights.dot(&x) + self.bias;
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, x: ArrayView1<'_, f64>) -> bool {
        self.probability(x) >= 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Rows actually used, in training order.
    pub used_rows: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
    pub final_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    /// F1 of the positive (expression present) class.
    pub f1: f64,
}

/// Row indices with the majority class randomly thinned to the minority
/// count. Output is sorted.
pub fn undersample_rows(labels: &[bool], seed: u64) -> Vec<usize> {
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i]);
    let keep = pos.len().min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let larger = if pos.len() > neg.len() { &mut pos } else { &mut neg };
    larger.shuffle(&mut rng);
    larger.truncate(keep);
    let mut rows: Vec<usize> = pos.into_iter().chain(neg).collect();
    rows.sort_unstable();
    rows
}

pub fn train_frame_classifier(
    features: ArrayView2<'_, f64>,
    labels: &[bool],
    config: &ClassifierConfig,
) -> Result<(FrameClassifier, TrainingSummary)> {
    let (b, d) = features.dim();
    if labels.len() != b {
        return Err(Error::DimensionMismatch {
            context: "classifier labels",
            expected: b,
            actual: labels.len(),
        });
    }
    if b == 0 || d == 0 {
        return Err(Error::Empty("no classifier training data"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::InvalidParameter(
            "classifier training data contains a single class".into(),
        ));
    }
    let rows: Vec<usize> = if config.undersample {
        undersample_rows(labels, config.seed)
    } else {
        (0..b).collect()
    };
    let n = rows.len() as f64;
    let mut params = vec![0.0; d + 1];
    let mut opt = MomentumSgd::new(d + 1, config.learning_rate, config.momentum);
    let mut clf = FrameClassifier {
        weights: Array1::zeros(d),
        bias: 0.0,
    };
    for epoch in 0..config.epochs {
        let mut grad = vec![0.0; d + 1];
        for &r in &rows {
            let x = features.row(r);
            let residual = clf.probability(x) - if labels[r] { 1.0 } else { 0.0 };
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += residual * xi / n;
            }
            grad[d] += residual / n;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "classifier gradient".into(),
                context: format!("epoch {epoch}"),
            });
        }
        opt.step(&mut params, &grad)?;
        clf.weights.assign(&ArrayView1::from(&params[..d]));
        clf.bias = params[d];
    }
    let targets: Vec<f64> = rows.iter().map(|&r| if labels[r] { 1.0 } else { 0.0 }).collect();
    let probs: Vec<f64> = rows.iter().map(|&r| clf.probability(features.row(r))).collect();
    let positives = rows.iter().filter(|&&r| labels[r]).count();
    let summary = TrainingSummary {
        positives,
        negatives: rows.len() - positives,
        final_cost: bce_cost(&targets, &probs)?,
        used_rows: rows,
    };
    Ok((clf, summary))
}

pub fn evaluate_classifier(
    clf: &FrameClassifier,
    features: ArrayView2<'_, f64>,
    labels: &[bool],
) -> Result<ClassifierMetrics> {
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "classifier labels",
            expected: features.nrows(),
            actual: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("no classifier evaluation data"));
    }
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (x, &truth) in features.rows().into_iter().zip(labels) {
        let pred = clf.predict(x);
        correct += usize::from(pred == truth);
        match (pred, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(ClassifierMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        f1: if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64, gap: f64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let c = if labels[i] { gap } else { -gap };
            c + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, labels)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(400, 1, 3.0);
        let (clf, summary) = train_frame_classifier(x.view(), &y, &ClassifierConfig::default()).unwrap();
        let m = evaluate_classifier(&clf, x.view(), &y).unwrap();
        assert!(m.accuracy >= 0.99, "{m:?}");
        assert!(m.f1 >= 0.99);
        assert!(summary.final_cost < 0.1);
    }

    #[test]
    fn random_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((1000, 3), || rng.sample::<f64, _>(StandardNormal));
        let y: Vec<bool> = (0..1000).map(|_| rng.random_bool(0.5)).collect();
        let (train_x, test_x) = x.view().split_at(ndarray::Axis(0), 500);
        let (clf, _) =
            train_frame_classifier(train_x, &y[..500], &ClassifierConfig::default()).unwrap();
        let m = evaluate_classifier(&clf, test_x, &y[500..]).unwrap();
        assert!((m.accuracy - 0.5).abs() <= 0.1, "{m:?}");
    }

    #[test]
    fn undersampling_balances_classes() {
        let (x, _) = blobs(100, 3, 2.0);
        let y: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let cfg = ClassifierConfig {
            undersample: true,
            epochs: 10,
            ..ClassifierConfig::default()
        };
        let (_, summary) = train_frame_classifier(x.view(), &y, &cfg).unwrap();
        assert_eq!((summary.positives, summary.negatives), (10, 10));
        assert_eq!(summary.used_rows.len(), 20);
        assert!(summary.used_rows[..10].iter().all(|&r| r < 10));
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Array2::zeros((4, 2));
        assert!(train_frame_classifier(x.view(), &[true; 4], &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn f1_uses_the_present_class() {
        let clf = FrameClassifier {
            weights: Array1::from(vec![1.0]),
            bias: 0.0,
        };
        let x = Array2::from_shape_vec((4, 1), vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        // predictions: T, T, F, F against truth T, F, T, F
        let m = evaluate_classifier(&clf, x.view(), &[true, false, true, false]).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.f1, 0.5);
    }
}
