//! Synthetic labelled cohorts with a known generating process.
//!
//! Each video draws its own mixing weights over a small set of latent facial
//! states. A state fixes, per expression, a logit mean that is either high
//! ("on") or low ("off"); frame probabilities are logistic-squashed Gaussian
//! draws around that mean. Symptom scores are an affine map of the realized
//! activation frequencies plus Gaussian noise, rounded and clamped.

use ndarray::Array2;
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpressionSequence, LabeledDataset, ScalePreset, SymptomRecord, SymptomScaleSpec};
use crate::pipeline::{activation_frequency, DEFAULT_BINARIZE_THRESHOLD};
use crate::regression::round_to_range;

const MAX_ATTEMPTS: u64 = 10;

/// Default expression names for an 11-expression cohort.
pub fn default_expression_names() -> Vec<String> {
    [
        "inner brow raiser",
        "outer brow raiser",
        "brow lowerer",
        "upper lid raiser",
        "cheek raiser",
        "lip corner puller",
        "lips part",
        "neutral expression",
        "lid tightener",
        "eyes closed",
        "smile",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// `score_j = intercepts[j] + sum_i coefficients[j][i] * frequency_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl ScoreMap {
    pub fn apply(&self, frequencies: &[f64]) -> Vec<f64> {
        self.intercepts
            .iter()
            .zip(&self.coefficients)
            .map(|(b, row)| b + row.iter().zip(frequencies).map(|(c, f)| c * f).sum::<f64>())
            .collect()
    }

    fn check(&self, w: usize, n: usize) -> Result<()> {
        if self.intercepts.len() != w || self.coefficients.len() != w {
            return Err(Error::DimensionMismatch {
                context: "score map symptoms",
                expected: w,
                actual: self.intercepts.len().min(self.coefficients.len()),
            });
        }
        if let Some(row) = self.coefficients.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "score map expressions",
                expected: n,
                actual: row.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub expression_names: Vec<String>,
    /// Number of latent facial states.
    pub true_components: usize,
    /// Probability that a state switches a given expression on.
    pub on_probability: f64,
    /// Logit mean magnitude for on (+) and off (-) expressions.
    pub logit_spread: f64,
    pub logit_sd: f64,
    /// Concentration of the per-video state weights.
    pub dirichlet_alpha: f64,
    pub noise_sd: f64,
    pub preset: ScalePreset,
    /// When absent, symptom `j` is driven by the `j`-th most variable
    /// expression, mapped from its observed frequency range onto
    /// `calibration_range` (defaults to the scale's score range).
    pub score_map: Option<ScoreMap>,
    pub calibration_range: Option<(f64, f64)>,
    pub frame_rate_hz: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            videos: 40,
            min_frames: 500,
            max_frames: 2000,
            expression_names: default_expression_names(),
            true_components: 4,
            on_probability: 0.3,
            logit_spread: 3.0,
            logit_sd: 1.0,
            dirichlet_alpha: 1.0,
            noise_sd: 0.1,
            preset: ScalePreset::PanssNeg,
            score_map: None,
            calibration_range: None,
            frame_rate_hz: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.videos == 0 {
            return bad("synthetic cohort needs at least one video".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range {}..={} is empty",
                self.min_frames, self.max_frames
            ));
        }
        if self.expression_names.is_empty() || self.true_components == 0 {
            return bad("need at least one expression and one latent state".into());
        }
        if !(0.0..=1.0).contains(&self.on_probability) {
            return bad(format!("on probability {} outside [0, 1]", self.on_probability));
        }
        for (what, v) in [
            ("logit sd", self.logit_sd),
            ("dirichlet alpha", self.dirichlet_alpha),
            ("frame rate", self.frame_rate_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{what} must be positive, got {v}"));
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise sd must be nonnegative, got {}", self.noise_sd));
        }
        if let Some(map) = &self.score_map {
            map.check(self.preset.spec().len(), self.expression_names.len())?;
        }
        Ok(())
    }
}

/// Everything needed to recompute the labels and to re-generate the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSpec,
    /// RNG stream that produced an admissible cohort.
    pub attempt: u64,
    /// Latent state logit means, states × expressions.
    pub state_logits: Vec<Vec<f64>>,
    pub video_ids: Vec<String>,
    pub video_weights: Vec<Vec<f64>>,
    pub frequencies: Vec<Vec<f64>>,
    pub score_map: ScoreMap,
    pub noise: Vec<Vec<f64>>,
    /// Added to the symptom sum to form the total.
    pub total_offset: i32,
}

impl SyntheticManifest {
    /// Recomputes every record from the stored frequencies and noise.
    pub fn recompute_records(&self) -> Result<Vec<SymptomRecord>> {
        let scale = self.spec.preset.spec();
        self.video_ids
            .iter()
            .zip(&self.frequencies)
            .zip(&self.noise)
            .map(|((id, f), noise)| score_record(id, f, noise, &self.score_map, &scale, self.total_offset))
            .collect()
    }
}

fn score_record(
    id: &str,
    frequencies: &[f64],
    noise: &[f64],
    map: &ScoreMap,
    scale: &SymptomScaleSpec,
    total_offset: i32,
) -> Result<SymptomRecord> {
    let scores = map
        .apply(frequencies)
        .iter()
        .zip(noise)
        .map(|(s, e)| round_to_range(s + e, scale.min_score, scale.max_score))
        .collect::<Result<Vec<i32>>>()?;
    let total = (scores.iter().sum::<i32>() + total_offset).clamp(scale.total_min, scale.total_max);
    Ok(SymptomRecord {
        video_id: id.to_string(),
        symptom_scores: scores,
        total_score: total,
    })
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn calibrated_map(
    frequencies: &[Vec<f64>],
    n: usize,
    scale: &SymptomScaleSpec,
    range: Option<(f64, f64)>,
) -> ScoreMap {
    let v = frequencies.len() as f64;
    let stats: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let col = frequencies.iter().map(|f| f[i]);
            let mean = col.clone().sum::<f64>() / v;
            let var = col.clone().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v;
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            (var, lo, hi)
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| stats[b].0.total_cmp(&stats[a].0).then(a.cmp(&b)));
    let (lo, hi) = range.unwrap_or((scale.min_score as f64, scale.max_score as f64));
    let mut intercepts = Vec::new();
    let mut coefficients = Vec::new();
    for j in 0..scale.len() {
        let driver = order[j % n];
        let (_, fmin, fmax) = stats[driver];
        let mut row = vec![0.0; n];
        if fmax > fmin {
            let c = (hi - lo) / (fmax - fmin);
            row[driver] = c;
            intercepts.push(lo - c * fmin);
        } else {
            intercepts.push((lo + hi) / 2.0);
        }
        coefficients.push(row);
    }
    ScoreMap {
        intercepts,
        coefficients,
    }
}

struct Draw {
    state_logits: Vec<Vec<f64>>,
    sequences: Vec<ExpressionSequence>,
    weights: Vec<Vec<f64>>,
    frequencies: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

fn draw(spec: &SyntheticSpec, attempt: u64) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(attempt);
    let n = spec.expression_names.len();
    let k = spec.true_components;
    let w = spec.preset.spec().len();
    let state_logits: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.random_bool(spec.on_probability) {
                        spec.logit_spread
                    } else {
                        -spec.logit_spread
                    }
                })
                .collect()
        })
        .collect();
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("dirichlet alpha: {e}")))?;
    let lengths = Uniform::new_inclusive(spec.min_frames, spec.max_frames)
        .map_err(|e| Error::InvalidParameter(format!("frame range: {e}")))?;
    let mut sequences = Vec::with_capacity(spec.videos);
    let mut weights = Vec::with_capacity(spec.videos);
    let mut frequencies = Vec::with_capacity(spec.videos);
    let mut noise = Vec::with_capacity(spec.videos);
    let width = spec.videos.saturating_sub(1).to_string().len().max(3);
    for v in 0..spec.videos {
        let t = lengths.sample(&mut rng);
        let raw: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = raw.iter().sum();
        let pi: Vec<f64> = if sum > 0.0 {
            raw.iter().map(|g| g / sum).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        let mut cumulative = Vec::with_capacity(k);
        let mut acc = 0.0;
        for p in &pi {
            acc += p;
            cumulative.push(acc);
        }
        let mut frames = Array2::zeros((t, n));
        for mut row in frames.rows_mut() {
            let u: f64 = rng.random::<f64>() * acc;
            let state = cumulative.iter().position(|&c| u < c).unwrap_or(k - 1);
            for (x, &m) in row.iter_mut().zip(&state_logits[state]) {
                let z: f64 = rng.sample(StandardNormal);
                *x = sigmoid(m + spec.logit_sd * z);
            }
        }
        let seq = ExpressionSequence::new(
            format!("video{v:0width$}"),
            frames,
            spec.expression_names.clone(),
            spec.frame_rate_hz,
        )?;
        frequencies.push(activation_frequency(&seq, DEFAULT_BINARIZE_THRESHOLD)?);
        noise.push(
            (0..w)
                .map(|_| spec.noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        sequences.push(seq);
        weights.push(pi);
    }
    Ok(Draw {
        state_logits,
        sequences,
        weights,
        frequencies,
        noise,
    })
}

/// Generates a cohort whose scores take at least three distinct values per
/// symptom, retrying on fresh RNG streams a bounded number of times.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledDataset, SyntheticManifest)> {
    spec.check()?;
    let scale = spec.preset.spec();
    let n = spec.expression_names.len();
    let total_offset = scale.total_min - scale.len() as i32 * scale.min_score;
    for attempt in 0..MAX_ATTEMPTS {
        let d = draw(spec, attempt)?;
        let score_map = match &spec.score_map {
            Some(m) => m.clone(),
            None => calibrated_map(&d.frequencies, n, &scale, spec.calibration_range),
        };
        let ids: Vec<String> = d.sequences.iter().map(|s| s.video_id().to_string()).collect();
        let records = ids
            .iter()
            .zip(&d.frequencies)
            .zip(&d.noise)
            .map(|((id, f), e)| score_record(id, f, e, &score_map, &scale, total_offset))
            .collect::<Result<Vec<_>>>()?;
        let spread_ok = (0..scale.len()).all(|j| {
            let mut vals: Vec<i32> = records.iter().map(|r| r.symptom_scores[j]).collect();
            vals.sort_unstable();
            vals.dedup();
            vals.len() >= 3
        });
        if !spread_ok {
            continue;
        }
        let manifest = SyntheticManifest {
            spec: spec.clone(),
            attempt,
            state_logits: d.state_logits,
            video_ids: ids,
            video_weights: d.weights,
            frequencies: d.frequencies,
            score_map,
            noise: d.noise,
            total_offset,
        };
        return Ok((LabeledDataset::new(d.sequences, records, scale), manifest));
    }
    Err(Error::Invalid(format!(
        "no synthetic cohort with three distinct scores per symptom after {MAX_ATTEMPTS} attempts"
    )))
}
