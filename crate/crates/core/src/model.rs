//! Shared data model: expression sequences, symptom scales, labelled datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-frame expression probabilities for one video.
///
/// Rows are frames, columns are expressions. A sequence is either raw
/// (probabilities in `[0, 1]`) or normalized (per-video column means removed).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSequence {
    video_id: String,
    frames: Array2<f64>,
    expression_names: Vec<String>,
    frame_rate_hz: f64,
    normalized: bool,
    detected_fraction: Option<f64>,
}

impl ExpressionSequence {
    /// Builds a raw sequence. Shape and metadata are checked here; value
    /// ranges are checked by [`validate_dataset`].
    pub fn new(
        video_id: impl Into<String>,
        frames: Array2<f64>,
        expression_names: Vec<String>,
        frame_rate_hz: f64,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if frames.nrows() == 0 {
            return Err(Error::Empty("sequence has no frames"));
        }
        if frames.ncols() == 0 {
            return Err(Error::Empty("sequence has no expressions"));
        }
        if expression_names.len() != frames.ncols() {
            return Err(Error::DimensionMismatch {
                context: "expression names",
                expected: frames.ncols(),
                actual: expression_names.len(),
            });
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        Ok(Self {
            video_id,
            frames,
            expression_names,
            frame_rate_hz,
            normalized: false,
            detected_fraction: None,
        })
    }

    /// Attaches the fraction of frames in which a face was detected upstream.
    pub fn with_detected_fraction(mut self, fraction: Option<f64>) -> Self {
        self.detected_fraction = fraction;
        self
    }

    pub(crate) fn with_normalized_flag(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }

    pub fn expression_names(&self) -> &[String] {
        &self.expression_names
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn detected_fraction(&self) -> Option<f64> {
        self.detected_fraction
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Number of expressions `N`.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// Subtracts each expression's per-video mean activation from its column.
///
/// The result is flagged as normalized. Applying it to an already
/// normalized sequence removes whatever residual mean rounding left behind.
pub fn normalize_sequence(seq: &ExpressionSequence) -> Result<ExpressionSequence> {
    if seq.is_empty() {
        return Err(Error::Empty("cannot normalize an empty sequence"));
    }
    let t = seq.len() as f64;
    let mut frames = seq.frames.clone();
    for mut column in frames.axis_iter_mut(Axis(1)) {
        let mean = column.iter().sum::<f64>() / t;
        column.mapv_inplace(|v| v - mean);
    }
    Ok(ExpressionSequence {
        frames,
        normalized: true,
        ..seq.clone()
    })
}

/// Named symptom-scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalePreset {
    #[serde(rename = "PANSS-NEG")]
    PanssNeg,
    #[serde(rename = "CAINS-EXP")]
    CainsExp,
}

impl ScalePreset {
    pub fn name(self) -> &'static str {
        match self {
            ScalePreset::PanssNeg => "PANSS-NEG",
            ScalePreset::CainsExp => "CAINS-EXP",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_uppercase().as_str() {
            "PANSS-NEG" | "PANSS" => Ok(ScalePreset::PanssNeg),
            "CAINS-EXP" | "CAINS" => Ok(ScalePreset::CainsExp),
            _ => Err(Error::UnknownPreset(name.to_string())),
        }
    }

    pub fn spec(self) -> SymptomScaleSpec {
        match self {
            // Three expression-related NEG items; the NEG total covers all
            // seven NEG items, each rated 1..=7.
            ScalePreset::PanssNeg => SymptomScaleSpec {
                scale_name: self.name().to_string(),
                symptom_names: vec![
                    "flat affect".into(),
                    "poor rapport".into(),
                    "lack of spontaneity and flow of conversation".into(),
                ],
                min_score: 1,
                max_score: 7,
                total_min: 7,
                total_max: 49,
            },
            ScalePreset::CainsExp => SymptomScaleSpec {
                scale_name: self.name().to_string(),
                symptom_names: vec![
                    "facial expression".into(),
                    "vocal expression".into(),
                    "expressive gestures".into(),
                    "quantity of speech".into(),
                ],
                min_score: 0,
                max_score: 4,
                total_min: 0,
                total_max: 16,
            },
        }
    }
}

impl fmt::Display for ScalePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Integer rating scale for a group of `W` symptoms plus their total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomScaleSpec {
    pub scale_name: String,
    pub symptom_names: Vec<String>,
    pub min_score: i32,
    pub max_score: i32,
    pub total_min: i32,
    pub total_max: i32,
}

impl SymptomScaleSpec {
    pub fn new(
        scale_name: impl Into<String>,
        symptom_names: Vec<String>,
        (min_score, max_score): (i32, i32),
        (total_min, total_max): (i32, i32),
    ) -> Result<Self> {
        let spec = Self {
            scale_name: scale_name.into(),
            symptom_names,
            min_score,
            max_score,
            total_min,
            total_max,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.symptom_names.is_empty() {
            return Err(Error::InvalidParameter("scale has no symptoms".into()));
        }
        if self.min_score >= self.max_score {
            return Err(Error::InvalidParameter(format!(
                "symptom range [{}, {}] is empty",
                self.min_score, self.max_score
            )));
        }
        if self.total_min >= self.total_max {
            return Err(Error::InvalidParameter(format!(
                "total range [{}, {}] is empty",
                self.total_min, self.total_max
            )));
        }
        Ok(())
    }

    /// Number of rated symptoms `W`.
    pub fn len(&self) -> usize {
        self.symptom_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symptom_names.is_empty()
    }

    pub fn preset(&self) -> Option<ScalePreset> {
        ScalePreset::from_name(&self.scale_name).ok()
    }
}

/// Ground-truth ratings for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomRecord {
    pub video_id: String,
    pub symptom_scores: Vec<i32>,
    pub total_score: i32,
}

/// Sequences paired one-to-one with their ratings, sorted by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    sequences: Vec<ExpressionSequence>,
    records: Vec<SymptomRecord>,
    scale: SymptomScaleSpec,
}

impl LabeledDataset {
    /// Sorts both lists by video id. Correspondence is not enforced here; run
    /// [`validate_dataset`] before training.
    pub fn new(
        mut sequences: Vec<ExpressionSequence>,
        mut records: Vec<SymptomRecord>,
        scale: SymptomScaleSpec,
    ) -> Self {
        sequences.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        records.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        Self {
            sequences,
            records,
            scale,
        }
    }

    pub fn sequences(&self) -> &[ExpressionSequence] {
        &self.sequences
    }

    pub fn records(&self) -> &[SymptomRecord] {
        &self.records
    }

    pub fn scale(&self) -> &SymptomScaleSpec {
        &self.scale
    }

    /// Number of videos `V`.
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn video_ids(&self) -> Vec<&str> {
        self.sequences.iter().map(|s| s.video_id()).collect()
    }

    pub fn record(&self, video_id: &str) -> Option<&SymptomRecord> {
        self.records
            .binary_search_by(|r| r.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn sequence(&self, video_id: &str) -> Option<&ExpressionSequence> {
        self.sequences
            .binary_search_by(|s| s.video_id.as_str().cmp(video_id))
            .ok()
            .map(|i| &self.sequences[i])
    }

    /// Sequence/record pairs in id order. Sequences without a record are skipped.
    pub fn pairs(&self) -> impl Iterator<Item = (&ExpressionSequence, &SymptomRecord)> {
        self.sequences
            .iter()
            .filter_map(|s| self.record(s.video_id()).map(|r| (s, r)))
    }

    /// Copy of the dataset with one video removed.
    pub fn without(&self, video_id: &str) -> LabeledDataset {
        LabeledDataset {
            sequences: self
                .sequences
                .iter()
                .filter(|s| s.video_id() != video_id)
                .cloned()
                .collect(),
            records: self
                .records
                .iter()
                .filter(|r| r.video_id != video_id)
                .cloned()
                .collect(),
            scale: self.scale.clone(),
        }
    }

    /// Ensures the dataset is free of violations, otherwise lists the first few.
    pub fn ensure_valid(&self, options: &ValidationOptions) -> Result<()> {
        let report = validate_dataset_with(self, options);
        if report.is_empty() {
            return Ok(());
        }
        let shown: Vec<String> = report.iter().take(5).map(|v| v.to_string()).collect();
        let more = report.len().saturating_sub(shown.len());
        let mut message = shown.join("; ");
        if more > 0 {
            message.push_str(&format!("; and {more} more"));
        }
        Err(Error::Invalid(message))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NonFinite {
        video_id: String,
        frame: usize,
        expression: String,
        count: usize,
    },
    ProbabilityOutOfRange {
        video_id: String,
        frame: usize,
        expression: String,
        value: f64,
        count: usize,
    },
    ExpressionMismatch {
        video_id: String,
    },
    SymptomCount {
        video_id: String,
        expected: usize,
        actual: usize,
    },
    ScoreOutOfRange {
        video_id: String,
        symptom: String,
        score: i32,
        min: i32,
        max: i32,
    },
    TotalOutOfRange {
        video_id: String,
        total: i32,
        min: i32,
        max: i32,
    },
    MissingRecord {
        video_id: String,
    },
    MissingSequence {
        video_id: String,
    },
    DuplicateId {
        video_id: String,
    },
    LowFaceDetection {
        video_id: String,
        fraction: f64,
        required: f64,
    },
    InvalidScale {
        reason: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFinite {
                video_id,
                frame,
                expression,
                count,
            } => write!(
                f,
                "{video_id}: non-finite value at frame {frame}, expression `{expression}` ({count} total)"
            ),
            Violation::ProbabilityOutOfRange {
                video_id,
                frame,
                expression,
                value,
                count,
            } => write!(
                f,
                "{video_id}: value {value} out of range at frame {frame}, expression `{expression}` ({count} total)"
            ),
            Violation::ExpressionMismatch { video_id } => {
                write!(f, "{video_id}: expression names differ from the rest of the dataset")
            }
            Violation::SymptomCount {
                video_id,
                expected,
                actual,
            } => write!(f, "{video_id}: expected {expected} symptom scores, found {actual}"),
            Violation::ScoreOutOfRange {
                video_id,
                symptom,
                score,
                min,
                max,
            } => write!(
                f,
                "{video_id}: score {score} for `{symptom}` outside [{min}, {max}]"
            ),
            Violation::TotalOutOfRange {
                video_id,
                total,
                min,
                max,
            } => write!(f, "{video_id}: total {total} outside [{min}, {max}]"),
            Violation::MissingRecord { video_id } => {
                write!(f, "{video_id}: sequence has no matching record")
            }
            Violation::MissingSequence { video_id } => {
                write!(f, "{video_id}: record has no matching sequence")
            }
            Violation::DuplicateId { video_id } => write!(f, "{video_id}: duplicate video id"),
            Violation::LowFaceDetection {
                video_id,
                fraction,
                required,
            } => write!(
                f,
                "{video_id}: face detected in {fraction} of frames, {required} required"
            ),
            Violation::InvalidScale { reason } => write!(f, "scale: {reason}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    /// Reject videos whose recorded face-detection fraction is below this.
    /// Videos without that metadata pass.
    pub min_detected_fraction: Option<f64>,
}

/// Checks every dataset invariant and returns all violations found.
pub fn validate_dataset(dataset: &LabeledDataset) -> Vec<Violation> {
    validate_dataset_with(dataset, &ValidationOptions::default())
}

pub fn validate_dataset_with(
    dataset: &LabeledDataset,
    options: &ValidationOptions,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let scale = &dataset.scale;
    if let Err(e) = scale.check() {
        out.push(Violation::InvalidScale {
            reason: e.to_string(),
        });
    }

    let reference_names = dataset.sequences.first().map(|s| &s.expression_names);
    let mut seq_ids = BTreeSet::new();
    for seq in &dataset.sequences {
        if !seq_ids.insert(seq.video_id.as_str()) {
            out.push(Violation::DuplicateId {
                video_id: seq.video_id.clone(),
            });
        }
        if Some(&seq.expression_names) != reference_names {
            out.push(Violation::ExpressionMismatch {
                video_id: seq.video_id.clone(),
            });
        }
        check_frames(seq, &mut out);
        if let (Some(required), Some(fraction)) =
            (options.min_detected_fraction, seq.detected_fraction)
        {
            if fraction < required {
                out.push(Violation::LowFaceDetection {
                    video_id: seq.video_id.clone(),
                    fraction,
                    required,
                });
            }
        }
    }

    let mut record_ids = BTreeMap::new();
    for record in &dataset.records {
        if record_ids.insert(record.video_id.as_str(), ()).is_some() {
            out.push(Violation::DuplicateId {
                video_id: record.video_id.clone(),
            });
        }
        check_record(record, scale, &mut out);
    }

    for id in seq_ids.iter().filter(|id| !record_ids.contains_key(*id)) {
        out.push(Violation::MissingRecord {
            video_id: id.to_string(),
        });
    }
    for id in record_ids.keys().filter(|id| !seq_ids.contains(*id)) {
        out.push(Violation::MissingSequence {
            video_id: id.to_string(),
        });
    }
    out
}

fn check_frames(seq: &ExpressionSequence, out: &mut Vec<Violation>) {
    let (lo, hi) = if seq.normalized { (-1.0, 1.0) } else { (0.0, 1.0) };
    let mut first_nan = None;
    let mut nan_count = 0;
    let mut first_range = None;
    let mut range_count = 0;
    for ((t, i), &v) in seq.frames.indexed_iter() {
        if !v.is_finite() {
            nan_count += 1;
            first_nan.get_or_insert((t, i));
        } else if !(lo..=hi).contains(&v) {
            range_count += 1;
            first_range.get_or_insert((t, i, v));
        }
    }
    if let Some((frame, i)) = first_nan {
        out.push(Violation::NonFinite {
            video_id: seq.video_id.clone(),
            frame,
            expression: seq.expression_names[i].clone(),
            count: nan_count,
        });
    }
    if let Some((frame, i, value)) = first_range {
        out.push(Violation::ProbabilityOutOfRange {
            video_id: seq.video_id.clone(),
            frame,
            expression: seq.expression_names[i].clone(),
            value,
            count: range_count,
        });
    }
}

fn check_record(record: &SymptomRecord, scale: &SymptomScaleSpec, out: &mut Vec<Violation>) {
    if record.symptom_scores.len() != scale.len() {
        out.push(Violation::SymptomCount {
            video_id: record.video_id.clone(),
            expected: scale.len(),
            actual: record.symptom_scores.len(),
        });
    }
    for (name, &score) in scale.symptom_names.iter().zip(&record.symptom_scores) {
        if score < scale.min_score || score > scale.max_score {
            out.push(Violation::ScoreOutOfRange {
                video_id: record.video_id.clone(),
                symptom: name.clone(),
                score,
                min: scale.min_score,
                max: scale.max_score,
            });
        }
    }
    if record.total_score < scale.total_min || record.total_score > scale.total_max {
        out.push(Violation::TotalOutOfRange {
            video_id: record.video_id.clone(),
            total: record.total_score,
            min: scale.total_min,
            max: scale.total_max,
        });
    }
}
