use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::{ScalePreset, SymptomRecord, SymptomScaleSpec};

/// JSON label document: a scale preset, its symptom names and one record per
/// video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelsDocument {
    pub scale_preset: String,
    pub symptom_names: Vec<String>,
    pub records: Vec<SymptomRecord>,
}

impl LabelsDocument {
    pub fn new(scale: &SymptomScaleSpec, records: Vec<SymptomRecord>) -> Self {
        Self {
            scale_preset: scale.scale_name.clone(),
            symptom_names: scale.symptom_names.clone(),
            records,
        }
    }

    /// The preset's ranges with the document's symptom names.
    pub fn scale(&self) -> Result<SymptomScaleSpec> {
        let preset = ScalePreset::from_name(&self.scale_preset)?;
        let mut spec = preset.spec();
        if !self.symptom_names.is_empty() {
            if self.symptom_names.len() != spec.len() {
                return Err(Error::DimensionMismatch {
                    context: "symptom names for scale preset",
                    expected: spec.len(),
                    actual: self.symptom_names.len(),
                });
            }
            spec.symptom_names = self.symptom_names.clone();
        }
        Ok(spec)
    }
}

/// Score ranges are not checked here; `validate_dataset` reports them.
pub fn load_labels(path: &Path) -> Result<(Vec<SymptomRecord>, SymptomScaleSpec)> {
    let doc: LabelsDocument = read_json(path)?;
    let scale = doc.scale()?;
    Ok((doc.records, scale))
}

pub fn save_labels(path: &Path, records: &[SymptomRecord], scale: &SymptomScaleSpec) -> Result<()> {
    write_json(path, &LabelsDocument::new(scale, records.to_vec()))
}
