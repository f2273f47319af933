use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{read_text, to_json_text, write_text};
use crate::error::{Error, Result};
use crate::fisher::fisher_vector_len;
use crate::pipeline::TrainedBundle;

pub const MODEL_FORMAT: &str = "symptom-fv-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct Envelope<'a> {
    format: &'a str,
    version: u32,
    /// SHA-256 of the payload in compact, key-sorted JSON.
    checksum: String,
    payload: &'a TrainedBundle,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    checksum: String,
    payload: Value,
}

fn payload_checksum(payload: &Value) -> String {
    let canonical = serde_json::to_string(payload).expect("JSON values always serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn check_bundle(bundle: &TrainedBundle) -> Result<()> {
    let m = &bundle.model;
    let (k, n) = (m.gmm.components(), m.gmm.dim());
    let mismatch = |context, expected, actual| {
        if expected == actual {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected,
                actual,
            })
        }
    };
    mismatch("checkpoint expression names", n, bundle.expression_names.len())?;
    mismatch("checkpoint FC1 input", fisher_vector_len(k, n), m.fc1.in_dim())?;
    mismatch("checkpoint FC1 outputs", m.scale.len(), m.fc1.out_dim())?;
    mismatch("checkpoint FC2 input", m.scale.len(), m.fc2.in_dim())?;
    mismatch("checkpoint FC2 outputs", 1, m.fc2.out_dim())?;
    if let Some(s) = &m.scaling {
        mismatch("checkpoint output scaling", m.scale.len(), s.symptoms.len())?;
    }
    Ok(())
}

pub fn model_to_text(bundle: &TrainedBundle) -> Result<String> {
    let value = serde_json::to_value(bundle)
        .map_err(|e| Error::Invalid(format!("model serialization failed: {e}")))?;
    to_json_text(&Envelope {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        checksum: payload_checksum(&value),
        payload: bundle,
    })
}

pub fn model_from_text(text: &str, path: &Path) -> Result<TrainedBundle> {
    let json_err = |source| Error::Json {
        path: path.to_path_buf(),
        source,
    };
    let header: Header = serde_json::from_str(text).map_err(json_err)?;
    if header.format != MODEL_FORMAT {
        return Err(Error::Invalid(format!(
            "{}: not a model checkpoint (format {:?})",
            path.display(),
            header.format
        )));
    }
    if header.version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: header.version,
        });
    }
    if payload_checksum(&header.payload) != header.checksum {
        return Err(Error::Checksum);
    }
    let bundle: TrainedBundle = serde_json::from_value(header.payload).map_err(json_err)?;
    check_bundle(&bundle)?;
    Ok(bundle)
}

pub fn save_model(bundle: &TrainedBundle, path: &Path) -> Result<()> {
    check_bundle(bundle)?;
    write_text(path, &model_to_text(bundle)?)
}

pub fn load_model(path: &Path) -> Result<TrainedBundle> {
    model_from_text(&read_text(path)?, path)
}
