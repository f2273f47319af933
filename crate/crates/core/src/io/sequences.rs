//! One CSV file per video: optional `# key=value` metadata lines, a header of
//! expression names, then one row of probabilities per frame.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{read_text, write_text};
use crate::error::{Error, Result};
use crate::model::ExpressionSequence;

pub const DEFAULT_FRAME_RATE_HZ: f64 = 25.0;

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn video_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| parse_error(path, 0, "file name is not a usable video id"))
}

/// Reads one video. The video id is the file stem.
pub fn load_sequence(path: &Path) -> Result<ExpressionSequence> {
    let text = read_text(path)?;
    let mut frame_rate = DEFAULT_FRAME_RATE_HZ;
    let mut normalized = false;
    let mut detected = None;
    let mut offset = 0u64;
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.starts_with('#') {
            break;
        }
        offset += 1;
        body_start += line.len();
        let entry = trimmed.trim_start_matches('#').trim();
        let Some((key, value)) = entry.split_once('=') else {
            continue;
        };
        let value = value.trim();
        let bad = |what: &str| parse_error(path, offset, format!("invalid {what}: {value:?}"));
        match key.trim() {
            "frame_rate_hz" => frame_rate = value.parse().map_err(|_| bad("frame rate"))?,
            "normalized" => normalized = value.parse().map_err(|_| bad("normalized flag"))?,
            "detected_fraction" => {
                detected = Some(value.parse().map_err(|_| bad("detected fraction"))?)
            }
            _ => {}
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text[body_start..].as_bytes());
    let names: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(path, offset + 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(parse_error(path, offset + 1, "missing header of expression names"));
    }
    let n = names.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, offset + line, e.to_string())
        })?;
        let line = offset + record.position().map_or(0, |p| p.line());
        if record.len() != n {
            return Err(parse_error(
                path,
                line,
                format!("expected {n} columns, found {}", record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, line, format!("not a number: {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(parse_error(path, offset + 1, "no frames"));
    }
    let frames = Array2::from_shape_vec((rows, n), values).expect("row lengths checked");
    Ok(ExpressionSequence::new(video_id(path)?, frames, names, frame_rate)?
        .with_detected_fraction(detected)
        .with_normalized_flag(normalized))
}

/// Writes one video. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn save_sequence(seq: &ExpressionSequence, path: &Path) -> Result<()> {
    let mut text = format!("# frame_rate_hz={}\n", seq.frame_rate_hz());
    if seq.is_normalized() {
        text.push_str("# normalized=true\n");
    }
    if let Some(d) = seq.detected_fraction() {
        text.push_str(&format!("# detected_fraction={d}\n"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| Error::Invalid(format!("csv encoding failed: {e}"));
    writer.write_record(seq.expression_names()).map_err(io_err)?;
    for row in seq.frames().rows() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(io_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv encoding failed: {e}")))?;
    text.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    write_text(path, &text)
}

/// Loads a single `.csv` file, or every `.csv` file in a directory sorted by
/// name.
pub fn load_sequences(path: &Path) -> Result<Vec<ExpressionSequence>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Empty("no .csv sequence files in directory"));
        }
        files.iter().map(|f| load_sequence(f)).collect()
    } else {
        Ok(vec![load_sequence(path)?])
    }
}

/// Writes each sequence to `<dir>/<video id>.csv`.
pub fn save_sequences(seqs: &[ExpressionSequence], dir: &Path) -> Result<()> {
    for s in seqs {
        save_sequence(s, &dir.join(format!("{}.csv", s.video_id())))?;
    }
    Ok(())
}
