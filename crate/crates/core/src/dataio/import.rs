//! Plain-text imports: per-epoch label CSVs and one-CSV-per-channel recordings.
//!
//! A text recording is a directory holding `recording.json`:
//!
//! ```json
//! {"subject_id": "P01", "channel_names": ["EEG", "EOG"], "sampling_hz": 100,
//!  "epoch_seconds": 30, "channel_files": ["eeg.csv", "eog.csv"],
//!  "labels": "labels.csv", "label_mode": "staging5"}
//! ```
//!
//! `epoch_seconds` defaults to 30, `channel_files` to `channel_<i>.csv`, and
//! `labels`/`label_mode` are optional. Each channel file holds one sample per
//! line; a non-numeric first line is taken as a header.

use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use super::{EpochLabel, LabelMode, Recording, Stage};
use crate::error::{Error, Result};
use crate::signal::DEFAULT_EPOCH_SECONDS;

pub const SIDECAR_NAME: &str = "recording.json";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportSidecar {
    pub subject_id: String,
    pub channel_names: Vec<String>,
    pub sampling_hz: usize,
    #[serde(default = "default_epoch_seconds")]
    pub epoch_seconds: usize,
    pub channel_files: Option<Vec<String>>,
    pub labels: Option<String>,
    pub label_mode: Option<LabelMode>,
}

fn default_epoch_seconds() -> usize {
    DEFAULT_EPOCH_SECONDS
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, format!("{}: {e}", path.display()))
}

/// Reads `epoch_index,stage,osa` rows; `-` marks an absent field. Rows may
/// appear in any order but must cover `0..n` exactly once.
pub fn read_label_csv(path: impl AsRef<Path>) -> Result<Vec<EpochLabel>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(File::open(path)?);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["epoch_index", "stage", "osa"] {
        return Err(Error::format(0, format!("{}: expected header epoch_index,stage,osa", path.display())));
    }
    let mut rows: Vec<(usize, EpochLabel)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let offset = record.position().map_or(0, |p| p.byte());
        let bad = |what: &str| Error::format(offset, format!("{}: bad {what} field", path.display()));
        let index: usize = record[0].parse().map_err(|_| bad("epoch_index"))?;
        let stage = match &record[1] {
            "-" => None,
            s => Some(Stage::parse(s).ok_or_else(|| bad("stage"))?),
        };
        let osa = match &record[2] {
            "-" => None,
            "0" => Some(false),
            "1" => Some(true),
            _ => return Err(bad("osa")),
        };
        let label = EpochLabel { stage, osa };
        if !label.is_valid() {
            return Err(bad("stage/osa (both absent)"));
        }
        rows.push((index, label));
    }
    rows.sort_by_key(|(i, _)| *i);
    for (expected, (i, _)) in rows.iter().enumerate() {
        if *i != expected {
            return Err(Error::format(0, format!("{}: epoch index {expected} missing or repeated", path.display())));
        }
    }
    Ok(rows.into_iter().map(|(_, l)| l).collect())
}

fn read_channel_csv(path: &Path) -> Result<Vec<f32>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(File::open(path)?);
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = record.get(0).unwrap_or("");
        match field.parse::<f32>() {
            Ok(v) if v.is_finite() => out.push(v),
            Ok(_) => {
                let offset = record.position().map_or(0, |p| p.byte());
                return Err(Error::format(offset, format!("{}: non-finite sample", path.display())));
            }
            Err(_) if line == 0 => {}
            Err(_) => {
                let offset = record.position().map_or(0, |p| p.byte());
                return Err(Error::format(offset, format!("{}: unparseable sample {field:?}", path.display())));
            }
        }
    }
    Ok(out)
}

/// Loads a text recording directory; trailing partial epochs are trimmed.
pub fn import_text_recording(dir: impl AsRef<Path>) -> Result<Recording> {
    let dir = dir.as_ref();
    let sidecar_path = dir.join(SIDECAR_NAME);
    let sidecar: ImportSidecar = serde_json::from_reader(File::open(&sidecar_path)?)
        .map_err(|e| Error::format(0, format!("{}: {e}", sidecar_path.display())))?;
    let files = sidecar
        .channel_files
        .clone()
        .unwrap_or_else(|| (0..sidecar.channel_names.len()).map(|i| format!("channel_{i}.csv")).collect());
    if files.len() != sidecar.channel_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} channel files for {} channel names",
            files.len(),
            sidecar.channel_names.len()
        )));
    }
    let columns = files.iter().map(|f| read_channel_csv(&dir.join(f))).collect::<Result<Vec<_>>>()?;
    let len = columns.first().map_or(0, Vec::len);
    if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != len) {
        return Err(Error::LengthMismatch { left: c.len(), right: len }).map_err(|e| {
            Error::InvalidEpoch(format!("channel file {} has {} samples: {e}", files[i], c.len()))
        });
    }
    let mut samples = Array2::zeros((columns.len(), len));
    for (mut row, col) in samples.outer_iter_mut().zip(&columns) {
        row.assign(&ndarray::ArrayView1::from(col.as_slice()));
    }
    let labels = match &sidecar.labels {
        Some(file) => Some(read_label_csv(dir.join(file))?),
        None => None,
    };
    let label_mode = match (&labels, sidecar.label_mode) {
        (None, _) => None,
        (Some(_), Some(m)) => Some(m),
        (Some(l), None) => Some(if l.iter().all(|x| x.stage.is_some()) { LabelMode::Staging5 } else { LabelMode::Osa2 }),
    };
    Recording::new(
        sidecar.subject_id,
        sidecar.channel_names,
        sidecar.sampling_hz,
        sidecar.epoch_seconds,
        samples,
        label_mode,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn label_csv_round() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        fs::write(&p, "epoch_index,stage,osa\n1,N2,-\n0,W,1\n2,-,0\n").unwrap();
        let l = read_label_csv(&p).unwrap();
        assert_eq!(l[0], EpochLabel { stage: Some(Stage::W), osa: Some(true) });
        assert_eq!(l[1], EpochLabel { stage: Some(Stage::N2), osa: None });
        assert_eq!(l[2], EpochLabel { stage: None, osa: Some(false) });
    }

    #[test]
    fn label_csv_rejects_gaps_and_junk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        fs::write(&p, "epoch_index,stage,osa\n0,W,1\n2,W,0\n").unwrap();
        assert!(read_label_csv(&p).is_err());
        fs::write(&p, "epoch_index,stage,osa\n0,X,1\n").unwrap();
        assert!(matches!(read_label_csv(&p), Err(Error::FormatViolation { .. })));
        fs::write(&p, "epoch_index,stage,osa\n0,-,-\n").unwrap();
        assert!(read_label_csv(&p).is_err());
    }

    #[test]
    fn text_recording_imports_and_trims() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(
            d.join(SIDECAR_NAME),
            r#"{"subject_id":"P1","channel_names":["a","b"],"sampling_hz":2,"epoch_seconds":2,"labels":"l.csv"}"#,
        )
        .unwrap();
        fs::write(d.join("channel_0.csv"), "value\n1\n2\n3\n4\n5\n6\n7\n8\n9\n").unwrap();
        fs::write(d.join("channel_1.csv"), "0\n0\n0\n0\n0\n0\n0\n0\n1.5\n").unwrap();
        fs::write(d.join("l.csv"), "epoch_index,stage,osa\n0,W,-\n1,R,-\n").unwrap();
        let rec = import_text_recording(d).unwrap();
        assert_eq!(rec.samples.dim(), (2, 8));
        assert_eq!(rec.samples[[0, 7]], 8.0);
        assert_eq!(rec.label_mode, Some(LabelMode::Staging5));
        assert_eq!(rec.n_epochs(), 2);
    }
}
