//! CSV files for external plotting.

use std::path::Path;

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidConfig(format!("csv: {other:?}")),
    }
}

/// One row per record, header from the record's field names.
pub fn write_loss_csv<R: Serialize>(path: impl AsRef<Path>, records: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, <ch>_orig, <ch>_recon, ...`, one row per time step.
pub fn write_trace_csv<F: Scalar>(
    path: impl AsRef<Path>,
    original: ArrayView2<F>,
    recon: ArrayView2<F>,
    channel_names: &[String],
) -> Result<()> {
    if original.dim() != recon.dim() || original.nrows() != channel_names.len() {
        return Err(Error::ShapeMismatch(format!(
            "original {:?}, reconstruction {:?}, {} names",
            original.dim(),
            recon.dim(),
            channel_names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    for name in channel_names {
        header.push(format!("{name}_orig"));
        header.push(format!("{name}_recon"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for t in 0..original.ncols() {
        let mut row = vec![t.to_string()];
        for c in 0..original.nrows() {
            row.push(original[[c, t]].to_string());
            row.push(recon[[c, t]].to_string());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Token-averaged encoder features, one `d_model` vector per epoch.
pub fn feature_rows<F: Scalar>(params: &ModelParams<F>, epochs: &[ArrayView2<F>], batch: usize) -> Result<Vec<Vec<F>>> {
    let mut out = Vec::with_capacity(epochs.len());
    for chunk in epochs.chunks(batch.max(1)) {
        for f in params.features(chunk)? {
            let n = F::of_usize(f.tokens.nrows());
            out.push(f.tokens.sum_axis(ndarray::Axis(0)).iter().map(|v| *v / n).collect());
        }
    }
    Ok(out)
}

/// `label, f0, ..., f{d-1}`; epochs without a label get `-`.
pub fn write_feature_csv<F: Scalar>(path: impl AsRef<Path>, labels: &[Option<String>], features: &[Vec<F>]) -> Result<()> {
    if labels.len() != features.len() {
        return Err(Error::LengthMismatch { left: labels.len(), right: features.len() });
    }
    let d = features.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = std::iter::once("label".to_string()).chain((0..d).map(|j| format!("f{j}"))).collect();
    w.write_record(&header).map_err(csv_err)?;
    for (label, f) in labels.iter().zip(features) {
        if f.len() != d {
            return Err(Error::LengthMismatch { left: f.len(), right: d });
        }
        let row: Vec<String> =
            std::iter::once(label.clone().unwrap_or_else(|| "-".into())).chain(f.iter().map(|v| v.to_string())).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
