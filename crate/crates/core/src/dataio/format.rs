//! `.psgr` container.
//!
//! ```text
//! "PSGR" | u16 version | u32 header_len | header JSON (UTF-8)
//!        | f32 samples, channel-major      (4 * C * total_length bytes)
//!        | labels, 2 bytes per epoch       (only when label_mode is set)
//!        | u32 CRC32 of everything above
//! ```
//!
//! All integers and floats are little-endian. Label bytes are the stage
//! index (0..=4) then the apnea flag (0/1), `0xFF` meaning absent.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EpochLabel, LabelMode, Recording, Stage};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSGR";
pub const FORMAT_VERSION: u16 = 1;
const ABSENT: u8 = 0xFF;
const PREFIX_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    subject_id: String,
    channel_names: Vec<String>,
    sampling_hz: usize,
    epoch_seconds: usize,
    total_length: usize,
    label_mode: Option<LabelMode>,
}

pub fn recording_bytes(rec: &Recording) -> Vec<u8> {
    let header = Header {
        subject_id: rec.subject_id.clone(),
        channel_names: rec.channel_names.clone(),
        sampling_hz: rec.sampling_hz,
        epoch_seconds: rec.epoch_seconds,
        total_length: rec.samples.ncols(),
        label_mode: rec.label_mode,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * rec.samples.len() + 2 * rec.n_epochs() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for row in rec.samples.outer_iter() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(labels) = &rec.labels {
        for l in labels {
            out.push(l.stage.map_or(ABSENT, |s| s.index() as u8));
            out.push(l.osa.map_or(ABSENT, u8::from));
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, recording_bytes(rec))?;
    Ok(())
}

pub fn read_recording(path: impl AsRef<Path>) -> Result<Recording> {
    recording_from_bytes(&fs::read(path)?)
}

pub fn recording_from_bytes(bytes: &[u8]) -> Result<Recording> {
    if bytes.len() < PREFIX_LEN + 4 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the fixed prefix"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_len = LittleEndian::read_u32(&bytes[6..10]) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&end| end + 4 <= bytes.len())
        .ok_or_else(|| Error::format(6, format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("header: {e}")))?;

    let channels = header.channel_names.len();
    if channels == 0 || header.sampling_hz == 0 || header.epoch_seconds == 0 {
        return Err(Error::format(PREFIX_LEN as u64, "header declares an empty shape"));
    }
    let epoch_len = header.sampling_hz.checked_mul(header.epoch_seconds).unwrap_or(0);
    if epoch_len == 0 || header.total_length % epoch_len != 0 {
        return Err(Error::format(PREFIX_LEN as u64, "total_length is not a whole number of epochs"));
    }
    let n_epochs = header.total_length / epoch_len;
    let label_bytes = if header.label_mode.is_some() { 2 * n_epochs } else { 0 };
    let body = bytes.len() - header_end - 4;
    let sample_bytes = body
        .checked_sub(label_bytes)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated before label block"))?;
    if sample_bytes % (4 * channels) != 0 {
        return Err(Error::format(
            header_end as u64,
            format!("sample payload of {sample_bytes} bytes is not divisible into {channels} f32 channels"),
        ));
    }
    let expected = header.total_length.checked_mul(4 * channels).unwrap_or(usize::MAX);
    if sample_bytes != expected {
        let offset = header_end + sample_bytes.min(expected);
        return Err(Error::format(
            offset as u64,
            format!("expected {expected} sample bytes, found {sample_bytes}"),
        ));
    }

    let crc_at = bytes.len() - 4;
    let stored = LittleEndian::read_u32(&bytes[crc_at..]);
    let computed = crc32fast::hash(&bytes[..crc_at]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut samples = Array2::<f32>::zeros((channels, header.total_length));
    let payload = &bytes[header_end..header_end + sample_bytes];
    for (i, (slot, chunk)) in samples.iter_mut().zip(payload.chunks_exact(4)).enumerate() {
        let v = LittleEndian::read_f32(chunk);
        if !v.is_finite() {
            return Err(Error::format((header_end + 4 * i) as u64, "non-finite sample"));
        }
        *slot = v;
    }

    let labels = match header.label_mode {
        None => None,
        Some(_) => {
            let start = header_end + sample_bytes;
            let mut out = Vec::with_capacity(n_epochs);
            for (e, pair) in bytes[start..start + label_bytes].chunks_exact(2).enumerate() {
                let offset = (start + 2 * e) as u64;
                let stage = match pair[0] {
                    ABSENT => None,
                    code => Some(
                        Stage::from_index(code as usize).ok_or_else(|| Error::format(offset, format!("stage code {code}")))?,
                    ),
                };
                let osa = match pair[1] {
                    ABSENT => None,
                    0 => Some(false),
                    1 => Some(true),
                    code => return Err(Error::format(offset + 1, format!("apnea code {code}"))),
                };
                let label = EpochLabel { stage, osa };
                if !label.is_valid() {
                    return Err(Error::format(offset, "epoch label with no fields"));
                }
                out.push(label);
            }
            Some(out)
        }
    };

    Recording::new(
        header.subject_id,
        header.channel_names,
        header.sampling_hz,
        header.epoch_seconds,
        samples,
        header.label_mode,
        labels,
    )
    .map_err(|e| Error::format(PREFIX_LEN as u64, e.to_string()))
}
