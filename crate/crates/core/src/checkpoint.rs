//! Model checkpoints.
//!
//! ```text
//! "PSGC" | u16 version | u32 header_len | header JSON
//!        | tensors as f32, in header order, row-major
//!        | u32 CRC32 of everything above
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::dataio::LabelMode;
use crate::error::{Error, Result};
use crate::losses::{IcclConfig, ReconTarget};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::signal::CenterMode;

pub const MAGIC: &[u8; 4] = b"PSGC";
pub const FORMAT_VERSION: u16 = 1;
const PREFIX_LEN: usize = 10;

/// Input layout the model was trained on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataLayout {
    pub channel_names: Vec<String>,
    pub sampling_hz: usize,
    pub epoch_seconds: usize,
}

/// Settings that must match between training and any later use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: usize,
    pub center_mode: CenterMode,
    pub recon_target: ReconTarget,
    pub iccl: IcclConfig,
    pub iccl_enabled: bool,
    pub label_mode: Option<LabelMode>,
    pub layout: Option<DataLayout>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    has_head: bool,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Stores `params` in single precision.
    pub fn from_params<F: Scalar>(params: &ModelParams<F>, meta: CheckpointMeta) -> Self {
        Self { params: params.cast(), meta }
    }

    pub fn params_as<F: Scalar>(&self) -> ModelParams<F> {
        self.params.cast()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named_tensors();
        let header = Header {
            model: self.params.config.clone(),
            has_head: self.params.head.is_some(),
            meta: self.meta.clone(),
            tensors: named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * self.params.param_count() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
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
        header.model.validate().map_err(|e| Error::format(PREFIX_LEN as u64, e.to_string()))?;

        let mut params = ModelParams::<f32>::init(header.model.clone(), 0, header.has_head)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let declared: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != declared {
            return Err(Error::format(PREFIX_LEN as u64, "tensor table does not match the model configuration"));
        }
        let payload = bytes.len() - header_end - 4;
        let want = 4 * params.param_count();
        if payload != want {
            return Err(Error::format(
                (header_end + payload.min(want)) as u64,
                format!("expected {want} tensor bytes, found {payload}"),
            ));
        }
        let crc_at = bytes.len() - 4;
        let stored = LittleEndian::read_u32(&bytes[crc_at..]);
        let computed = crc32fast::hash(&bytes[..crc_at]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut chunks = bytes[header_end..crc_at].chunks_exact(4).enumerate();
        for (_, mut t) in params.named_tensors_mut() {
            for slot in t.iter_mut() {
                let (i, chunk) = chunks.next().expect("length checked");
                let v = LittleEndian::read_f32(chunk);
                if !v.is_finite() {
                    return Err(Error::format((header_end + 4 * i) as u64, "non-finite parameter"));
                }
                *slot = v;
            }
        }
        Ok(Self { params, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::EpochMatrix;
    use ndarray::Array2;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 3,
            step: 17,
            center_mode: CenterMode::Mean,
            recon_target: ReconTarget::Visible,
            iccl: IcclConfig::new(0.3).unwrap(),
            iccl_enabled: true,
            label_mode: Some(LabelMode::Osa2),
            layout: None,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = ModelParams::<f32>::init(ModelConfig::tiny(), 5, true).unwrap();
        let ck = Checkpoint::from_params(&params, meta());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn reload_reproduces_forward_outputs() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::<f32>::init(cfg.clone(), 9, true).unwrap();
        let ck = Checkpoint::from_bytes(&Checkpoint::from_params(&params, meta()).to_bytes()).unwrap();
        let x = Array2::from_shape_fn((cfg.c, cfg.epoch_len()), |(c, t)| ((c * 7 + t) as f32 * 0.37).sin());
        let masks = crate::masking::generate_mask_pair(cfg.c, cfg.n_patch, 1).unwrap();
        let epoch = EpochMatrix::from_raw(x.clone()).unwrap();
        let obj = crate::model::PretrainObjective::default();
        let (a, _, la) = params.forward_pretrain(&epoch, &masks, &obj).unwrap();
        let (b, _, lb) = ck.params.forward_pretrain(&epoch, &masks, &obj).unwrap();
        assert_eq!(a.to_token_rows(), b.to_token_rows());
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        let pa = params.classify_batch(&[x.view()], None, None, None, false).unwrap().probs;
        let pb = ck.params.classify_batch(&[x.view()], None, None, None, false).unwrap().probs;
        assert_eq!(pa, pb);
    }

    #[test]
    fn corruption_is_detected() {
        let params = ModelParams::<f32>::init(ModelConfig::tiny(), 5, false).unwrap();
        let bytes = Checkpoint::from_params(&params, meta()).to_bytes();
        let mut flipped = bytes.clone();
        let at = flipped.len() - 9;
        flipped[at] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 7]), Err(Error::FormatViolation { .. })));
        assert!(matches!(Checkpoint::from_bytes(b"PSGR\x01\x00"), Err(Error::FormatViolation { .. })));
    }
}
