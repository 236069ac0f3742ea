//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `DCCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest, then every parameter as row-major
//! little-endian `f64` values in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autonet::{FaceModel, ModelConfig, Tensor};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::training::PhaseId;

pub const MAGIC: &[u8; 8] = b"DCCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub seed: u64,
    pub phase: Option<PhaseId>,
    pub epoch: Option<usize>,
    pub loss: LossWeights,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: FaceModel,
}

impl Checkpoint {
    pub fn new(model: FaceModel, seed: u64, phase: Option<PhaseId>, epoch: Option<usize>, loss: LossWeights) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, _, t)| {
                let (rows, cols) = t.shape();
                ParamEntry {
                    name: name.clone(),
                    rows,
                    cols,
                }
            })
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model: model.config.clone(),
                seed,
                phase,
                epoch,
                loss,
                params,
            },
            model,
        }
    }
}

fn cerr(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&ckpt.manifest).map_err(|e| cerr(e.to_string()))?;
    let params = ckpt.model.params();
    if params.len() != ckpt.manifest.params.len() {
        return Err(cerr("manifest does not list every parameter"));
    }
    let mut out = Vec::with_capacity(16 + manifest.len() + 8 * ckpt.model.param_count());
    out.extend(MAGIC);
    out.extend((manifest.len() as u64).to_le_bytes());
    out.extend(&manifest);
    for ((name, _, t), entry) in params.iter().zip(&ckpt.manifest.params) {
        if *name != entry.name || t.shape() != (entry.rows, entry.cols) {
            return Err(cerr(format!("parameter `{name}` does not match its manifest entry")));
        }
        for v in t.value().iter() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(cerr("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize.checked_add(len).filter(|&b| b <= bytes.len()).ok_or_else(|| cerr("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body]).map_err(|e| cerr(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(cerr(format!("unsupported format version {}", manifest.format_version)));
    }
    let mut model = FaceModel::new(manifest.model.clone(), None, 0)?;
    let expected: Vec<(String, (usize, usize))> = model.params().iter().map(|(n, _, t)| (n.clone(), t.shape())).collect();
    if expected.len() != manifest.params.len() {
        return Err(cerr("parameter list does not match the architecture"));
    }
    let mut pos = body;
    for ((tensor, (name, shape)), entry) in model.params_mut().into_iter().zip(&expected).zip(&manifest.params) {
        if *name != entry.name || *shape != (entry.rows, entry.cols) {
            return Err(cerr(format!("parameter `{}` does not match the architecture", entry.name)));
        }
        let n = entry.rows * entry.cols;
        let block = bytes.get(pos..pos + 8 * n).ok_or_else(|| cerr(format!("truncated block for `{}`", entry.name)))?;
        pos += 8 * n;
        let values: Vec<f64> = block.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(cerr(format!("non-finite value in `{}`", entry.name)));
        }
        *tensor = Tensor::new(ndarray::Array2::from_shape_vec((entry.rows, entry.cols), values).unwrap());
    }
    if pos != bytes.len() {
        return Err(cerr(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint { manifest, model })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> FaceModel {
        let cfg = ModelConfig {
            vertex_count: 7,
            latent_id: 3,
            latent_exp: 2,
            encoder_widths: vec![5, 6],
            decoder_hidden: 4,
            anchor_zero_expression: true,
        };
        FaceModel::new(cfg, None, seed).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = Checkpoint::new(small_model(3), 42, Some(PhaseId::Joint), Some(7), LossWeights::default());
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &ckpt).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(load_checkpoint(&p).unwrap(), ckpt);
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let model = small_model(9);
        let ckpt = Checkpoint::new(model.clone(), 0, None, None, LossWeights::default());
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap().model;
        let pts: Vec<_> = (0..5).map(|i| crate::geometry::Vec3::new(i as f64 * 0.1, 0.2, -0.3)).collect();
        let a = model.decode(&model.encode(&pts).unwrap()).unwrap();
        let b = back.decode(&back.encode(&pts).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ckpt = Checkpoint::new(small_model(1), 0, None, None, LossWeights::default());
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
        let mut wrong = ckpt.clone();
        wrong.manifest.params[0].rows += 1;
        assert!(encode_checkpoint(&wrong).is_err());
    }
}
