//! Binary checkpoints: `u64` little-endian header length, a JSON header, then
//! every tensor as little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::diffusion::{DenoiserNet, ScheduleParams};
use crate::error::{Error, Result};
use crate::eval::FeatureExtractor;
use crate::textenc::{EmbeddingTable, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
const KIND_DIFFUSION: &str = "diffusion";
const KIND_FEATURES: &str = "feature_extractor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub vocabulary: Option<Vocabulary>,
    pub tensors: Vec<TensorEntry>,
    pub schedule: Option<ScheduleParams>,
    pub fingerprint: String,
    pub seed: u64,
}

pub fn encode_checkpoint(header: &CheckpointHeader, tensors: &[&Tensor]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let blob_len: usize = tensors.iter().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(8 + json.len() + blob_len);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Tensor>)> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[8..];
    if rest.len() < header_len {
        return Err(Error::Truncated {
            expected: header_len,
            actual: rest.len(),
        });
    }
    let raw: serde_json::Value = serde_json::from_slice(&rest[..header_len])?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::MalformedCheckpoint("header has no format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: found as u32,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(raw)?;
    let blob = &rest[header_len..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if blob.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: blob.len(),
        });
    }
    if blob.len() > expected {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes after the tensor blob",
            blob.len() - expected
        )));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.push(Tensor::new(e.shape.clone(), data)?);
    }
    Ok((header, tensors))
}

fn check_fingerprint(header: &CheckpointHeader, expected: Option<&str>) -> Result<()> {
    match expected {
        Some(want) if want != header.fingerprint => Err(Error::FingerprintMismatch {
            expected: want.to_string(),
            found: header.fingerprint.clone(),
        }),
        _ => Ok(()),
    }
}

fn check_kind(header: &CheckpointHeader, kind: &str) -> Result<()> {
    if header.kind != kind {
        return Err(Error::MalformedCheckpoint(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    Ok(())
}

/// Denoiser, embedding table and the metadata needed to resume from them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub net: DenoiserNet,
    pub table: EmbeddingTable,
    pub schedule: ScheduleParams,
    pub fingerprint: String,
    pub seed: u64,
}

const DENOISER_NAMES: [&str; 6] = [
    "denoiser.0.weight",
    "denoiser.0.bias",
    "denoiser.1.weight",
    "denoiser.1.bias",
    "denoiser.2.weight",
    "denoiser.2.bias",
];

impl ModelState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = self.net.tensors();
        tensors.push(self.table.matrix());
        let names = DENOISER_NAMES.iter().copied().chain(["embeddings"]);
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: KIND_DIFFUSION.into(),
            vocabulary: Some(self.table.vocab().clone()),
            tensors: names
                .zip(&tensors)
                .map(|(name, t)| TensorEntry {
                    name: name.into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            schedule: Some(self.schedule.clone()),
            fingerprint: self.fingerprint.clone(),
            seed: self.seed,
        };
        encode_checkpoint(&header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], expected_fingerprint: Option<&str>) -> Result<Self> {
        let (header, mut tensors) = decode_checkpoint(bytes)?;
        check_kind(&header, KIND_DIFFUSION)?;
        check_fingerprint(&header, expected_fingerprint)?;
        let names: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
        let want: Vec<&str> = DENOISER_NAMES.iter().copied().chain(["embeddings"]).collect();
        if names != want {
            return Err(Error::MalformedCheckpoint(format!("unexpected tensor list {names:?}")));
        }
        let vocab = header
            .vocabulary
            .ok_or_else(|| Error::MalformedCheckpoint("missing vocabulary".into()))?;
        let schedule = header
            .schedule
            .ok_or_else(|| Error::MalformedCheckpoint("missing schedule".into()))?;
        let matrix = tensors.pop().expect("seven tensors").with_requires_grad(true);
        Ok(Self {
            net: DenoiserNet::from_tensors(tensors)?,
            table: EmbeddingTable::from_parts(vocab, matrix)?,
            schedule,
            fingerprint: header.fingerprint,
            seed: header.seed,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, state.to_bytes())?;
    Ok(())
}

/// Loads a model checkpoint, refusing it when `expected_fingerprint` differs.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<ModelState> {
    ModelState::from_bytes(&std::fs::read(path)?, expected_fingerprint)
}

pub fn save_feature_extractor(path: &Path, fx: &FeatureExtractor, fingerprint: &str, seed: u64) -> Result<()> {
    let tensors = fx.tensors();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: KIND_FEATURES.into(),
        vocabulary: None,
        tensors: tensors
            .iter()
            .enumerate()
            .map(|(i, t)| TensorEntry {
                name: format!("features.{}.{}", i / 2, if i % 2 == 0 { "weight" } else { "bias" }),
                shape: t.shape().to_vec(),
            })
            .collect(),
        schedule: None,
        fingerprint: fingerprint.to_string(),
        seed,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, encode_checkpoint(&header, &tensors))?;
    Ok(())
}

pub fn load_feature_extractor(path: &Path, expected_fingerprint: Option<&str>) -> Result<FeatureExtractor> {
    let (header, tensors) = decode_checkpoint(&std::fs::read(path)?)?;
    check_kind(&header, KIND_FEATURES)?;
    check_fingerprint(&header, expected_fingerprint)?;
    FeatureExtractor::from_tensors(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> ModelState {
        ModelState {
            net: DenoiserNet::init(4),
            table: EmbeddingTable::init(Vocabulary::toy(), 4),
            schedule: ScheduleParams::default(),
            fingerprint: "abc".into(),
            seed: 4,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = state();
        let bytes = s.to_bytes();
        let back = ModelState::from_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let bytes = state().to_bytes();
        let cut = &bytes[..bytes.len() - 10];
        match ModelState::from_bytes(cut, None) {
            Err(Error::Truncated { expected, actual }) => assert_eq!(expected, actual + 10),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            ModelState::from_bytes(&bytes, Some("zzz")),
            Err(Error::FingerprintMismatch { .. })
        ));
        let text = String::from_utf8_lossy(&bytes[8..]).into_owned();
        let patched = text.replacen("\"format_version\":1", "\"format_version\":7", 1);
        let mut v = bytes[..8].to_vec();
        v.extend_from_slice(patched.as_bytes());
        assert!(matches!(
            ModelState::from_bytes(&v, None),
            Err(Error::VersionMismatch { expected: 1, found: 7 })
        ));
    }
}
