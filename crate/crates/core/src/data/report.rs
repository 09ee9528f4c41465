//! Versioned, checksummed JSON documents with base64-embedded tensors.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REPORT_VERSION: &str = "tracer-report/1";

/// A tensor as stored in JSON: shape plus little-endian `f64` bytes in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl From<&Tensor> for EncodedTensor {
    fn from(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }
}

impl TryFrom<&EncodedTensor> for Tensor {
    type Error = Error;

    fn try_from(e: &EncodedTensor) -> Result<Tensor> {
        let bytes = B64
            .decode(&e.data)
            .map_err(|err| Error::format("base64 tensor", err.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format("base64 tensor", "payload not a multiple of 8"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(e.shape.clone(), data)
    }
}

/// Serde adapter so domain structs can hold plain [`Tensor`]s.
pub mod tensor_b64 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
        EncodedTensor::from(t).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Tensor, D::Error> {
        let e = EncodedTensor::deserialize(d)?;
        Tensor::try_from(&e).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    version: String,
    checksum: String,
    body: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Wraps `body` with a version tag and a SHA-256 of its canonical JSON.
pub fn to_document<T: Serialize>(version: &str, body: &T) -> Result<Vec<u8>> {
    let canonical = serde_json::to_vec(body)?;
    let env = Envelope {
        version: version.to_string(),
        checksum: sha256_hex(&canonical),
        body,
    };
    let mut out = serde_json::to_vec_pretty(&env)?;
    out.push(b'\n');
    Ok(out)
}

pub fn from_document<T: Serialize + DeserializeOwned>(version: &str, bytes: &[u8]) -> Result<T> {
    let env: Envelope<T> = serde_json::from_slice(bytes)?;
    if env.version != version {
        return Err(Error::Version {
            expected: version.to_string(),
            found: env.version,
        });
    }
    let computed = sha256_hex(&serde_json::to_vec(&env.body)?);
    if computed != env.checksum {
        return Err(Error::Checksum {
            stored: env.checksum,
            computed,
        });
    }
    Ok(env.body)
}

pub fn save_document<T: Serialize>(version: &str, body: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_document(version, body)?).map_err(|e| Error::io(path, e))
}

pub fn load_document<T: Serialize + DeserializeOwned>(version: &str, path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_document(version, &bytes)
}

/// Effect summary for one causal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEffect {
    pub node: usize,
    pub members: Vec<usize>,
    /// Mean of `|Δ|₁ · KL` over the intervention family.
    pub ace: f64,
    /// Mean signed KL effect.
    pub signed_effect: f64,
}

/// Pointer to the causal graph computed for the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRef {
    pub file: String,
    pub topology: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample_id: String,
    pub predicted_label: usize,
    pub true_label: Option<usize>,
    /// Sample in raw (denormalized) input coordinates.
    #[serde(with = "tensor_b64")]
    pub input: Tensor,
    pub feature_names: Option<Vec<String>>,
    /// Signed attribution aggregated over causal nodes, input-shaped.
    #[serde(with = "tensor_b64")]
    pub attribution: Tensor,
    /// Binary minimal explanation mask, input-shaped.
    #[serde(with = "tensor_b64")]
    pub mask: Tensor,
    pub mask_certified: bool,
    pub node_effects: Vec<NodeEffect>,
    pub graph: GraphRef,
    pub config_digest: String,
}

impl ExplanationReport {
    pub fn validate(&self) -> Result<()> {
        if !self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::InvalidArgument("mask must be binary".into()));
        }
        if !self.attribution.is_finite() {
            return Err(Error::InvalidArgument("attribution must be finite".into()));
        }
        if self.attribution.shape() != self.mask.shape() {
            return Err(Error::Shape("attribution and mask shapes differ".into()));
        }
        Ok(())
    }
}

pub fn save_report(report: &ExplanationReport, path: &Path) -> Result<()> {
    report.validate()?;
    save_document(REPORT_VERSION, report, path)
}

pub fn load_report(path: &Path) -> Result<ExplanationReport> {
    let r: ExplanationReport = load_document(REPORT_VERSION, path)?;
    r.validate()?;
    Ok(r)
}
