//! Self-describing weight container.
//!
//! Layout: `u64` little-endian header length, the JSON header, then every
//! parameter tensor as little-endian `f64` in declaration order (network by
//! network, layer by layer, weight before bias).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, LayerKind};
use crate::nn::model::TappedModel;
use crate::tensor::Tensor;

pub const MODEL_VERSION: &str = "tracer-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub param_shapes: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub taps: Vec<usize>,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    networks: Vec<NetworkSpec>,
    #[serde(default)]
    meta: serde_json::Value,
    blob_bytes: u64,
}

fn layer_spec(layer: &Layer) -> LayerSpec {
    let param_shapes = layer.params().iter().map(|p| p.shape().to_vec()).collect();
    let (mut stride, mut padding, mut size) = (None, None, None);
    match layer {
        Layer::Conv2d {
            stride: s,
            padding: p,
            ..
        } => {
            stride = Some(*s);
            padding = Some(*p);
        }
        Layer::MaxPool2d { size: s } => size = Some(*s),
        _ => {}
    }
    LayerSpec {
        kind: layer.kind(),
        param_shapes,
        stride,
        padding,
        size,
    }
}

pub fn network_spec(name: &str, model: &TappedModel) -> NetworkSpec {
    NetworkSpec {
        name: name.to_string(),
        input_shape: model.input_shape().to_vec(),
        taps: model.taps().to_vec(),
        seed: model.seed(),
        layers: model.layers().iter().map(layer_spec).collect(),
    }
}

/// Serializes named networks plus free-form metadata.
pub fn encode(version: &str, nets: &[(&str, &TappedModel)], meta: serde_json::Value) -> Vec<u8> {
    let mut blobs = Vec::new();
    for (_, m) in nets {
        for p in m.params() {
            for v in p.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: version.to_string(),
        networks: nets.iter().map(|(n, m)| network_spec(n, m)).collect(),
        meta,
        blob_bytes: blobs.len() as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

/// Parses a container, checking the version tag.
pub fn decode(
    expected_version: &str,
    bytes: &[u8],
) -> Result<(Vec<(String, TappedModel)>, serde_json::Value)> {
    const FMT: &str = "model container";
    if bytes.len() < 8 {
        return Err(Error::format(FMT, "truncated length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::format(FMT, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.version != expected_version {
        return Err(Error::Version {
            expected: expected_version.to_string(),
            found: header.version,
        });
    }
    let blobs = &body[hlen..];
    if blobs.len() as u64 != header.blob_bytes {
        return Err(Error::format(
            FMT,
            format!(
                "parameter payload is {} bytes, header declares {}",
                blobs.len(),
                header.blob_bytes
            ),
        ));
    }
    let mut cursor = blobs.chunks_exact(8).map(|c| {
        f64::from_le_bytes(c.try_into().expect("8 bytes"))
    });
    let mut nets = Vec::new();
    for spec in header.networks {
        let mut layers = Vec::new();
        for (i, ls) in spec.layers.iter().enumerate() {
            let mut take = |k: usize| -> Result<Tensor> {
                let shape = ls.param_shapes.get(k).cloned().ok_or_else(|| {
                    Error::format(FMT, format!("layer {i} missing parameter {k}"))
                })?;
                let n: usize = shape.iter().product();
                let data: Vec<f64> = cursor.by_ref().take(n).collect();
                if data.len() != n {
                    return Err(Error::format(FMT, "parameter payload exhausted"));
                }
                Tensor::new(shape, data)
            };
            let layer = match ls.kind {
                LayerKind::Dense => Layer::Dense {
                    weight: take(0)?,
                    bias: take(1)?,
                },
                LayerKind::Conv2d => Layer::Conv2d {
                    weight: take(0)?,
                    bias: take(1)?,
                    stride: ls.stride.unwrap_or(1),
                    padding: ls.padding.unwrap_or(0),
                },
                LayerKind::Relu => Layer::Relu,
                LayerKind::Sigmoid => Layer::Sigmoid,
                LayerKind::Maxpool2d => Layer::MaxPool2d {
                    size: ls.size.unwrap_or(2),
                },
                LayerKind::Flatten => Layer::Flatten,
                LayerKind::Softmax => Layer::Softmax,
            };
            layers.push(layer);
        }
        let model = TappedModel::with_taps(spec.input_shape, layers, spec.taps, spec.seed)?;
        nets.push((spec.name, model));
    }
    if cursor.next().is_some() {
        return Err(Error::format(FMT, "trailing parameter data"));
    }
    Ok((nets, header.meta))
}

pub fn save_model(model: &TappedModel, path: &Path) -> Result<()> {
    let bytes = encode(MODEL_VERSION, &[("classifier", model)], serde_json::Value::Null);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TappedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut nets, _) = decode(MODEL_VERSION, &bytes)?;
    if nets.len() != 1 {
        return Err(Error::format(
            "model container",
            format!("expected one network, found {}", nets.len()),
        ));
    }
    Ok(nets.remove(0).1)
}

/// Size in bytes of the serialized model.
pub fn serialized_size(model: &TappedModel) -> usize {
    encode(MODEL_VERSION, &[("classifier", model)], serde_json::Value::Null).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelBuilder;

    #[test]
    fn round_trip_preserves_model() {
        let m = ModelBuilder::new(&[1, 6, 6], 3)
            .conv(2, 3, 1, 1)
            .relu()
            .maxpool(2)
            .flatten()
            .dense(4)
            .softmax()
            .build()
            .unwrap();
        let bytes = encode(MODEL_VERSION, &[("classifier", &m)], serde_json::Value::Null);
        let (nets, _) = decode(MODEL_VERSION, &bytes).unwrap();
        assert_eq!(nets[0].1, m);
        assert_eq!(bytes.len(), serialized_size(&m));
    }

    #[test]
    fn wrong_version_and_truncation_fail() {
        let m = ModelBuilder::new(&[2], 0).dense(2).build().unwrap();
        let bytes = encode(MODEL_VERSION, &[("classifier", &m)], serde_json::Value::Null);
        assert!(matches!(
            decode("tracer-cfgan/1", &bytes),
            Err(Error::Version { .. })
        ));
        assert!(decode(MODEL_VERSION, &bytes[..bytes.len() - 3]).is_err());
    }
}
