//! Binary model format: an 8-byte little-endian header length, a JSON
//! architecture header, then every parameter as little-endian `f64` in layer
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, ModelGraph};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub name: String,
    pub kind: LayerKind,
    pub param_shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerHeader>,
}

pub fn encode_model(model: &ModelGraph) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        layers: model
            .layers()
            .iter()
            .map(|l| LayerHeader {
                name: l.name.clone(),
                kind: l.kind,
                param_shapes: l.params.iter().map(|p| p.shape().to_vec()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * model.num_params());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.layers().iter().flat_map(|l| &l.params) {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelGraph> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the header length prefix".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(Error::Format(format!("header length {header_len} exceeds file size")));
    }
    let header: ModelHeader = serde_json::from_slice(&body[..header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: header.format_version, expected: FORMAT_VERSION });
    }
    for l in &header.layers {
        let expected = l.kind.param_shapes();
        if l.param_shapes != expected {
            return Err(Error::ShapeMismatch(format!(
                "layer '{}' declares parameter shapes {:?} but its kind needs {:?}",
                l.name, l.param_shapes, expected
            )));
        }
    }
    let payload = &body[header_len..];
    let needed: usize =
        header.layers.iter().flat_map(|l| &l.param_shapes).map(|s| s.iter().product::<usize>() * 8).sum();
    if payload.len() < needed {
        return Err(Error::TruncatedPayload { expected: needed, found: payload.len() });
    }
    if payload.len() > needed {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - needed)));
    }
    let mut offset = 0;
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in header.layers {
        let mut params = Vec::with_capacity(l.param_shapes.len());
        for shape in &l.param_shapes {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            params.push(Tensor::new(shape.clone(), data)?);
        }
        layers.push(Layer::new(l.name, l.kind, params)?);
    }
    ModelGraph::new(header.input_shape, header.num_classes, layers).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode_model(&fs::read(path)?)
}
