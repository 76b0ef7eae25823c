//! The QTM model container.
//!
//! Layout: the magic `QTMODEL1`, a little-endian `u64` header length, a
//! compact UTF-8 JSON header, then the raw little-endian weight blob. Weight
//! descriptors address the blob by offset (from the blob start) and length.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Attributes, Graph, Node, NodeQuant, OpKind, ValueInfo, Weight};
use crate::quant::{QuantDType, QuantParams};
use crate::tensor::{numel, ByteReader, DType, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"QTMODEL1";

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    opset: i64,
    inputs: Vec<ValueInfo>,
    outputs: Vec<String>,
    nodes: Vec<NodeHeader>,
}

#[derive(Serialize, Deserialize)]
struct NodeHeader {
    id: String,
    op: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    attrs: Attributes,
    #[serde(default)]
    weights: Vec<WeightHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<NodeQuant>,
}

#[derive(Serialize, Deserialize)]
struct WeightHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    zero_point: Option<i32>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Encodes `g` into container bytes. Graphs without nodes are rejected.
pub fn encode_model(g: &Graph) -> Result<Vec<u8>> {
    if g.nodes.is_empty() {
        return Err(format_err(format!("graph {} has no nodes", g.name)));
    }
    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let mut weights = Vec::with_capacity(node.weights.len());
        for (name, w) in &node.weights {
            let bytes = w.tensor.to_le_bytes();
            weights.push(WeightHeader {
                name: name.clone(),
                dtype: w.tensor.dtype(),
                shape: w.tensor.shape().to_vec(),
                offset: blob.len() as u64,
                length: bytes.len() as u64,
                scale: w.qparams.map(|p| p.scale),
                zero_point: w.qparams.map(|p| p.zero_point),
            });
            blob.extend_from_slice(&bytes);
        }
        nodes.push(NodeHeader {
            id: node.id.clone(),
            op: node.op.as_str().to_string(),
            inputs: node.inputs.clone(),
            outputs: node.outputs.clone(),
            attrs: node.attrs.clone(),
            weights,
            quant: node.quant,
        });
    }
    let header = Header {
        name: g.name.clone(),
        opset: g.opset,
        inputs: g.inputs.clone(),
        outputs: g.outputs.clone(),
        nodes,
    };
    let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Writes the container and returns its exact size in bytes.
pub fn serialize_model(g: &Graph, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_model(g)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_model_container(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub fn decode_model(bytes: &[u8]) -> Result<Graph> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(8).map_err(|_| format_err("file too short for a model container"))?;
    if magic != MODEL_MAGIC {
        return Err(format_err(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let len = r.u64()?;
    let len = usize::try_from(len).map_err(|_| format_err("header length overflows"))?;
    let json = r.take(len).map_err(|_| format_err("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| format_err(format!("header: {e}")))?;
    let blob = r.rest();

    let mut unsupported: Vec<String> = Vec::new();
    for n in &header.nodes {
        if n.op.parse::<OpKind>().is_err() && !unsupported.contains(&n.op) {
            unsupported.push(n.op.clone());
        }
    }
    if !unsupported.is_empty() {
        return Err(Error::UnsupportedOp(unsupported));
    }

    let mut nodes = Vec::with_capacity(header.nodes.len());
    for n in header.nodes {
        let mut node = Node::new(n.id, n.op.parse()?, &[], &[]);
        node.inputs = n.inputs;
        node.outputs = n.outputs;
        node.attrs = n.attrs;
        node.quant = n.quant;
        for w in n.weights {
            let (name, weight) = read_weight(w, blob)?;
            if node.weights.insert(name.clone(), weight).is_some() {
                return Err(format_err(format!("weight {name} listed twice on node {}", node.id)));
            }
        }
        nodes.push(node);
    }
    Graph::new(header.name, header.opset, header.inputs, header.outputs, nodes)
}

fn read_weight(w: WeightHeader, blob: &[u8]) -> Result<(String, Weight)> {
    let expected = numel(&w.shape) * w.dtype.size();
    let range = usize::try_from(w.offset)
        .ok()
        .zip(usize::try_from(w.length).ok())
        .and_then(|(o, l)| Some(o..o.checked_add(l)?))
        .filter(|r| r.end <= blob.len() && r.len() == expected)
        .ok_or_else(|| {
            format_err(format!(
                "weight {} descriptor (offset {}, length {}) does not fit {} bytes of {:?}",
                w.name, w.offset, w.length, expected, w.shape
            ))
        })?;
    let tensor = Tensor::from_le_bytes(w.dtype, w.shape, &blob[range])?;
    let qparams = match (w.scale, w.zero_point) {
        (None, None) => None,
        (Some(scale), zp) => {
            let dtype = match tensor.dtype() {
                DType::I32 => QuantDType::I32,
                DType::U8 => QuantDType::U8,
                _ => QuantDType::I8,
            };
            Some(QuantParams::new(scale, zp.unwrap_or(0), dtype).map_err(|e| format_err(e.to_string()))?)
        }
        (None, Some(_)) => return Err(format_err(format!("weight {} has a zero point but no scale", w.name))),
    };
    Ok((w.name, Weight { tensor, qparams }))
}
