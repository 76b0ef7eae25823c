//! Importer for ONNX models restricted to the supported operator subset.
//!
//! Decodes just the protobuf fields the IR needs and skips everything else,
//! so newer producers with extra fields still load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::engine::DEFAULT_OPSET;
use crate::error::{Error, Result};
use crate::graph::{AttrValue, Attributes, Dim, Graph, Node, OpKind, ValueInfo, Weight};
use crate::tensor::{numel, DType, Tensor, TensorData};

pub fn import_onnx(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_onnx(&bytes)
}

pub fn decode_onnx(bytes: &[u8]) -> Result<Graph> {
    let mut opset = None;
    let mut graph = None;
    for field in Fields::new(bytes) {
        let (num, value) = field?;
        match num {
            7 => graph = Some(value.bytes()?),
            8 => {
                let (domain, version) = parse_opset(value.bytes()?)?;
                if domain.is_empty() || domain == "ai.onnx" {
                    opset = Some(version);
                }
            }
            _ => {}
        }
    }
    let graph = graph.ok_or_else(|| Error::Format("model has no graph".into()))?;
    build_graph(parse_graph(graph)?, opset.unwrap_or(DEFAULT_OPSET))
}

// ---------------------------------------------------------------------------
// wire format

#[derive(Clone, Copy, Debug)]
enum Value<'a> {
    Varint(u64),
    Fixed64,
    Bytes(&'a [u8]),
    Fixed32(u32),
}

impl<'a> Value<'a> {
    fn bytes(self) -> Result<&'a [u8]> {
        match self {
            Value::Bytes(b) => Ok(b),
            other => Err(wire_err(format!("expected length-delimited field, got {other:?}"))),
        }
    }

    fn string(self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| wire_err("string is not UTF-8"))
    }

    fn int(self) -> Result<i64> {
        match self {
            Value::Varint(v) => Ok(v as i64),
            other => Err(wire_err(format!("expected varint, got {other:?}"))),
        }
    }

    fn float(self) -> Result<f32> {
        match self {
            Value::Fixed32(v) => Ok(f32::from_bits(v)),
            other => Err(wire_err(format!("expected 32-bit float, got {other:?}"))),
        }
    }
}

fn wire_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("protobuf: {}", msg.into()))
}

struct Fields<'a> {
    buf: &'a [u8],
    pos: usize,
    failed: bool,
}

impl<'a> Fields<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Fields {
            buf,
            pos: 0,
            failed: false,
        }
    }

    fn varint(&mut self) -> Result<u64> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let &b = self.buf.get(self.pos).ok_or_else(|| wire_err("truncated varint"))?;
            self.pos += 1;
            v |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(wire_err("varint longer than 10 bytes"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| wire_err("field runs past end of message"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn field(&mut self) -> Result<(u64, Value<'a>)> {
        let key = self.varint()?;
        let num = key >> 3;
        if num == 0 {
            return Err(wire_err("field number 0"));
        }
        let value = match key & 7 {
            0 => Value::Varint(self.varint()?),
            1 => {
                self.take(8)?;
                Value::Fixed64
            }
            2 => {
                let len = usize::try_from(self.varint()?).map_err(|_| wire_err("length overflows"))?;
                Value::Bytes(self.take(len)?)
            }
            5 => Value::Fixed32(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            wt => return Err(wire_err(format!("unsupported wire type {wt}"))),
        };
        Ok((num, value))
    }
}

impl<'a> Iterator for Fields<'a> {
    type Item = Result<(u64, Value<'a>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.pos >= self.buf.len() {
            return None;
        }
        let r = self.field();
        self.failed = r.is_err();
        Some(r)
    }
}

/// Repeated scalar fields may arrive packed or one element per field.
fn push_varints(out: &mut Vec<i64>, value: Value<'_>) -> Result<()> {
    match value {
        Value::Varint(v) => out.push(v as i64),
        Value::Bytes(b) => {
            let mut f = Fields::new(b);
            while f.pos < b.len() {
                out.push(f.varint()? as i64);
            }
        }
        other => return Err(wire_err(format!("expected varints, got {other:?}"))),
    }
    Ok(())
}

fn push_floats(out: &mut Vec<f32>, value: Value<'_>) -> Result<()> {
    match value {
        Value::Fixed32(v) => out.push(f32::from_bits(v)),
        Value::Bytes(b) if b.len() % 4 == 0 => {
            out.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        other => return Err(wire_err(format!("expected floats, got {other:?}"))),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// messages

fn parse_opset(buf: &[u8]) -> Result<(String, i64)> {
    let (mut domain, mut version) = (String::new(), DEFAULT_OPSET);
    for field in Fields::new(buf) {
        match field? {
            (1, v) => domain = v.string()?,
            (2, v) => version = v.int()?,
            _ => {}
        }
    }
    Ok((domain, version))
}

#[derive(Default)]
struct RawGraph {
    name: String,
    nodes: Vec<RawNode>,
    initializers: Vec<RawTensor>,
    inputs: Vec<RawValueInfo>,
    outputs: Vec<String>,
}

#[derive(Default)]
struct RawNode {
    name: String,
    op_type: String,
    domain: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    attrs: Vec<(String, Option<AttrValue>)>,
}

#[derive(Default)]
struct RawTensor {
    name: String,
    dims: Vec<i64>,
    data_type: i64,
    float_data: Vec<f32>,
    int64_data: Vec<i64>,
    raw: Option<Vec<u8>>,
    external: bool,
}

struct RawValueInfo {
    name: String,
    elem_type: i64,
    dims: Vec<Dim>,
}

fn parse_graph(buf: &[u8]) -> Result<RawGraph> {
    let mut g = RawGraph::default();
    for field in Fields::new(buf) {
        match field? {
            (1, v) => g.nodes.push(parse_node(v.bytes()?)?),
            (2, v) => g.name = v.string()?,
            (5, v) => g.initializers.push(parse_tensor(v.bytes()?)?),
            (11, v) => g.inputs.push(parse_value_info(v.bytes()?)?),
            (12, v) => g.outputs.push(parse_value_info(v.bytes()?)?.name),
            _ => {}
        }
    }
    Ok(g)
}

fn parse_node(buf: &[u8]) -> Result<RawNode> {
    let mut n = RawNode::default();
    for field in Fields::new(buf) {
        match field? {
            (1, v) => n.inputs.push(v.string()?),
            (2, v) => n.outputs.push(v.string()?),
            (3, v) => n.name = v.string()?,
            (4, v) => n.op_type = v.string()?,
            (5, v) => n.attrs.push(parse_attribute(v.bytes()?)?),
            (7, v) => n.domain = v.string()?,
            _ => {}
        }
    }
    Ok(n)
}

/// `None` marks an attribute kind the IR cannot hold (tensors, float lists,
/// graphs); those are dropped with a warning.
fn parse_attribute(buf: &[u8]) -> Result<(String, Option<AttrValue>)> {
    let mut name = String::new();
    let mut kind = 0;
    let (mut f, mut i, mut s) = (None, None, None);
    let mut ints = Vec::new();
    let mut floats = Vec::new();
    for field in Fields::new(buf) {
        match field? {
            (1, v) => name = v.string()?,
            (2, v) => f = Some(v.float()?),
            (3, v) => i = Some(v.int()?),
            (4, v) => s = Some(v.string()?),
            (7, v) => push_floats(&mut floats, v)?,
            (8, v) => push_varints(&mut ints, v)?,
            (20, v) => kind = v.int()?,
            _ => {}
        }
    }
    // AttributeType: FLOAT=1, INT=2, STRING=3, INTS=7; without a type tag
    // the populated field decides
    let value = match kind {
        1 => f.map(AttrValue::Float),
        2 => i.map(AttrValue::Int),
        3 => s.map(AttrValue::String),
        7 => Some(AttrValue::Ints(ints)),
        0 => f
            .map(AttrValue::Float)
            .or(i.map(AttrValue::Int))
            .or(s.map(AttrValue::String))
            .or((!ints.is_empty()).then_some(AttrValue::Ints(ints))),
        _ => None,
    };
    Ok((name, value))
}

fn parse_tensor(buf: &[u8]) -> Result<RawTensor> {
    let mut t = RawTensor::default();
    for field in Fields::new(buf) {
        match field? {
            (1, v) => push_varints(&mut t.dims, v)?,
            (2, v) => t.data_type = v.int()?,
            (4, v) => push_floats(&mut t.float_data, v)?,
            (7, v) => push_varints(&mut t.int64_data, v)?,
            (8, v) => t.name = v.string()?,
            (9, v) => t.raw = Some(v.bytes()?.to_vec()),
            (14, v) => t.external = v.int()? == 1,
            _ => {}
        }
    }
    Ok(t)
}

fn parse_value_info(buf: &[u8]) -> Result<RawValueInfo> {
    let mut info = RawValueInfo {
        name: String::new(),
        elem_type: 0,
        dims: Vec::new(),
    };
    for field in Fields::new(buf) {
        match field? {
            (1, v) => info.name = v.string()?,
            (2, v) => {
                for tf in Fields::new(v.bytes()?) {
                    if let (1, tensor_type) = tf? {
                        parse_tensor_type(tensor_type.bytes()?, &mut info)?;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(info)
}

fn parse_tensor_type(buf: &[u8], info: &mut RawValueInfo) -> Result<()> {
    for field in Fields::new(buf) {
        match field? {
            (1, v) => info.elem_type = v.int()?,
            (2, shape) => {
                for df in Fields::new(shape.bytes()?) {
                    let (1, dim) = df? else { continue };
                    let mut d = Dim::Symbolic(String::new());
                    for f in Fields::new(dim.bytes()?) {
                        match f? {
                            (1, v) => {
                                let n = usize::try_from(v.int()?)
                                    .map_err(|_| Error::Format("negative dimension".into()))?;
                                d = Dim::Fixed(n);
                            }
                            (2, v) => d = Dim::Symbolic(v.string()?),
                            _ => {}
                        }
                    }
                    info.dims.push(d);
                }
            }
            _ => {}
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// conversion

/// ONNX TensorProto.DataType codes.
fn dtype_of(code: i64) -> Result<DType> {
    Ok(match code {
        1 => DType::F32,
        2 => DType::U8,
        3 => DType::I8,
        6 => DType::I32,
        7 => DType::I64,
        other => return Err(Error::UnsupportedDtype(format!("ONNX data type {other}"))),
    })
}

fn convert_initializer(t: RawTensor) -> Result<Tensor> {
    if t.external {
        return Err(Error::Format(format!("initializer {} uses external data", t.name)));
    }
    let dtype = dtype_of(t.data_type)?;
    if !matches!(dtype, DType::F32 | DType::I64) {
        return Err(Error::UnsupportedDtype(format!("initializer {} is {dtype}", t.name)));
    }
    let shape = t
        .dims
        .iter()
        .map(|&d| usize::try_from(d).map_err(|_| Error::Format(format!("initializer {} has dim {d}", t.name))))
        .collect::<Result<Vec<_>>>()?;
    if let Some(raw) = t.raw {
        return Tensor::from_le_bytes(dtype, shape, &raw);
    }
    let data = match dtype {
        DType::F32 => TensorData::F32(t.float_data),
        _ => TensorData::I64(t.int64_data),
    };
    if data.len() != numel(&shape) {
        return Err(Error::Format(format!(
            "initializer {} holds {} values for shape {shape:?}",
            t.name,
            data.len()
        )));
    }
    Tensor::new(shape, data)
}

fn build_graph(raw: RawGraph, opset: i64) -> Result<Graph> {
    let mut unsupported = Vec::new();
    for n in &raw.nodes {
        let standard = n.domain.is_empty() || n.domain == "ai.onnx";
        let label = if standard {
            n.op_type.clone()
        } else {
            format!("{}.{}", n.domain, n.op_type)
        };
        if (!standard || n.op_type.parse::<OpKind>().is_err()) && !unsupported.contains(&label) {
            unsupported.push(label);
        }
    }
    if !unsupported.is_empty() {
        return Err(Error::UnsupportedOp(unsupported));
    }

    let mut initializers = HashMap::new();
    for t in raw.initializers {
        let name = t.name.clone();
        initializers.insert(name, convert_initializer(t)?);
    }

    let inputs = raw
        .inputs
        .into_iter()
        .filter(|i| !initializers.contains_key(&i.name))
        .map(|i| {
            Ok(ValueInfo {
                name: i.name,
                dtype: dtype_of(i.elem_type)?,
                shape: i.dims,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (index, n) in raw.nodes.into_iter().enumerate() {
        let op: OpKind = n.op_type.parse()?;
        let id = if n.name.is_empty() {
            format!("{}_{index}", n.op_type)
        } else {
            n.name
        };
        let mut attrs = Attributes::new();
        for (name, value) in n.attrs {
            match value {
                Some(v) => {
                    attrs.insert(name, v);
                }
                None => log::warn!("node {id}: dropping attribute {name} of unsupported kind"),
            }
        }
        let mut weights = BTreeMap::new();
        for input in &n.inputs {
            if let Some(t) = initializers.get(input) {
                weights.insert(input.clone(), Weight::float(t.clone()));
            }
        }
        nodes.push(Node {
            id,
            op,
            inputs: n.inputs,
            outputs: n.outputs,
            attrs,
            weights,
            quant: None,
        });
    }

    let nodes = topological_order(nodes, &inputs);
    Graph::new(raw.name, opset, inputs, raw.outputs, nodes)
}

/// Stable Kahn ordering: repeatedly emits the earliest node whose inputs are
/// all available. Already-sorted lists come back unchanged; anything left
/// unresolved is appended so validation can name the dangling value.
fn topological_order(nodes: Vec<Node>, inputs: &[ValueInfo]) -> Vec<Node> {
    let mut available: HashSet<String> = inputs.iter().map(|i| i.name.clone()).collect();
    let mut pending: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
    let mut ordered = Vec::with_capacity(pending.len());
    loop {
        let ready = pending.iter().position(|slot| {
            slot.as_ref().is_some_and(|n| {
                n.inputs
                    .iter()
                    .all(|i| i.is_empty() || n.weights.contains_key(i) || available.contains(i))
            })
        });
        let Some(pos) = ready else { break };
        let node = pending[pos].take().expect("position found a node");
        available.extend(node.outputs.iter().cloned());
        ordered.push(node);
    }
    ordered.extend(pending.into_iter().flatten());
    ordered
}
