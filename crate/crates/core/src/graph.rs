//! Dataflow graph IR.
//!
//! Nodes are kept in a valid topological order and every value is defined
//! exactly once (graph input or node output). Initializers are bound to the
//! node that consumes them as [`Weight`]s. A node is a "layer" for the
//! purposes of selective quantization.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{DType, Tensor};

/// The supported operator subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Conv,
    Relu,
    Clip,
    MaxPool,
    AveragePool,
    GlobalAveragePool,
    Add,
    Gemm,
    MatMul,
    Flatten,
    Reshape,
    Softmax,
    BatchNormalization,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Conv,
        OpKind::Relu,
        OpKind::Clip,
        OpKind::MaxPool,
        OpKind::AveragePool,
        OpKind::GlobalAveragePool,
        OpKind::Add,
        OpKind::Gemm,
        OpKind::MatMul,
        OpKind::Flatten,
        OpKind::Reshape,
        OpKind::Softmax,
        OpKind::BatchNormalization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "Conv",
            OpKind::Relu => "Relu",
            OpKind::Clip => "Clip",
            OpKind::MaxPool => "MaxPool",
            OpKind::AveragePool => "AveragePool",
            OpKind::GlobalAveragePool => "GlobalAveragePool",
            OpKind::Add => "Add",
            OpKind::Gemm => "Gemm",
            OpKind::MatMul => "MatMul",
            OpKind::Flatten => "Flatten",
            OpKind::Reshape => "Reshape",
            OpKind::Softmax => "Softmax",
            OpKind::BatchNormalization => "BatchNormalization",
        }
    }

    /// Inclusive bounds on the number of (possibly empty-named) inputs.
    pub fn arity(self) -> (usize, usize) {
        match self {
            OpKind::Conv | OpKind::Gemm => (2, 3),
            OpKind::Clip => (1, 3),
            OpKind::Add | OpKind::MatMul | OpKind::Reshape => (2, 2),
            OpKind::BatchNormalization => (5, 5),
            _ => (1, 1),
        }
    }

    fn required_attrs(self) -> &'static [&'static str] {
        match self {
            OpKind::MaxPool | OpKind::AveragePool => &["kernel_shape"],
            _ => &[],
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnsupportedOp(vec![s.to_string()]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrValue {
    Int(i64),
    Float(#[serde(with = "crate::serde_f32")] f32),
    Ints(Vec<i64>),
    String(String),
}

pub type Attributes = BTreeMap<String, AttrValue>;

/// Typed attribute lookups with defaults.
pub trait AttrExt {
    fn int(&self, name: &str, default: i64) -> Result<i64>;
    fn float(&self, name: &str, default: f32) -> Result<f32>;
    fn ints(&self, name: &str) -> Result<Option<&[i64]>>;
    fn string(&self, name: &str) -> Result<Option<&str>>;
}

impl AttrExt for Attributes {
    fn int(&self, name: &str, default: i64) -> Result<i64> {
        match self.get(name) {
            None => Ok(default),
            Some(AttrValue::Int(v)) => Ok(*v),
            Some(other) => Err(attr_type_error(name, "int", other)),
        }
    }

    fn float(&self, name: &str, default: f32) -> Result<f32> {
        match self.get(name) {
            None => Ok(default),
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(AttrValue::Int(v)) => Ok(*v as f32),
            Some(other) => Err(attr_type_error(name, "float", other)),
        }
    }

    fn ints(&self, name: &str) -> Result<Option<&[i64]>> {
        match self.get(name) {
            None => Ok(None),
            Some(AttrValue::Ints(v)) => Ok(Some(v)),
            Some(other) => Err(attr_type_error(name, "ints", other)),
        }
    }

    fn string(&self, name: &str) -> Result<Option<&str>> {
        match self.get(name) {
            None => Ok(None),
            Some(AttrValue::String(v)) => Ok(Some(v)),
            Some(other) => Err(attr_type_error(name, "string", other)),
        }
    }
}

fn attr_type_error(name: &str, want: &str, got: &AttrValue) -> Error {
    Error::Argument(format!("attribute {name} should be {want}, found {got:?}"))
}

/// An initializer bound to a node, optionally carrying the quantization
/// parameters it was encoded with.
#[derive(Clone, Debug, PartialEq)]
pub struct Weight {
    pub tensor: Tensor,
    pub qparams: Option<QuantParams>,
}

impl Weight {
    pub fn float(tensor: Tensor) -> Self {
        Weight {
            tensor,
            qparams: None,
        }
    }
}

/// How an activation edge is fake-quantized in a simulated layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationQdq {
    None,
    Fixed(QuantParams),
    /// Parameters derived per sample from the tensor's own range.
    Runtime,
}

/// Execution mode of a quantized layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeQuant {
    /// Integer kernel with calibrated activation parameters; output is
    /// requantized then handed on as f32.
    Static {
        input: QuantParams,
        output: QuantParams,
    },
    /// Integer kernel, input parameters computed per sample at run time.
    Dynamic,
    /// f32 kernel whose weights were snapped to the int8 grid, with optional
    /// quantize-dequantize on the input and output edges.
    Simulated {
        input: ActivationQdq,
        output: ActivationQdq,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attrs: Attributes,
    pub weights: BTreeMap<String, Weight>,
    pub quant: Option<NodeQuant>,
}

impl Node {
    pub fn new(id: impl Into<String>, op: OpKind, inputs: &[&str], outputs: &[&str]) -> Self {
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attrs: Attributes::new(),
            weights: BTreeMap::new(),
            quant: None,
        }
    }

    pub fn with_attr(mut self, name: &str, value: AttrValue) -> Self {
        self.attrs.insert(name.to_string(), value);
        self
    }

    pub fn with_weight(mut self, name: &str, tensor: Tensor) -> Self {
        self.weights.insert(name.to_string(), Weight::float(tensor));
        self
    }

    /// The weight feeding input slot `slot`, if that slot is bound.
    pub fn weight_at(&self, slot: usize) -> Option<&Weight> {
        self.inputs
            .get(slot)
            .filter(|n| !n.is_empty())
            .and_then(|n| self.weights.get(n))
    }

    /// Whether this node can be quantized: a Conv, Gemm or MatMul whose
    /// weight (and bias, if any) are bound f32 initializers of a shape the
    /// integer kernels handle.
    pub fn is_quantizable(&self) -> bool {
        let Some(w) = self.weight_at(1) else {
            return false;
        };
        if w.tensor.dtype() != DType::F32 {
            return false;
        }
        let bias_ok = |n_out: usize| match self.inputs.get(2).filter(|s| !s.is_empty()) {
            None => true,
            Some(_) => self.weight_at(2).is_some_and(|b| {
                b.tensor.dtype() == DType::F32 && (b.tensor.len() == 1 || b.tensor.len() == n_out)
            }),
        };
        match self.op {
            OpKind::Conv => w.tensor.rank() == 4 && bias_ok(w.tensor.shape()[0]),
            OpKind::Gemm => {
                // the integer kernel has no scaling or transposed activations
                let plain = self.attrs.int("transA", 0).ok() == Some(0)
                    && self.attrs.float("alpha", 1.0).ok() == Some(1.0)
                    && self.attrs.float("beta", 1.0).ok() == Some(1.0);
                if w.tensor.rank() != 2 || !plain {
                    return false;
                }
                let trans_b = matches!(self.attrs.get("transB"), Some(AttrValue::Int(v)) if *v != 0);
                let n = if trans_b { w.tensor.shape()[0] } else { w.tensor.shape()[1] };
                bias_ok(n)
            }
            OpKind::MatMul => w.tensor.rank() == 2,
            _ => false,
        }
    }
}

/// One extent of a graph input; only the batch axis is expected to be symbolic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dim {
    Fixed(usize),
    Symbolic(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<Dim>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub name: String,
    pub opset: i64,
    pub inputs: Vec<ValueInfo>,
    /// Exactly one entry: the classification output.
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
}

impl Graph {
    /// Builds and validates a graph.
    pub fn new(
        name: impl Into<String>,
        opset: i64,
        inputs: Vec<ValueInfo>,
        outputs: Vec<String>,
        nodes: Vec<Node>,
    ) -> Result<Self> {
        let g = Graph {
            name: name.into(),
            opset,
            inputs,
            outputs,
            nodes,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks every structural invariant with a single forward scan.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut defined: HashSet<&str> = HashSet::new();
        for input in &self.inputs {
            if !defined.insert(&input.name) {
                return Err(graph_err(&input.name, "value defined twice"));
            }
        }
        for node in &self.nodes {
            if !ids.insert(node.id.as_str()) {
                return Err(graph_err(&node.id, "duplicate node id"));
            }
            let (lo, hi) = node.op.arity();
            if node.inputs.len() < lo || node.inputs.len() > hi {
                return Err(graph_err(
                    &node.id,
                    &format!("{} takes {lo}..={hi} inputs, got {}", node.op, node.inputs.len()),
                ));
            }
            if node.outputs.len() != 1 || node.outputs[0].is_empty() {
                return Err(graph_err(&node.id, "node must have exactly one output"));
            }
            for attr in node.op.required_attrs() {
                if !node.attrs.contains_key(*attr) {
                    return Err(graph_err(&node.id, &format!("missing attribute {attr}")));
                }
            }
            for (slot, input) in node.inputs.iter().enumerate() {
                if input.is_empty() {
                    if slot < lo {
                        return Err(graph_err(&node.id, "required input is empty"));
                    }
                    continue;
                }
                if !node.weights.contains_key(input) && !defined.contains(input.as_str()) {
                    return Err(graph_err(input, "undefined value"));
                }
            }
            for name in node.weights.keys() {
                if !node.inputs.contains(name) {
                    return Err(graph_err(name, "weight not consumed by its node"));
                }
            }
            for out in &node.outputs {
                if !defined.insert(out) {
                    return Err(graph_err(out, "value defined twice"));
                }
            }
        }
        if self.outputs.len() != 1 {
            return Err(graph_err(
                &self.name,
                "graph must designate exactly one output",
            ));
        }
        if !defined.contains(self.outputs[0].as_str()) {
            return Err(graph_err(&self.outputs[0], "undefined value"));
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Ids of quantizable nodes in topological order.
    pub fn quantizable_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.is_quantizable())
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn output_name(&self) -> &str {
        &self.outputs[0]
    }

    /// Node ids in order. Handy for structural comparisons.
    pub fn node_ids(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.id.as_str()).collect()
    }
}

fn graph_err(name: &str, reason: &str) -> Error {
    Error::Graph {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(name: &str, dims: Vec<Dim>) -> ValueInfo {
        ValueInfo {
            name: name.into(),
            dtype: DType::F32,
            shape: dims,
        }
    }

    fn relu_graph() -> Graph {
        Graph::new(
            "relu",
            13,
            vec![input("x", vec![Dim::Symbolic("N".into()), Dim::Fixed(4)])],
            vec!["y".into()],
            vec![Node::new("r", OpKind::Relu, &["x"], &["y"])],
        )
        .unwrap()
    }

    #[test]
    fn dangling_reference_names_the_value() {
        let err = Graph::new(
            "g",
            13,
            vec![input("x", vec![Dim::Fixed(1)])],
            vec!["y".into()],
            vec![Node::new("r", OpKind::Relu, &["x9"], &["y"])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Graph { name, .. } if name == "x9"));
    }

    #[test]
    fn forward_reference_is_rejected() {
        let err = Graph::new(
            "g",
            13,
            vec![input("x", vec![Dim::Fixed(1)])],
            vec!["z".into()],
            vec![
                Node::new("a", OpKind::Relu, &["y"], &["z"]),
                Node::new("b", OpKind::Relu, &["x"], &["y"]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Graph { name, .. } if name == "y"));
    }

    #[test]
    fn duplicate_ids_and_outputs_are_rejected() {
        let mut g = relu_graph();
        g.nodes.push(Node::new("r", OpKind::Relu, &["y"], &["z"]));
        assert!(g.validate().is_err());
        let mut g = relu_graph();
        g.nodes.push(Node::new("r2", OpKind::Relu, &["x"], &["y"]));
        assert!(g.validate().is_err());
    }

    #[test]
    fn arity_and_required_attributes() {
        let mut g = relu_graph();
        g.nodes[0] = Node::new("p", OpKind::MaxPool, &["x"], &["y"]);
        assert!(g.validate().is_err());
        g.nodes[0] = g.nodes[0]
            .clone()
            .with_attr("kernel_shape", AttrValue::Ints(vec![2, 2]));
        g.validate().unwrap();
        g.nodes[0] = Node::new("a", OpKind::Add, &["x"], &["y"]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn exactly_one_output() {
        let mut g = relu_graph();
        g.outputs.push("x".into());
        assert!(g.validate().is_err());
        g.outputs.clear();
        assert!(g.validate().is_err());
    }

    #[test]
    fn quantizable_requires_bound_weights() {
        let w = Tensor::from_f32(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gemm = Node::new("fc", OpKind::Gemm, &["x", "w"], &["y"]).with_weight("w", w.clone());
        assert!(gemm.is_quantizable());
        let unbound = Node::new("mm", OpKind::MatMul, &["x", "x2"], &["y"]);
        assert!(!unbound.is_quantizable());
        let bad_bias = Node::new("fc", OpKind::Gemm, &["x", "w", "b"], &["y"])
            .with_weight("w", w)
            .with_weight("b", Tensor::from_f32(vec![3], vec![0.0; 3]).unwrap());
        assert!(!bad_bias.is_quantizable());
        assert!(!Node::new("r", OpKind::Relu, &["x"], &["y"]).is_quantizable());
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.as_str().parse::<OpKind>().unwrap(), op);
        }
        assert!(matches!("LSTM".parse::<OpKind>(), Err(Error::UnsupportedOp(v)) if v == ["LSTM"]));
    }
}
