//! Reference interpreter over the graph IR.
//!
//! Inputs are split into chunks along the batch axis and each chunk runs the
//! whole graph. Every kernel computes samples independently with a fixed
//! reduction order, so outputs are bit-identical for any chunk size.

mod kernels;
mod ops;
mod quantized;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::graph::{Dim, Graph, Node};
use crate::tensor::{DType, Tensor};

pub use ops::{run_op, run_op_with, DEFAULT_OPSET};

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionOptions {
    /// Samples per execution chunk, at least 1.
    pub chunk_size: usize,
    pub capture_activations: bool,
    /// Restricts capture to these node ids.
    pub capture_filter: Option<BTreeSet<String>>,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        ExecutionOptions {
            chunk_size: 32,
            capture_activations: false,
            capture_filter: None,
        }
    }
}

impl ExecutionOptions {
    pub fn with_chunk_size(chunk_size: usize) -> Self {
        ExecutionOptions {
            chunk_size,
            ..Default::default()
        }
    }

    pub fn capture_all(mut self) -> Self {
        self.capture_activations = true;
        self.capture_filter = None;
        self
    }

    pub fn capture_only<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.capture_activations = true;
        self.capture_filter = Some(ids.into_iter().map(Into::into).collect());
        self
    }

    fn wants(&self, id: &str) -> bool {
        self.capture_activations
            && self.capture_filter.as_ref().is_none_or(|f| f.contains(id))
    }
}

/// Per-node outputs, concatenated over chunks along the batch axis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub per_node: BTreeMap<String, Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, node_id: &str) -> Option<&Tensor> {
        self.per_node.get(node_id)
    }

    pub fn len(&self) -> usize {
        self.per_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_node.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Execution {
    pub outputs: BTreeMap<String, Tensor>,
    pub trace: ActivationTrace,
}

impl Execution {
    /// The graph's single designated output.
    pub fn output(&self) -> &Tensor {
        self.outputs.values().next().expect("graphs have exactly one output")
    }

    pub fn into_output(self) -> Tensor {
        self.outputs.into_values().next().expect("graphs have exactly one output")
    }
}

/// Runs `g` on `batch` (leading axis = samples).
pub fn execute(g: &Graph, batch: &Tensor, opts: &ExecutionOptions) -> Result<Execution> {
    let mut captured: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let outputs = run_chunked(g, batch, opts.chunk_size, &mut |node, _, value| {
        if let Some(node) = node.filter(|n| opts.wants(&n.id)) {
            captured.entry(node.id.clone()).or_default().push(value.clone());
        }
    })?;
    let mut per_node = BTreeMap::new();
    for (id, parts) in captured {
        per_node.insert(id, Tensor::concat_batch(&parts)?);
    }
    Ok(Execution {
        outputs: BTreeMap::from([(g.output_name().to_string(), outputs)]),
        trace: ActivationTrace { per_node },
    })
}

/// Runs `g` and reports every value (graph input and node outputs) of every
/// chunk to `observe`, keyed by value name. Returns the graph output.
pub(crate) fn execute_observed(
    g: &Graph,
    batch: &Tensor,
    chunk_size: usize,
    observe: &mut dyn FnMut(&str, &Tensor),
) -> Result<Tensor> {
    run_chunked(g, batch, chunk_size, &mut |_, name, value| observe(name, value))
}

/// Sees every produced value: the producing node (none for the graph
/// input), the value name and the value.
type Hook<'a> = dyn FnMut(Option<&Node>, &str, &Tensor) + 'a;

fn run_chunked(
    g: &Graph,
    batch: &Tensor,
    chunk_size: usize,
    hook: &mut Hook<'_>,
) -> Result<Tensor> {
    if chunk_size == 0 {
        return Err(Error::Argument("chunk_size must be at least 1".into()));
    }
    check_input(g, batch)?;
    let total = batch.shape()[0];
    let last_use = last_uses(g);
    let mut parts = Vec::with_capacity(total.div_ceil(chunk_size));
    let mut start = 0;
    while start < total {
        let end = (start + chunk_size).min(total);
        let chunk = batch.slice_batch(start, end)?;
        hook(None, &g.inputs[0].name, &chunk);
        parts.push(run_chunk(g, chunk, &last_use, hook)?);
        start = end;
    }
    Tensor::concat_batch(&parts)
}

fn check_input(g: &Graph, batch: &Tensor) -> Result<()> {
    let [input] = g.inputs.as_slice() else {
        return Err(Error::Argument(format!(
            "execution needs exactly one graph input, {} has {}",
            g.name,
            g.inputs.len()
        )));
    };
    if batch.dtype() != input.dtype || batch.dtype() != DType::F32 {
        return Err(Error::Argument(format!(
            "input {} expects {}, got {}",
            input.name,
            input.dtype,
            batch.dtype()
        )));
    }
    let shape_ok = batch.rank() == input.shape.len()
        && batch.shape()[1..]
            .iter()
            .zip(&input.shape[1..])
            .all(|(&actual, declared)| !matches!(declared, Dim::Fixed(d) if *d != actual));
    if !shape_ok || batch.rank() == 0 || batch.shape()[0] == 0 {
        return Err(Error::Argument(format!(
            "input {} declared {:?}, got {:?}",
            input.name,
            input.shape,
            batch.shape()
        )));
    }
    Ok(())
}

/// Index of the last node reading each value.
fn last_uses(g: &Graph) -> HashMap<&str, usize> {
    let mut last = HashMap::new();
    for (i, node) in g.nodes.iter().enumerate() {
        for name in &node.inputs {
            if !name.is_empty() && !node.weights.contains_key(name) {
                last.insert(name.as_str(), i);
            }
        }
    }
    last
}

fn run_chunk(
    g: &Graph,
    chunk: Tensor,
    last_use: &HashMap<&str, usize>,
    hook: &mut Hook<'_>,
) -> Result<Tensor> {
    let mut values: HashMap<&str, Tensor> = HashMap::new();
    values.insert(g.inputs[0].name.as_str(), chunk);
    for (i, node) in g.nodes.iter().enumerate() {
        let out = run_node(g, node, &values)?;
        hook(Some(node), &node.outputs[0], &out);
        for name in &node.inputs {
            if last_use.get(name.as_str()) == Some(&i) && name != g.output_name() {
                values.remove(name.as_str());
            }
        }
        values.insert(node.outputs[0].as_str(), out);
    }
    values
        .remove(g.output_name())
        .ok_or_else(|| Error::exec(&g.name, "graph output was never produced"))
}

fn run_node(g: &Graph, node: &Node, values: &HashMap<&str, Tensor>) -> Result<Tensor> {
    let mut slots = Vec::with_capacity(node.inputs.len());
    for name in &node.inputs {
        if name.is_empty() {
            slots.push(None);
        } else if let Some(w) = node.weights.get(name) {
            slots.push(Some(&w.tensor));
        } else {
            let v = values
                .get(name.as_str())
                .ok_or_else(|| Error::exec(&node.id, format!("value {name} is not available")))?;
            slots.push(Some(v));
        }
    }
    let result = match &node.quant {
        None => run_op_with(node.op, &slots, &node.attrs, g.opset).map(|mut v| v.remove(0)),
        Some(q) => quantized::run_quantized(node, q, &slots, g.opset),
    };
    result.map_err(|e| match e {
        Error::Execution { message, .. } => Error::exec(&node.id, message),
        other => Error::exec(&node.id, other.to_string()),
    })
}

/// Per sample, the `k` highest-scoring class indices in descending order of
/// score; equal scores go to the lower index first.
pub fn top_k(logits: &Tensor, k: usize) -> Result<Vec<Vec<usize>>> {
    let &[_, classes] = logits.shape() else {
        return Err(Error::Argument(format!(
            "top_k expects batch x classes logits, got {:?}",
            logits.shape()
        )));
    };
    if k == 0 || k > classes {
        return Err(Error::Argument(format!("k = {k} must be in 1..={classes}")));
    }
    let xs = logits.as_f32()?;
    Ok(xs
        .chunks(classes)
        .map(|row| {
            let mut idx: Vec<usize> = (0..classes).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            idx.truncate(k);
            idx
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttrValue, OpKind, ValueInfo};

    fn graph(nodes: Vec<Node>, width: usize, out: &str) -> Graph {
        Graph::new(
            "t",
            13,
            vec![ValueInfo {
                name: "x".into(),
                dtype: DType::F32,
                shape: vec![Dim::Symbolic("N".into()), Dim::Fixed(width)],
            }],
            vec![out.into()],
            nodes,
        )
        .unwrap()
    }

    #[test]
    fn relu_graph_end_to_end() {
        let g = graph(vec![Node::new("r", OpKind::Relu, &["x"], &["y"])], 3, "y");
        let x = Tensor::from_f32(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let run = execute(&g, &x, &ExecutionOptions::default()).unwrap();
        assert_eq!(run.output().as_f32().unwrap(), &[0.0, 0.0, 2.0]);
        assert!(run.trace.is_empty());
    }

    #[test]
    fn capture_respects_filter_and_concatenates_chunks() {
        let g = graph(
            vec![
                Node::new("r", OpKind::Relu, &["x"], &["h"]),
                Node::new("s", OpKind::Softmax, &["h"], &["y"]),
            ],
            2,
            "y",
        );
        let x = Tensor::from_f32(vec![3, 2], vec![1.0, -1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        let all = execute(&g, &x, &ExecutionOptions::with_chunk_size(2).capture_all()).unwrap();
        assert_eq!(all.trace.len(), 2);
        assert_eq!(all.trace.get("r").unwrap().shape(), &[3, 2]);
        let one = execute(&g, &x, &ExecutionOptions::with_chunk_size(1).capture_only(["s"])).unwrap();
        assert_eq!(one.trace.per_node.keys().collect::<Vec<_>>(), ["s"]);
        assert_eq!(one.output(), all.output());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let w = Tensor::from_f32(vec![3, 2], vec![0.0; 6]).unwrap();
        let g = graph(
            vec![Node::new("fc", OpKind::MatMul, &["x", "w"], &["y"]).with_weight("w", w)],
            2,
            "y",
        );
        // declared width 2 but weight expects 3 inner
        let x = Tensor::from_f32(vec![1, 2], vec![0.0; 2]).unwrap();
        let err = execute(&g, &x, &ExecutionOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Execution { node, .. } if node == "fc"));
    }

    #[test]
    fn input_signature_is_checked() {
        let g = graph(vec![Node::new("r", OpKind::Relu, &["x"], &["y"])], 3, "y");
        let x = Tensor::from_f32(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(execute(&g, &x, &ExecutionOptions::default()).is_err());
        let x = Tensor::from_f32(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(execute(&g, &x, &ExecutionOptions::with_chunk_size(0)).is_err());
    }

    #[test]
    fn pool_attribute_errors_surface_as_execution_errors() {
        let g = Graph::new(
            "p",
            13,
            vec![ValueInfo {
                name: "x".into(),
                dtype: DType::F32,
                shape: vec![Dim::Symbolic("N".into()), Dim::Fixed(1), Dim::Fixed(2), Dim::Fixed(2)],
            }],
            vec!["y".into()],
            vec![Node::new("p", OpKind::MaxPool, &["x"], &["y"])
                .with_attr("kernel_shape", AttrValue::Ints(vec![3, 3]))],
        )
        .unwrap();
        let x = Tensor::from_f32(vec![1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let err = execute(&g, &x, &ExecutionOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Execution { node, .. } if node == "p"));
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let l = Tensor::from_f32(vec![1, 3], vec![0.1, 0.9, 0.5]).unwrap();
        assert_eq!(top_k(&l, 1).unwrap(), vec![vec![1]]);
        assert_eq!(top_k(&l, 3).unwrap(), vec![vec![1, 2, 0]]);
        let l = Tensor::from_f32(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(top_k(&l, 2).unwrap(), vec![vec![0, 1]]);
        assert!(matches!(top_k(&l, 3), Err(Error::Argument(_))));
    }
}
