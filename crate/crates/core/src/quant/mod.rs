//! Calibration and graph rewriting into quantized variants.

pub mod params;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{ActivationQdq, Graph, Node, NodeQuant, Weight};
use crate::tensor::Tensor;

pub use params::{compute_qparams, dequantize_tensor, quantize_tensor, QuantDType, QuantParams};

/// Observed `(min, max)` per activation value name, zero-included.
pub type Calibration = BTreeMap<String, (f32, f32)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Static,
    Dynamic,
}

impl std::str::FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(QuantMode::Static),
            "dynamic" => Ok(QuantMode::Dynamic),
            other => Err(Error::Config(format!("mode must be static or dynamic, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantMode::Static => "static",
            QuantMode::Dynamic => "dynamic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantRecipe {
    pub mode: QuantMode,
    /// Node ids kept in f32, in the order they were chosen.
    pub excluded_layers: Vec<String>,
    pub calibration: Option<Calibration>,
}

impl QuantRecipe {
    pub fn new(mode: QuantMode, excluded_layers: Vec<String>, calibration: Option<Calibration>) -> Self {
        QuantRecipe {
            mode,
            excluded_layers,
            calibration,
        }
    }
}

/// The activation edges a quantized node reads and writes.
fn activation_edges(g: &Graph) -> BTreeSet<&str> {
    g.nodes
        .iter()
        .filter(|n| n.is_quantizable())
        .flat_map(|n| [n.inputs[0].as_str(), n.outputs[0].as_str()])
        .collect()
}

/// Ranges of every quantizable node's input and output over the first
/// `max_samples` samples.
pub fn calibrate(g: &Graph, calib_data: &Dataset, max_samples: usize) -> Result<Calibration> {
    if max_samples == 0 {
        return Err(Error::Argument("max_samples must be at least 1".into()));
    }
    let edges = activation_edges(g);
    let mut ranges: Calibration = edges.iter().map(|e| (e.to_string(), (0.0, 0.0))).collect();
    let batch = calib_data.head(max_samples)?;
    engine::execute_observed(g, &batch, 32, &mut |name, value| {
        let Some(range) = ranges.get_mut(name) else {
            return;
        };
        if let Ok(xs) = value.as_f32() {
            for &v in xs {
                // NaN never widens the range
                if v < range.0 {
                    range.0 = v;
                }
                if v > range.1 {
                    range.1 = v;
                }
            }
        }
    })?;
    Ok(ranges)
}

fn range_of(xs: &[f32]) -> (f32, f32) {
    xs.iter()
        .fold((0.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn weight_qparams(w: &Tensor) -> Result<QuantParams> {
    let (lo, hi) = range_of(w.as_f32()?);
    Ok(compute_qparams(lo, hi, QuantDType::I8))
}

fn lookup<'a>(cal: &'a Calibration, edge: &str, node: &str) -> Result<&'a (f32, f32)> {
    cal.get(edge)
        .ok_or_else(|| Error::Recipe(format!("no calibration range for {edge} (node {node})")))
}

fn check_exclusions(g: &Graph, excluded: &[String]) -> Result<BTreeSet<String>> {
    let quantizable: BTreeSet<String> = g.quantizable_ids().into_iter().collect();
    let mut set = BTreeSet::new();
    for id in excluded {
        if !quantizable.contains(id) {
            return Err(Error::Recipe(format!("{id:?} is not a quantizable node of {}", g.name)));
        }
        set.insert(id.clone());
    }
    Ok(set)
}

/// Quantizes every quantizable node not listed in `recipe.excluded_layers`.
///
/// Weights become symmetric i8. Static nodes also get an i32 bias and
/// calibrated u8 activation parameters; dynamic nodes keep an f32 bias and
/// derive input parameters at run time.
pub fn selective_quantize(g: &Graph, recipe: &QuantRecipe) -> Result<Graph> {
    let excluded = check_exclusions(g, &recipe.excluded_layers)?;
    let cal = match (recipe.mode, &recipe.calibration) {
        (QuantMode::Static, None) => {
            return Err(Error::Recipe("static quantization needs calibration".into()));
        }
        (_, cal) => cal.as_ref(),
    };
    let mut out = g.clone();
    for node in out.nodes.iter_mut() {
        if !node.is_quantizable() || excluded.contains(&node.id) {
            continue;
        }
        quantize_node(node, recipe.mode, cal)?;
    }
    out.validate()?;
    Ok(out)
}

fn quantize_node(node: &mut Node, mode: QuantMode, cal: Option<&Calibration>) -> Result<()> {
    let w_name = node.inputs[1].clone();
    let w = &node.weights[&w_name].tensor;
    let wp = weight_qparams(w)?;
    let wq = quantize_tensor(w, &wp)?;
    node.weights.insert(
        w_name,
        Weight {
            tensor: wq,
            qparams: Some(wp),
        },
    );
    match mode {
        QuantMode::Dynamic => node.quant = Some(NodeQuant::Dynamic),
        QuantMode::Static => {
            let cal = cal.expect("checked by caller");
            let (lo, hi) = *lookup(cal, &node.inputs[0], &node.id)?;
            let input = compute_qparams(lo, hi, QuantDType::U8);
            let (lo, hi) = *lookup(cal, &node.outputs[0], &node.id)?;
            let output = compute_qparams(lo, hi, QuantDType::U8);
            if let Some(b_name) = node.inputs.get(2).filter(|s| !s.is_empty()).cloned() {
                let scale = input.scale * wp.scale;
                let bp = QuantParams::new(scale, 0, QuantDType::I32)
                    .map_err(|e| Error::Recipe(format!("bias of {}: {e}", node.id)))?;
                let b = &node.weights[&b_name].tensor;
                node.weights.insert(
                    b_name,
                    Weight {
                        tensor: quantize_tensor(b, &bp)?,
                        qparams: Some(bp),
                    },
                );
            }
            node.quant = Some(NodeQuant::Static { input, output });
        }
    }
    Ok(())
}

/// An all-f32 copy of `g` where only `node_id`'s weight and output are
/// snapped to the int8 grid.
///
/// With a calibration the output edge uses its calibrated u8 parameters.
/// Without one (dynamic analysis) the output stays f32 and the input is
/// snapped per sample from its own range, mirroring the dynamic kernel.
pub fn qdq_simulate_layer(g: &Graph, node_id: &str, calibration: Option<&Calibration>) -> Result<Graph> {
    let mut out = g.clone();
    let node = out
        .nodes
        .iter_mut()
        .find(|n| n.id == node_id)
        .filter(|n| n.is_quantizable())
        .ok_or_else(|| Error::Recipe(format!("{node_id:?} is not a quantizable node of {}", g.name)))?;
    let w_name = node.inputs[1].clone();
    let weight = node.weights.get_mut(&w_name).expect("quantizable nodes bind a weight");
    let wp = weight_qparams(&weight.tensor)?;
    let snapped: Vec<f32> = weight.tensor.as_f32()?.iter().map(|&v| wp.fake_quantize(v)).collect();
    weight.tensor = Tensor::from_f32(weight.tensor.shape().to_vec(), snapped)?;
    weight.qparams = Some(wp);
    node.quant = Some(match calibration {
        Some(cal) => {
            let (lo, hi) = *lookup(cal, &node.outputs[0], &node.id)?;
            NodeQuant::Simulated {
                input: ActivationQdq::None,
                output: ActivationQdq::Fixed(compute_qparams(lo, hi, QuantDType::U8)),
            }
        }
        None => NodeQuant::Simulated {
            input: ActivationQdq::Runtime,
            output: ActivationQdq::None,
        },
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::engine::{execute, ExecutionOptions};
    use crate::graph::{Dim, OpKind, ValueInfo};
    use crate::tensor::DType;

    fn two_layer() -> Graph {
        let w1 = Tensor::from_f32(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let w2 = Tensor::from_f32(vec![2, 2], vec![0.5, 0.25, -0.4, 0.9]).unwrap();
        let b2 = Tensor::from_f32(vec![2], vec![0.1, -0.2]).unwrap();
        Graph::new(
            "two",
            13,
            vec![ValueInfo {
                name: "x".into(),
                dtype: DType::F32,
                shape: vec![Dim::Symbolic("N".into()), Dim::Fixed(2)],
            }],
            vec!["y".into()],
            vec![
                Node::new("a", OpKind::MatMul, &["x", "w1"], &["h"]).with_weight("w1", w1),
                Node::new("r", OpKind::Relu, &["h"], &["hr"]),
                Node::new("b", OpKind::Gemm, &["hr", "w2", "b2"], &["y"])
                    .with_weight("w2", w2)
                    .with_weight("b2", b2),
            ],
        )
        .unwrap()
    }

    fn data(rows: &[[f32; 2]]) -> Dataset {
        Dataset::new(
            "d",
            rows.iter()
                .map(|r| Sample {
                    tensor: Tensor::from_f32(vec![2], r.to_vec()).unwrap(),
                    label: 0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn calibration_ranges_include_zero_and_respect_max_samples() {
        let g = two_layer();
        let d = data(&[[1.0, 2.0], [-3.0, 0.5]]);
        let cal = calibrate(&g, &d, 1).unwrap();
        assert_eq!(cal["x"], (0.0, 2.0));
        let cal = calibrate(&g, &d, 5).unwrap();
        assert_eq!(cal["x"], (-3.0, 2.0));
        assert_eq!(cal.keys().collect::<Vec<_>>(), ["h", "hr", "x", "y"]);
    }

    #[test]
    fn full_exclusion_is_identity() {
        let g = two_layer();
        let r = QuantRecipe::new(QuantMode::Dynamic, vec!["a".into(), "b".into()], None);
        assert_eq!(selective_quantize(&g, &r).unwrap(), g);
    }

    #[test]
    fn static_quantization_rewrites_weights_and_bias() {
        let g = two_layer();
        let cal = calibrate(&g, &data(&[[1.0, 2.0], [-1.0, 0.5]]), 10).unwrap();
        let r = QuantRecipe::new(QuantMode::Static, vec![], Some(cal));
        let q = selective_quantize(&g, &r).unwrap();
        let b = q.node("b").unwrap();
        assert_eq!(b.weights["w2"].tensor.dtype(), DType::I8);
        assert_eq!(b.weights["b2"].tensor.dtype(), DType::I32);
        assert_eq!(q.node("a").unwrap().weights["w1"].tensor.dtype(), DType::I8);
        let x = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let fp = execute(&g, &x, &ExecutionOptions::default()).unwrap().into_output();
        let qy = execute(&q, &x, &ExecutionOptions::default()).unwrap().into_output();
        for (a, b) in fp.as_f32().unwrap().iter().zip(qy.as_f32().unwrap()) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn recipe_errors() {
        let g = two_layer();
        let r = QuantRecipe::new(QuantMode::Dynamic, vec!["r".into()], None);
        assert!(matches!(selective_quantize(&g, &r), Err(Error::Recipe(_))));
        let r = QuantRecipe::new(QuantMode::Static, vec![], None);
        assert!(matches!(selective_quantize(&g, &r), Err(Error::Recipe(_))));
        let r = QuantRecipe::new(QuantMode::Static, vec![], Some(Calibration::new()));
        assert!(matches!(selective_quantize(&g, &r), Err(Error::Recipe(_))));
        assert!(matches!(qdq_simulate_layer(&g, "r", None), Err(Error::Recipe(_))));
    }

    #[test]
    fn qdq_leaves_upstream_untouched() {
        let g = two_layer();
        let cal = calibrate(&g, &data(&[[1.0, 2.0]]), 1).unwrap();
        let s = qdq_simulate_layer(&g, "b", Some(&cal)).unwrap();
        let x = Tensor::from_f32(vec![2, 2], vec![1.0, 2.0, 0.3, -0.1]).unwrap();
        let opts = ExecutionOptions::default().capture_all();
        let a = execute(&g, &x, &opts).unwrap();
        let b = execute(&s, &x, &opts).unwrap();
        assert_eq!(a.trace.get("a"), b.trace.get("a"));
        assert_eq!(a.trace.get("r"), b.trace.get("r"));
        assert_eq!(s.node("b").unwrap().weights["w2"].tensor.dtype(), DType::F32);
    }

    #[test]
    fn qdq_on_grid_weights_is_exact() {
        // weights 1 and -1 are on the grid (scale 1/127); output range chosen
        // so 0 and 255/255 land on u8 steps
        let w = Tensor::from_f32(vec![1, 1], vec![1.0]).unwrap();
        let g = Graph::new(
            "g",
            13,
            vec![ValueInfo {
                name: "x".into(),
                dtype: DType::F32,
                shape: vec![Dim::Symbolic("N".into()), Dim::Fixed(1)],
            }],
            vec!["y".into()],
            vec![Node::new("m", OpKind::MatMul, &["x", "w"], &["y"]).with_weight("w", w)],
        )
        .unwrap();
        let cal = Calibration::from([("x".into(), (0.0, 1.0)), ("y".into(), (0.0, 1.0))]);
        let s = qdq_simulate_layer(&g, "m", Some(&cal)).unwrap();
        let x = Tensor::from_f32(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let a = execute(&g, &x, &ExecutionOptions::default()).unwrap().into_output();
        let b = execute(&s, &x, &ExecutionOptions::default()).unwrap().into_output();
        assert_eq!(a, b);
    }
}
