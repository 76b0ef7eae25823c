//! Execution of quantized Conv/Gemm/MatMul nodes.
//!
//! Activations travel between nodes as f32. A quantized node quantizes its
//! input edge, runs the integer kernel with i32 accumulation, and hands its
//! result on as f32 (requantized through the output parameters first in
//! static mode).

use crate::error::{Error, Result};
use crate::graph::{ActivationQdq, AttrExt, Node, NodeQuant, OpKind};
use crate::quant::params::integer_values;
use crate::quant::{compute_qparams, QuantDType, QuantParams};
use crate::tensor::{numel, DType, Tensor};

use super::kernels;
use super::ops::{conv_geometry, run_op_with};

fn fail(message: impl Into<String>) -> Error {
    Error::exec("", message)
}

pub(crate) fn run_quantized(
    node: &Node,
    quant: &NodeQuant,
    inputs: &[Option<&Tensor>],
    opset: i64,
) -> Result<Tensor> {
    let x = inputs
        .first()
        .copied()
        .flatten()
        .ok_or_else(|| fail("missing activation input"))?;
    match quant {
        NodeQuant::Static { input, output } => run_static(node, x, input, output),
        NodeQuant::Dynamic => run_dynamic(node, x),
        NodeQuant::Simulated { input, output } => {
            let x = apply_qdq(x, input)?;
            let mut slots = inputs.to_vec();
            slots[0] = Some(&x);
            let y = run_op_with(node.op, &slots, &node.attrs, opset)?.remove(0);
            apply_qdq(&y, output)
        }
    }
}

/// Quantize-dequantize an activation in f32.
pub(crate) fn apply_qdq(x: &Tensor, qdq: &ActivationQdq) -> Result<Tensor> {
    let xs = x.as_f32()?;
    let out: Vec<f32> = match qdq {
        ActivationQdq::None => return Ok(x.clone()),
        ActivationQdq::Fixed(p) => xs.iter().map(|&v| p.fake_quantize(v)).collect(),
        ActivationQdq::Runtime => {
            let per = per_sample_len(x)?;
            let mut out = Vec::with_capacity(xs.len());
            for sample in xs.chunks(per.max(1)) {
                let p = runtime_params(sample);
                out.extend(sample.iter().map(|&v| p.fake_quantize(v)));
            }
            out
        }
    };
    Tensor::from_f32(x.shape().to_vec(), out)
}

fn per_sample_len(x: &Tensor) -> Result<usize> {
    if x.rank() == 0 {
        return Err(fail("activation has no batch axis"));
    }
    Ok(numel(&x.shape()[1..]))
}

/// U8 parameters from a sample's own range (zero included).
pub(crate) fn runtime_params(values: &[f32]) -> QuantParams {
    let (lo, hi) = values.iter().fold((0.0f32, 0.0f32), |(lo, hi), &v| {
        (if v < lo { v } else { lo }, if v > hi { v } else { hi })
    });
    compute_qparams(lo, hi, QuantDType::U8)
}

fn weight_params(node: &Node) -> Result<(&Tensor, QuantParams)> {
    let w = node.weight_at(1).ok_or_else(|| fail("quantized node has no bound weight"))?;
    if w.tensor.dtype() != DType::I8 {
        return Err(fail(format!("quantized weight must be i8, found {}", w.tensor.dtype())));
    }
    let p = w.qparams.ok_or_else(|| fail("quantized weight carries no parameters"))?;
    Ok((&w.tensor, p))
}

/// Output channel count the bias is indexed by.
fn out_channels(node: &Node, w: &Tensor) -> Result<usize> {
    Ok(match node.op {
        OpKind::Conv => w.shape()[0],
        OpKind::Gemm if node.attrs.int("transB", 0)? != 0 => w.shape()[0],
        _ => w.shape()[1],
    })
}

/// Channel of flat output element `i` for bias lookup.
fn channel_of(op: OpKind, shape: &[usize], i: usize) -> usize {
    match op {
        OpKind::Conv => (i / numel(&shape[2..])) % shape[1],
        _ => i % shape[shape.len() - 1],
    }
}

/// Integer product of an offset-removed activation and weight.
fn integer_kernel(
    node: &Node,
    x_shape: &[usize],
    xq: &[i32],
    w: &Tensor,
    wq: &[i32],
    bias: Option<&[i32]>,
) -> Result<(Vec<usize>, Vec<i32>)> {
    match node.op {
        OpKind::Conv => {
            let g = conv_geometry(x_shape, w.shape(), &node.attrs)?;
            let out = kernels::conv2d(xq, wq, bias, &g);
            Ok((vec![g.batch, g.out_channels, g.out_h(), g.out_w()], out))
        }
        OpKind::Gemm => {
            if node.attrs.int("transA", 0)? != 0 {
                return Err(fail("quantized Gemm does not support transA"));
            }
            let trans_b = node.attrs.int("transB", 0)? != 0;
            let &[m, k] = x_shape else {
                return Err(fail(format!("Gemm expects a rank-2 input, got {x_shape:?}")));
            };
            let (k2, n) = if trans_b {
                (w.shape()[1], w.shape()[0])
            } else {
                (w.shape()[0], w.shape()[1])
            };
            if k != k2 {
                return Err(fail(format!("Gemm inner extents disagree: {x_shape:?} x {:?}", w.shape())));
            }
            Ok((vec![m, n], kernels::matmul(xq, wq, m, k, n, false, trans_b, bias)))
        }
        OpKind::MatMul => {
            if x_shape.len() < 2 {
                return Err(fail("quantized MatMul needs an input of rank >= 2"));
            }
            let k = x_shape[x_shape.len() - 1];
            let (k2, n) = (w.shape()[0], w.shape()[1]);
            if k != k2 {
                return Err(fail(format!("MatMul inner extents disagree: {x_shape:?} x {:?}", w.shape())));
            }
            let rows = numel(x_shape) / k.max(1);
            let mut shape = x_shape.to_vec();
            *shape.last_mut().unwrap() = n;
            Ok((shape, kernels::matmul(xq, wq, rows, k, n, false, false, bias)))
        }
        other => Err(fail(format!("{other} has no integer kernel"))),
    }
}

fn offset_weights(w: &Tensor, p: &QuantParams) -> Result<Vec<i32>> {
    Ok(integer_values(w)?.map(|v| (v - p.zero_point as i64) as i32).collect())
}

fn expand_bias<T: Copy>(values: &[T], n: usize) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(fail(format!("bias has {len} values for {n} outputs"))),
    }
}

fn run_static(node: &Node, x: &Tensor, input: &QuantParams, output: &QuantParams) -> Result<Tensor> {
    let (w, pw) = weight_params(node)?;
    let wq = offset_weights(w, &pw)?;
    let n_out = out_channels(node, w)?;
    let bias = match node.weight_at(2) {
        None => None,
        Some(b) if b.tensor.dtype() == DType::I32 => {
            let vals: Vec<i32> = integer_values(&b.tensor)?.map(|v| v as i32).collect();
            Some(expand_bias(&vals, n_out)?)
        }
        Some(b) => return Err(fail(format!("static bias must be i32, found {}", b.tensor.dtype()))),
    };
    let xq: Vec<i32> = x
        .as_f32()?
        .iter()
        .map(|&v| (input.quantize_value(v) - input.zero_point as i64) as i32)
        .collect();
    let (shape, acc) = integer_kernel(node, x.shape(), &xq, w, &wq, bias.as_deref())?;
    let multiplier = input.scale * pw.scale / output.scale;
    let (lo, hi) = output.dtype.bounds();
    let out = acc
        .iter()
        .map(|&a| {
            let q = ((a as f64 * multiplier).round_ties_even() as i64)
                .saturating_add(output.zero_point as i64)
                .clamp(lo, hi);
            output.dequantize_value(q)
        })
        .collect();
    Tensor::from_f32(shape, out)
}

fn run_dynamic(node: &Node, x: &Tensor) -> Result<Tensor> {
    let (w, pw) = weight_params(node)?;
    let wq = offset_weights(w, &pw)?;
    let n_out = out_channels(node, w)?;
    let bias = match node.weight_at(2) {
        None => None,
        Some(b) => Some(expand_bias(b.tensor.as_f32()?, n_out)?),
    };
    let per = per_sample_len(x)?;
    let xs = x.as_f32()?;
    let mut sample_shape = x.shape().to_vec();
    sample_shape[0] = 1;
    let mut out = Vec::new();
    let mut out_shape = None;
    for sample in xs.chunks(per.max(1)) {
        let p = runtime_params(sample);
        let xq: Vec<i32> = sample
            .iter()
            .map(|&v| (p.quantize_value(v) - p.zero_point as i64) as i32)
            .collect();
        let (shape, acc) = integer_kernel(node, &sample_shape, &xq, w, &wq, None)?;
        let scale = p.scale * pw.scale;
        out.extend(acc.iter().enumerate().map(|(i, &a)| {
            let v = (a as f64 * scale) as f32;
            match &bias {
                Some(b) => v + b[channel_of(node.op, &shape, i)],
                None => v,
            }
        }));
        out_shape = Some(shape);
    }
    let mut shape = out_shape.ok_or_else(|| fail("empty batch"))?;
    shape[0] = x.shape()[0];
    Tensor::from_f32(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Weight;
    use crate::quant::quantize_tensor;

    #[test]
    fn runtime_params_include_zero() {
        let p = runtime_params(&[2.0, 4.0]);
        assert_eq!(p.zero_point, 0);
        assert_eq!(p.scale, 4.0 / 255.0);
    }

    #[test]
    fn qdq_runtime_is_per_sample() {
        let x = Tensor::from_f32(vec![2, 2], vec![0.0, 1.0, 0.0, 100.0]).unwrap();
        let y = apply_qdq(&x, &ActivationQdq::Runtime).unwrap();
        // each sample's max is exactly representable under its own range
        let y = y.as_f32().unwrap();
        assert_eq!(y[1], 1.0);
        assert_eq!(y[3], 100.0);
    }

    #[test]
    fn static_gemm_matches_hand_computation() {
        // weight 1x1 = 0.5 (i8 scale 0.5/127 -> q 127), input scale 1/255,
        // output range [0, 2]
        let wp = compute_qparams(-0.5, 0.5, QuantDType::I8);
        let w = Tensor::from_f32(vec![1, 1], vec![0.5]).unwrap();
        let mut node = Node::new("fc", OpKind::Gemm, &["x", "w"], &["y"]);
        node.weights.insert(
            "w".into(),
            Weight {
                tensor: quantize_tensor(&w, &wp).unwrap(),
                qparams: Some(wp),
            },
        );
        let input = compute_qparams(0.0, 1.0, QuantDType::U8);
        let output = compute_qparams(0.0, 2.0, QuantDType::U8);
        let x = Tensor::from_f32(vec![1, 1], vec![1.0]).unwrap();
        let q = NodeQuant::Static { input, output };
        let y = run_quantized(&node, &q, &[Some(&x), None], 13).unwrap();
        // acc = 255 * 127, real = 0.5, in output steps of 2/255 -> 63.75 -> 64
        assert_eq!(y.as_f32().unwrap()[0], output.dequantize_value(64));
    }
}
